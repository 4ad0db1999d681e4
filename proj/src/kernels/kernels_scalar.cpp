/*
 * ctatlas : registration and atlas construction for chest CT
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <cmath>
#include <cstddef>

namespace ctatlas::kernels::scalar {

float sad_clamped(const float* a, const float* b, std::size_t n) {
    float total = 0.0f;
    for (std::size_t i = 0; i < n; ++i) {
        const float d = std::fabs(a[i] - b[i]);
        total += d < 1.0f ? d : 1.0f;
    }
    return total;
}

void xcorr_lags(const float* a, std::size_t n, const float* b, float* acc, std::size_t nlag) {
    for (std::size_t l = 0; l < nlag; ++l) {
        float s = acc[l];
        for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i + l];
        acc[l] = s;
    }
}

} // namespace ctatlas::kernels::scalar
