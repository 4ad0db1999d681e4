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

// Width-generic vector kernels; the including translation unit defines
// CTATLAS_KERNEL_NS and is compiled with the matching -m flags, so
// native_simd picks up the intended register width.

#include <cmath>
#include <cstddef>
#include <experimental/simd>

namespace stdx = std::experimental;

namespace ctatlas::kernels::CTATLAS_KERNEL_NS {

using vfloat = stdx::native_simd<float>;

float sad_clamped(const float* a, const float* b, std::size_t n) {
    constexpr std::size_t W = vfloat::size();
    vfloat acc = 0.0f;
    std::size_t i = 0;
    for (; i + W <= n; i += W) {
        const vfloat va(a + i, stdx::element_aligned);
        const vfloat vb(b + i, stdx::element_aligned);
        acc += stdx::min(stdx::abs(va - vb), vfloat(1.0f));
    }
    float total = stdx::reduce(acc);
    for (; i < n; ++i) {
        const float d = std::fabs(a[i] - b[i]);
        total += d < 1.0f ? d : 1.0f;
    }
    return total;
}

void xcorr_lags(const float* a, std::size_t n, const float* b, float* acc, std::size_t nlag) {
    constexpr std::size_t W = vfloat::size();
    std::size_t l = 0;
    for (; l + W <= nlag; l += W) {
        vfloat vacc(acc + l, stdx::element_aligned);
        for (std::size_t i = 0; i < n; ++i) {
            const vfloat vb(b + i + l, stdx::element_aligned);
            vacc += vfloat(a[i]) * vb;
        }
        vacc.copy_to(acc + l, stdx::element_aligned);
    }
    for (; l < nlag; ++l) {
        float s = acc[l];
        for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i + l];
        acc[l] = s;
    }
}

} // namespace ctatlas::kernels::CTATLAS_KERNEL_NS
