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

#include "ctatlas/dt.hpp"

namespace ctatlas {

namespace {

void envelope_along(std::vector<double>& field, int nx, int ny, int nz, int axis) {
    EnvelopeScratch scratch;
    const int n = axis == 0 ? nx : (axis == 1 ? ny : nz);
    const std::size_t stride = axis == 0 ? 1
                             : (axis == 1 ? static_cast<std::size_t>(nx)
                                          : static_cast<std::size_t>(nx) * ny);
    std::vector<double> line(n), out(n);
    const int nu = axis == 0 ? ny : nx;
    const int nv = axis == 2 ? ny : nz;
    for (int v = 0; v < nv; ++v) {
        for (int u = 0; u < nu; ++u) {
            std::size_t base;
            if (axis == 0)
                base = (static_cast<std::size_t>(v) * ny + u) * nx;
            else if (axis == 1)
                base = static_cast<std::size_t>(v) * nx * ny + u;
            else
                base = static_cast<std::size_t>(v) * nx + u;
            for (int i = 0; i < n; ++i) line[i] = field[base + i * stride];
            lower_envelope_1d(line.data(), out.data(), n, 1.0, scratch);
            for (int i = 0; i < n; ++i) field[base + i * stride] = out[i];
        }
    }
}

} // namespace

std::vector<double> squared_edt(const std::vector<std::uint8_t>& mask, int nx, int ny, int nz) {
    // The envelope recursion cannot mix infinities, so absent voxels start at
    // a finite sentinel far above any reachable squared distance.
    const double far = 1e15;
    std::vector<double> d(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) d[i] = mask[i] ? 0.0 : far;
    envelope_along(d, nx, ny, nz, 0);
    envelope_along(d, nx, ny, nz, 1);
    envelope_along(d, nx, ny, nz, 2);
    const double inf = std::numeric_limits<double>::infinity();
    for (auto& v : d)
        if (v >= 1e14) v = inf;
    return d;
}

} // namespace ctatlas
