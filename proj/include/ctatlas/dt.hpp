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

#pragma once

#include <cstdint>
#include <limits>
#include <vector>

namespace ctatlas {

// Lower envelope of parabolas (Felzenszwalb-Huttenlocher):
//   out[i] = min_j ( f[j] + a * (i - j)^2 )
// a == 0 degenerates to the running minimum of the whole line.
// Scratch vectors are caller-provided so hot loops can reuse them.
struct EnvelopeScratch {
    std::vector<int> v;      // parabola roots
    std::vector<double> z;   // boundaries
    void resize(int n) {
        v.resize(n);
        z.resize(n + 1);
    }
};

inline void lower_envelope_1d(const double* f, double* out, int n, double a,
                              EnvelopeScratch& s) {
    if (n == 1) {
        out[0] = f[0];
        return;
    }
    if (a <= 0.0) {
        double m = f[0];
        for (int i = 1; i < n; ++i)
            if (f[i] < m) m = f[i];
        for (int i = 0; i < n; ++i) out[i] = m;
        return;
    }
    s.resize(n);
    int* v = s.v.data();
    double* z = s.z.data();
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double sep;
        while (true) {
            const int p = v[k];
            sep = ((f[q] - f[p]) / a + static_cast<double>(q) * q - static_cast<double>(p) * p) /
                  (2.0 * (q - p));
            if (sep > z[k]) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = sep;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const int p = v[k];
        const double d = static_cast<double>(q) - p;
        out[q] = f[p] + a * d * d;
    }
}

// Squared Euclidean distance (in voxel units) to the nearest set voxel.
// Unset voxels with no set voxel anywhere come back as +inf.
std::vector<double> squared_edt(const std::vector<std::uint8_t>& mask, int nx, int ny, int nz);

} // namespace ctatlas
