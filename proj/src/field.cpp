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

#include "ctatlas/field.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "ctatlas/errors.hpp"
#include "ctatlas/interp.hpp"
#include "ctatlas/parallel.hpp"

namespace ctatlas {

DisplacementField identity_field(const Geometry& g) { return DisplacementField(g); }

DisplacementField compose_fields(const DisplacementField& outer, const DisplacementField& inner) {
    DisplacementField out(outer.geom);
    const Geometry& g = outer.geom;
    parallel_for(0, g.dims.z, [&](std::int64_t k0, std::int64_t k1) {
        for (int k = static_cast<int>(k0); k < k1; ++k)
            for (int j = 0; j < g.dims.y; ++j)
                for (int i = 0; i < g.dims.x; ++i) {
                    const Vec3 x = g.world(i, j, k);
                    const Vec3 u = outer.at(i, j, k);
                    const Vec3 v = field_sample(inner, x + u);
                    out.set(i, j, k, u + v);
                }
    });
    return out;
}

DisplacementField resample_field(const DisplacementField& f, const Geometry& out_geom) {
    // Matching grids copy through so a one-stage pipeline reproduces the
    // stage output bit for bit.
    if (f.geom.same_grid(out_geom)) {
        DisplacementField copy = f;
        copy.geom = out_geom;
        return copy;
    }
    DisplacementField out(out_geom);
    parallel_for(0, out_geom.dims.z, [&](std::int64_t k0, std::int64_t k1) {
        for (int k = static_cast<int>(k0); k < k1; ++k)
            for (int j = 0; j < out_geom.dims.y; ++j)
                for (int i = 0; i < out_geom.dims.x; ++i)
                    out.set(i, j, k, field_sample(f, out_geom.world(i, j, k)));
    });
    return out;
}

Volume warp_volume(const Volume& moving, const DisplacementField& field) {
    Volume out(field.geom);
    const Geometry& g = field.geom;
    parallel_for(0, g.dims.z, [&](std::int64_t k0, std::int64_t k1) {
        for (int k = static_cast<int>(k0); k < k1; ++k)
            for (int j = 0; j < g.dims.y; ++j)
                for (int i = 0; i < g.dims.x; ++i) {
                    const Vec3 x = g.world(i, j, k);
                    const Sample s = trilinear_sample(moving, x + field.at(i, j, k));
                    const std::size_t idx = g.index(i, j, k);
                    out.data[idx] = s.value;
                    out.valid[idx] = s.valid ? 1 : 0;
                }
    });
    return out;
}

Volume warp_volume_partial(const Volume& moving, const DisplacementField& field) {
    Volume out(field.geom);
    const Geometry& g = field.geom;
    parallel_for(0, g.dims.z, [&](std::int64_t k0, std::int64_t k1) {
        for (int k = static_cast<int>(k0); k < k1; ++k)
            for (int j = 0; j < g.dims.y; ++j)
                for (int i = 0; i < g.dims.x; ++i) {
                    const Vec3 x = g.world(i, j, k);
                    const Sample s = trilinear_sample_partial(moving, x + field.at(i, j, k));
                    const std::size_t idx = g.index(i, j, k);
                    out.data[idx] = s.value;
                    out.valid[idx] = s.valid ? 1 : 0;
                }
    });
    return out;
}

Mask warp_mask_nearest(const Mask& m, const DisplacementField& field) {
    Mask out(field.geom);
    const Geometry& g = field.geom;
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const Vec3 x = g.world(i, j, k);
                if (nearest_mask_sample(m, x + field.at(i, j, k)))
                    out.data[g.index(i, j, k)] = 1;
            }
    return out;
}

namespace {

// Gradient of one displacement component along one axis, in world units.
inline double grad_axis(const std::vector<double>& u, const Geometry& g, int i, int j, int k,
                        int axis) {
    const int n = axis == 0 ? g.dims.x : (axis == 1 ? g.dims.y : g.dims.z);
    const double sp = axis == 0 ? g.spacing.x : (axis == 1 ? g.spacing.y : g.spacing.z);
    const int p = axis == 0 ? i : (axis == 1 ? j : k);
    const auto at = [&](int q) {
        const int ii = axis == 0 ? q : i;
        const int jj = axis == 1 ? q : j;
        const int kk = axis == 2 ? q : k;
        return u[g.index(ii, jj, kk)];
    };
    if (n == 1) return 0.0;
    if (p == 0) return (at(1) - at(0)) / sp;
    if (p == n - 1) return (at(n - 1) - at(n - 2)) / sp;
    return (at(p + 1) - at(p - 1)) / (2.0 * sp);
}

} // namespace

double jacobian_determinant(const DisplacementField& f, int i, int j, int k) {
    const Geometry& g = f.geom;
    double J[3][3];
    const std::vector<double>* comps[3] = {&f.ux, &f.uy, &f.uz};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            J[r][c] = grad_axis(*comps[r], g, i, j, k, c) + (r == c ? 1.0 : 0.0);
    return J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
           J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
}

Volume log_jacobian(const DisplacementField& field, std::size_t* folded_count) {
    Volume out(field.geom, 0.0f, true);
    const Geometry& g = field.geom;
    std::atomic<std::size_t> folded{0};
    parallel_for(0, g.dims.z, [&](std::int64_t k0, std::int64_t k1) {
        std::size_t local = 0;
        for (int k = static_cast<int>(k0); k < k1; ++k)
            for (int j = 0; j < g.dims.y; ++j)
                for (int i = 0; i < g.dims.x; ++i) {
                    const double det = jacobian_determinant(field, i, j, k);
                    if (det <= 0.0) ++local;
                    out.data[g.index(i, j, k)] =
                        static_cast<float>(std::log(std::max(det, kJacobianFloor)));
                }
        folded += local;
    });
    if (folded_count) *folded_count = folded.load();
    return out;
}

double folding_fraction(const DisplacementField& field, const Mask& roi) {
    if (!field.geom.same_grid(roi.geom))
        throw GeometryError("folding_fraction: field and roi grids differ");
    const Geometry& g = field.geom;
    std::size_t total = 0, folded = 0;
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                if (!roi.data[g.index(i, j, k)]) continue;
                ++total;
                if (jacobian_determinant(field, i, j, k) <= 0.0) ++folded;
            }
    return total == 0 ? 0.0 : static_cast<double>(folded) / static_cast<double>(total);
}

double mean_displacement(const DisplacementField& field, const Mask& roi) {
    if (!field.geom.same_grid(roi.geom))
        throw GeometryError("mean_displacement: field and roi grids differ");
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < field.ux.size(); ++i) {
        if (!roi.data[i]) continue;
        acc += std::sqrt(field.ux[i] * field.ux[i] + field.uy[i] * field.uy[i] +
                         field.uz[i] * field.uz[i]);
        ++n;
    }
    return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

} // namespace ctatlas
