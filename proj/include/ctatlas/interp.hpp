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

#include <cmath>

#include "ctatlas/volume.hpp"

namespace ctatlas {

struct Sample {
    float value = kAirHU;
    bool valid = false;
};

namespace detail {

// Cell lookup along one axis: voxel interval [i0, i0+1] and fraction f.
// Points exactly on the last voxel centre map to the previous cell with f=1
// so that every in-grid point belongs to a cell.
struct AxisCell {
    int i0 = 0;
    double f = 0.0;
    bool in = false;
};

inline AxisCell axis_cell(double t, int n) {
    AxisCell c;
    if (n == 1) {
        c.i0 = 0;
        c.f = 0.0;
        c.in = (t == 0.0);
        return c;
    }
    if (t < 0.0 || t > static_cast<double>(n - 1)) return c;
    double fl = std::floor(t);
    c.i0 = static_cast<int>(fl);
    c.f = t - fl;
    if (c.i0 == n - 1) {
        c.i0 = n - 2;
        c.f = 1.0;
    }
    c.in = true;
    return c;
}

} // namespace detail

// Trilinear interpolation at a world point. The sample is valid iff every
// corner with nonzero weight is in-grid and valid; otherwise (kAirHU, false).
// Zero-weight corners are ignored, so exact voxel centres reproduce the stored
// value whenever that voxel itself is valid.
inline Sample trilinear_sample(const Volume& vol, const Vec3& world) {
    const Geometry& g = vol.geom;
    const Vec3 t = g.voxel(world);
    const auto cx = detail::axis_cell(t.x, g.dims.x);
    const auto cy = detail::axis_cell(t.y, g.dims.y);
    const auto cz = detail::axis_cell(t.z, g.dims.z);
    if (!cx.in || !cy.in || !cz.in) return {};

    const double wx[2] = {1.0 - cx.f, cx.f};
    const double wy[2] = {1.0 - cy.f, cy.f};
    const double wz[2] = {1.0 - cz.f, cz.f};

    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
                const double w = wx[dx] * wy[dy] * wz[dz];
                if (w == 0.0) continue;
                const int i = cx.i0 + dx, j = cy.i0 + dy, k = cz.i0 + dz;
                if (!g.in_grid(i, j, k)) return {};
                const std::size_t idx = g.index(i, j, k);
                if (!vol.valid[idx]) return {};
                acc += w * vol.data[idx];
            }
        }
    }
    return {static_cast<float>(acc), true};
}

// Trilinear interpolation that tolerates gaps: invalid or out-of-grid corners
// are dropped and the remaining weights renormalised. Invalid only when no
// nonzero-weight corner is usable. With full support the accumulation matches
// trilinear_sample bit for bit (no renormalising division happens).
inline Sample trilinear_sample_partial(const Volume& vol, const Vec3& world) {
    const Geometry& g = vol.geom;
    const Vec3 t = g.voxel(world);
    const auto cx = detail::axis_cell(t.x, g.dims.x);
    const auto cy = detail::axis_cell(t.y, g.dims.y);
    const auto cz = detail::axis_cell(t.z, g.dims.z);
    if (!cx.in || !cy.in || !cz.in) return {};

    const double wx[2] = {1.0 - cx.f, cx.f};
    const double wy[2] = {1.0 - cy.f, cy.f};
    const double wz[2] = {1.0 - cz.f, cz.f};

    double acc = 0.0, wsum = 0.0;
    bool dropped = false;
    for (int dz = 0; dz < 2; ++dz) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
                const double w = wx[dx] * wy[dy] * wz[dz];
                if (w == 0.0) continue;
                const int i = cx.i0 + dx, j = cy.i0 + dy, k = cz.i0 + dz;
                if (!g.in_grid(i, j, k)) {
                    dropped = true;
                    continue;
                }
                const std::size_t idx = g.index(i, j, k);
                if (!vol.valid[idx]) {
                    dropped = true;
                    continue;
                }
                acc += w * vol.data[idx];
                wsum += w;
            }
        }
    }
    if (wsum <= 0.0) return {};
    return {static_cast<float>(dropped ? acc / wsum : acc), true};
}

// Nearest-neighbour lookup; out-of-grid points are invalid / outside.
inline Sample nearest_sample(const Volume& vol, const Vec3& world) {
    const Geometry& g = vol.geom;
    const Vec3 t = g.voxel(world);
    const int i = static_cast<int>(std::lround(t.x));
    const int j = static_cast<int>(std::lround(t.y));
    const int k = static_cast<int>(std::lround(t.z));
    if (!g.in_grid(i, j, k)) return {};
    const std::size_t idx = g.index(i, j, k);
    return {vol.data[idx], vol.valid[idx] != 0};
}

inline bool nearest_mask_sample(const Mask& m, const Vec3& world) {
    const Geometry& g = m.geom;
    const Vec3 t = g.voxel(world);
    const int i = static_cast<int>(std::lround(t.x));
    const int j = static_cast<int>(std::lround(t.y));
    const int k = static_cast<int>(std::lround(t.z));
    if (!g.in_grid(i, j, k)) return false;
    return m.data[g.index(i, j, k)] != 0;
}

// Trilinear interpolation of a displacement field; the grid is assumed to
// cover the query point, otherwise the value is clamped to the border cell.
inline Vec3 field_sample(const DisplacementField& f, const Vec3& world) {
    const Geometry& g = f.geom;
    Vec3 t = g.voxel(world);
    const auto clamp_axis = [](double t, int n) {
        if (n == 1) return 0.0;
        if (t < 0.0) return 0.0;
        if (t > static_cast<double>(n - 1)) return static_cast<double>(n - 1);
        return t;
    };
    t.x = clamp_axis(t.x, g.dims.x);
    t.y = clamp_axis(t.y, g.dims.y);
    t.z = clamp_axis(t.z, g.dims.z);
    const auto cx = detail::axis_cell(t.x, g.dims.x);
    const auto cy = detail::axis_cell(t.y, g.dims.y);
    const auto cz = detail::axis_cell(t.z, g.dims.z);

    const double wx[2] = {1.0 - cx.f, cx.f};
    const double wy[2] = {1.0 - cy.f, cy.f};
    const double wz[2] = {1.0 - cz.f, cz.f};
    Vec3 acc{0.0, 0.0, 0.0};
    for (int dz = 0; dz < 2; ++dz) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
                const double w = wx[dx] * wy[dy] * wz[dz];
                if (w == 0.0) continue;
                const int i = std::min(cx.i0 + dx, g.dims.x - 1);
                const int j = std::min(cy.i0 + dy, g.dims.y - 1);
                const int k = std::min(cz.i0 + dz, g.dims.z - 1);
                const std::size_t idx = g.index(i, j, k);
                acc.x += w * f.ux[idx];
                acc.y += w * f.uy[idx];
                acc.z += w * f.uz[idx];
            }
        }
    }
    return acc;
}

} // namespace ctatlas
