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
#include <vector>

#include "ctatlas/geometry.hpp"

namespace ctatlas {

// HU assigned to voxels without a measured value (outside FOV, padding).
inline constexpr float kAirHU = -1000.0f;

struct Mask {
    Geometry geom;
    std::vector<std::uint8_t> data;

    Mask() = default;
    explicit Mask(const Geometry& g, std::uint8_t fill = 0) : geom(g), data(g.voxel_count(), fill) {}

    std::uint8_t at(int i, int j, int k) const { return data[geom.index(i, j, k)]; }
    void set(int i, int j, int k, std::uint8_t v) { data[geom.index(i, j, k)] = v; }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : data) n += (v != 0);
        return n;
    }
};

// Scalar volume with per-voxel validity. Invalid voxels always hold kAirHU so
// that raw reads of the data array are safe without consulting the mask.
struct Volume {
    Geometry geom;
    std::vector<float> data;
    std::vector<std::uint8_t> valid;

    Volume() = default;
    explicit Volume(const Geometry& g, float fill = kAirHU, bool valid_fill = true)
        : geom(g), data(g.voxel_count(), fill), valid(g.voxel_count(), valid_fill ? 1 : 0) {}

    float at(int i, int j, int k) const { return data[geom.index(i, j, k)]; }
    bool is_valid(int i, int j, int k) const { return valid[geom.index(i, j, k)] != 0; }

    void set(int i, int j, int k, float v) { data[geom.index(i, j, k)] = v; }

    void invalidate(std::size_t idx) {
        valid[idx] = 0;
        data[idx] = kAirHU;
    }

    // Re-establishes the invariant that invalid voxels hold kAirHU.
    void impute_invalid() {
        for (std::size_t i = 0; i < data.size(); ++i)
            if (!valid[i]) data[i] = kAirHU;
    }

    Mask valid_mask() const {
        Mask m(geom);
        m.data.assign(valid.begin(), valid.end());
        return m;
    }
};

// Dense displacement field sampled on a grid; u is stored in world mm with
// the pull-back convention: the warped image at x samples the source at x+u(x).
struct DisplacementField {
    Geometry geom;
    std::vector<double> ux, uy, uz;

    DisplacementField() = default;
    explicit DisplacementField(const Geometry& g)
        : geom(g), ux(g.voxel_count(), 0.0), uy(g.voxel_count(), 0.0), uz(g.voxel_count(), 0.0) {}

    Vec3 at(int i, int j, int k) const {
        const std::size_t idx = geom.index(i, j, k);
        return {ux[idx], uy[idx], uz[idx]};
    }

    void set(int i, int j, int k, const Vec3& u) {
        const std::size_t idx = geom.index(i, j, k);
        ux[idx] = u.x;
        uy[idx] = u.y;
        uz[idx] = u.z;
    }
};

} // namespace ctatlas
