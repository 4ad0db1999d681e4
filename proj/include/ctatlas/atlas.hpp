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

#include "ctatlas/volume.hpp"

namespace ctatlas {

// Common coordinate region every scan is averaged over: the reference's
// valid voxels restricted to its body mask.
Mask standard_roi(const Mask& reference_valid, const Mask& reference_body);

// Voxels of the ROI a projected scan actually covers: its validity mask
// warped onto the reference grid (nearest neighbour), intersected with roi.
Mask effective_region(const Mask& moving_valid, const DisplacementField& field, const Mask& roi);

// Per-voxel streaming moments with order-independent merging: values are
// quantised to 2^-40 once, then summed in 128-bit integers, so any grouping
// of scans produces bit-identical sums. Values are clamped to +/-20000
// (far beyond any HU or log-Jacobian) to keep the squares in range.
struct AtlasAccumulator {
    Geometry geom;
    std::vector<__int128> sum;   // value * 2^40
    std::vector<__int128> sumsq; // value^2 * 2^80
    std::vector<std::uint32_t> count;

    AtlasAccumulator() = default;
    explicit AtlasAccumulator(const Geometry& g)
        : geom(g), sum(g.voxel_count(), 0), sumsq(g.voxel_count(), 0),
          count(g.voxel_count(), 0) {}
};

inline constexpr double kAtlasValueClamp = 20000.0;

void accumulate(AtlasAccumulator& acc, const Volume& map, const Mask& region);
void merge(AtlasAccumulator& acc, const AtlasAccumulator& other);

// mean where count >= 1, sample variance (count-1 denominator, clamped at 0)
// where count >= 2; elsewhere invalid. count is valid everywhere.
struct AtlasMoments {
    Volume mean;
    Volume variance;
    Volume count;
};

AtlasMoments finalize(const AtlasAccumulator& acc);

// a - b where both are valid, invalid elsewhere.
Volume atlas_diff(const Volume& a, const Volume& b);

} // namespace ctatlas
