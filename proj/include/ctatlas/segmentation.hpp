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

// Morphology with a Euclidean ball of radius r voxels, O(V) via distance
// transforms.
Mask dilate_ball(const Mask& m, double r_vox);
Mask erode_ball(const Mask& m, double r_vox);
Mask close_ball(const Mask& m, double r_vox);

// 6-connected labelling; label 0 is background, components numbered from 1
// in first-voxel scan order. n_components receives the count when non-null.
std::vector<std::int32_t> connected_components_6(const Mask& m, int* n_components = nullptr);

Mask largest_component(const Mask& m);

// Fills 2-D holes slice by slice (axial planes): background regions not
// reachable from the slice border become foreground.
Mask fill_holes_axial(const Mask& m);

// Patient body: HU > -500, largest component, closed (r=2), axial hole fill,
// largest component again. Invalid voxels never qualify. Throws
// DegenerateInputError when nothing qualifies.
Mask segment_body(const Volume& hu);

// Lungs: HU in [-950, -400] within the body, minus components that touch
// non-body tissue laterally (partial-volume skin line), keeping the two
// largest (one when the runner-up is below 10% of the largest), closed r=1.
// Throws DegenerateInputError when no candidate survives.
Mask segment_lung(const Volume& hu, const Mask& body);

// Valid voxels outside the body forced to exactly kAirHU; they stay valid.
// Idempotent, so re-running preprocessing cannot drift.
Volume remove_ambient(const Volume& vol, const Mask& body);

struct PreprocessedScan {
    Volume hu;
    Mask body;
    Mask lung;
};

// Segments and normalises ambient air (valid voxels outside the body) to
// exactly kAirHU, so background texture cannot attract matches.
PreprocessedScan preprocess_scan(const Volume& raw);

} // namespace ctatlas
