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

#include "ctatlas/volume.hpp"

namespace ctatlas {

DisplacementField identity_field(const Geometry& g);

// Pull-back composition on the outer grid:
//   out(x) = outer(x) + inner(x + outer(x))
// so warping with the result equals warping with inner first, then outer.
// inner is sampled trilinearly with border clamp.
DisplacementField compose_fields(const DisplacementField& outer, const DisplacementField& inner);

// Trilinear resampling of a field onto another grid (border clamp).
DisplacementField resample_field(const DisplacementField& f, const Geometry& out_geom);

// out(x) = moving(x + u(x)); the result lives on the field grid. Samples
// leaving the moving grid or touching invalid voxels are invalid.
Volume warp_volume(const Volume& moving, const DisplacementField& field);

// Nearest-neighbour warp for label masks.
Mask warp_mask_nearest(const Mask& m, const DisplacementField& field);

// Warp tolerating partial interpolation support: invalid corners are dropped
// and the remaining weights renormalised, so every voxel whose nearest
// neighbour is valid gets a value. Where warp_volume is valid the two agree
// bit for bit.
Volume warp_volume_partial(const Volume& moving, const DisplacementField& field);

// det(I + Du) at one voxel in double precision, central differences in the
// interior and one-sided at the grid faces. log_jacobian stores the log of
// this value as float.
double jacobian_determinant(const DisplacementField& field, int i, int j, int k);

// log(det(I + Du)) per voxel with central differences (one-sided at the grid
// faces). Determinants below kJacobianFloor clamp to it before the log;
// folded_count, when given, receives the number of voxels with det <= 0.
inline constexpr double kJacobianFloor = 1e-6;
Volume log_jacobian(const DisplacementField& field, std::size_t* folded_count = nullptr);

// Fraction of roi voxels whose unclamped determinant is <= 0.
double folding_fraction(const DisplacementField& field, const Mask& roi);

// Mean Euclidean norm of the displacement over a mask (mm).
double mean_displacement(const DisplacementField& field, const Mask& roi);

} // namespace ctatlas
