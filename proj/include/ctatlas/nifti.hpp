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

#include <string>

#include "ctatlas/volume.hpp"

namespace ctatlas {

// NIfTI-1 single-file volumes (.nii, .nii.gz detected by magic bytes).
//
// Reading accepts int16 and float32 data. int16 voxels equal to -32768 and
// non-finite float voxels are invalid; everything else goes through
// scl_slope/scl_inter (slope 0 reads as 1). Grids must be axis-aligned;
// permuted or flipped axes are reindexed into canonical +x/+y/+z order,
// oblique rotations are rejected.
Volume read_volume(const std::string& path);

// Writes float32 with a diagonal sform; invalid voxels are stored as NaN so
// that validity survives a round trip. A ".gz" suffix enables compression.
void write_volume(const std::string& path, const Volume& vol);

// Dense displacement fields as 5-D NIfTI (dim = [5, nx, ny, nz, 1, 3],
// intent code 1007) holding the three world-mm components as float32
// sub-volumes.
DisplacementField read_field(const std::string& path);
void write_field(const std::string& path, const DisplacementField& field);

} // namespace ctatlas
