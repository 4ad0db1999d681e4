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

// Separable Gaussian on the raw data array (validity is copied through
// unchanged; invalid voxels contribute their imputed value). Sigma is in
// voxels of the input grid; taps reach ceil(3*sigma) and are renormalised at
// the borders. Axes with sigma <= 0 are left untouched.
Volume gaussian_smooth(const Volume& in, const Vec3& sigma_vox);

// Same filter over a bare scalar array laid out like a volume.
void gaussian_smooth_buffer(std::vector<float>& data, const Vec3i& dims, const Vec3& sigma_vox);

// Resamples onto a grid with the requested spacing covering the same extent:
//   dims_out = ceil(dims_in * spacing_in / spacing_out)
//   origin_out = origin_in - spacing_in/2 + spacing_out/2
// Downsampling applies an anti-alias presmooth of 0.5*(ratio-1) input voxels
// per axis first. Samples falling outside the input grid or touching invalid
// voxels come back invalid.
Volume resample_to_spacing(const Volume& in, const Vec3& out_spacing);

// Geometry produced by resample_to_spacing without touching the data.
Geometry resampled_geometry(const Geometry& in, const Vec3& out_spacing);

// Nearest-neighbour mask resampling onto an arbitrary grid.
Mask resample_mask_nearest(const Mask& in, const Geometry& out_geom);

} // namespace ctatlas
