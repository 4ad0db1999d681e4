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

// World-to-world affine map y = A x + t (reference space into moving space).
struct Affine {
    double A[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    Vec3 t{0, 0, 0};

    static Affine identity() { return {}; }
    Vec3 apply(const Vec3& x) const {
        return {A[0][0] * x.x + A[0][1] * x.y + A[0][2] * x.z + t.x,
                A[1][0] * x.x + A[1][1] * x.y + A[1][2] * x.z + t.y,
                A[2][0] * x.x + A[2][1] * x.y + A[2][2] * x.z + t.z};
    }
    Affine inverse() const; // GeometryError when singular
};

// Plain-text 4x4 row-major matrix, 16 ASCII floats, four per line; the last
// row is 0 0 0 1.
Affine read_affine(const std::string& path);
void write_affine(const std::string& path, const Affine& a);

// Displacement equivalent on a grid: u(x) = A x + t - x.
DisplacementField affine_to_field(const Affine& a, const Geometry& g);

// Exact composition of an affine with a displacement field on the field's
// grid: out(x) = a(x + u(x)) - x. Warping with the result samples the native
// moving image once instead of resampling through the affine grid first.
DisplacementField compose_affine_field(const Affine& a, const DisplacementField& u);

struct AffineConfig {
    double window_low = 0.0, window_high = 1000.0; // HU clip before matching
    std::vector<double> level_spacings_mm{4.0, 2.0};
    int iterations_per_level = 5;
    int block_size = 4;               // voxels per side
    double min_valid_fraction = 0.5;
    double keep_variance_fraction = 0.25;
    int search_radius_blocks = 3;     // search range = blocks * block_size voxels
    double trim_fraction = 0.5;       // correspondences kept by the trimmed fit
    int trim_rounds = 3;
};

// Values clamped into [low, high]; validity untouched.
Volume window_clip(const Volume& vol, double low, double high);

// Resample through an affine: out(x) = vol(t(x)) on ref_geom, trilinear with
// validity by the corner rule; nearest-neighbour variant for masks.
Volume apply_affine(const Volume& vol, const Affine& t, const Geometry& ref_geom);
Mask apply_affine_mask(const Mask& m, const Affine& t, const Geometry& ref_geom);

// Block-matching affine alignment on window-clipped intensities, restricted
// to the reference's valid body region. Throws DegenerateInputError when
// fewer than 12 block correspondences survive.
Affine register_affine(const Volume& reference, const Mask& reference_body, const Volume& moving,
                       const Mask& moving_body, const AffineConfig& cfg = {});

} // namespace ctatlas
