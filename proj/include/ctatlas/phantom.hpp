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
#include <string>
#include <vector>

#include "ctatlas/volume.hpp"

namespace ctatlas {

struct HuLevels {
    double air = -1000.0;
    double lung = -850.0;
    double fat = -100.0;
    double soft = 40.0;
    double bone = 700.0;
};

// Layered-ellipsoid thorax stand-in: a fat shell around soft tissue, two
// lung ellipsoids, and bone slats spaced around the shell. All lengths are
// mm relative to the body centre, which sits at the grid centre.
struct PhantomSpec {
    std::uint64_t seed = 1;
    Vec3i dims{96, 96, 96};
    Vec3 spacing{2.0, 2.0, 2.0};
    Vec3 body_semiaxes{70.0, 55.0, 85.0};
    Vec3 lung_semiaxes{22.0, 28.0, 38.0};
    Vec3 lung_center_left{-32.0, 0.0, 8.0};
    Vec3 lung_center_right{32.0, 0.0, 8.0};
    double fat_thickness = 12.0; // nominal shell depth
    int rib_count = 10;
    HuLevels hu;
    double fov_crop = 0.0;    // fraction of top z slices marked invalid
    double noise_sigma = 20.0; // HU, set 0 for a noise-free phantom
};

PhantomSpec parse_phantom_spec(const std::string& json_text);
std::string phantom_spec_to_json(const PhantomSpec& spec);

struct SegmentationPair {
    Mask body;
    Mask lung;
};

struct Phantom {
    Volume hu;
    SegmentationPair truth; // analytic masks, unaffected by crop or noise
};

// Deterministic in (spec): layered HU levels at voxel centres, one-voxel
// Gaussian edge smoothing, then i.i.d. Gaussian HU noise from the seed.
// fov_crop invalidates the top slices afterwards. Throws ConfigError on
// violated invariants (HU ordering, lungs not inside the body, bad crop).
Phantom generate_phantom(const PhantomSpec& spec);

// Seeded Gaussian HU noise on valid voxels only; invalid ones keep kAirHU.
Volume add_hu_noise(const Volume& vol, double sigma, std::uint64_t seed);

// Smooth analytic deformation: a small affine part around the domain centre
// plus Gaussian bumps. Closed-form value and gradient make it an oracle for
// warping and Jacobian code.
struct SyntheticDeformation {
    struct Bump {
        Vec3 center;    // mm
        Vec3 amplitude; // mm
        double width;   // mm
    };
    std::vector<Bump> bumps;
    double affine[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}; // gradient part
    Vec3 translation{0, 0, 0};
    Vec3 pivot{0, 0, 0}; // affine part acts on x - pivot

    Vec3 displacement(const Vec3& x) const;
    void gradient(const Vec3& x, double g[3][3]) const; // du_i/dx_j
    double jacobian_det(const Vec3& x) const;           // det(I + grad)
};

struct GeneratedDeformation {
    DisplacementField field; // analytic displacement at voxel centres
    SyntheticDeformation analytic;
};

// Bumps and affine are drawn from the seed, then scaled so the sampled peak
// magnitude reaches max_displacement. Throws ConfigError when that peak
// cannot be reached with every Jacobian provably positive (gradient row sums
// capped at 0.45), or when max_displacement is negative.
GeneratedDeformation generate_deformation(std::uint64_t seed, const Geometry& geom,
                                          double max_displacement);

} // namespace ctatlas
