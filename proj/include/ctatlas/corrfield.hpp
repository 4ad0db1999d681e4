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

#include "ctatlas/field.hpp"
#include "ctatlas/kernels.hpp"
#include "ctatlas/volume.hpp"

namespace ctatlas {

// One registration stage: keypoint correspondence search at a working
// resolution, discrete displacement optimisation over an MST, symmetry
// filtering and Gaussian densification. Radii are voxels of the working grid;
// the *_xy members apply to both in-plane axes.
struct StageConfig {
    double resolution_mm = 2.0;
    int search_xy = 60, search_z = 30;       // half-width of the candidate range
    int dispersion_xy = 8, dispersion_z = 4; // keypoint lattice spacing
    int patch_xy = 6, patch_z = 4;           // descriptor patch half-width
    double regularization = 1.0;             // lambda of the pairwise term
    int quant_xy = 7, quant_z = 3;           // candidate step, fixed per stage
};

// Coarse-to-fine defaults; indices past the last stage reuse it.
StageConfig default_stage_config(int index);
std::vector<StageConfig> default_stage_configs();

// Candidate step derived from a search radius: max(1, radius / 8).
int default_quantization(int search_radius);

// Stage list from a JSON document: either an array of stage objects or an
// object with a "stages" array. Every key is optional and falls back to the
// positional default; "quantization" additionally accepts 0 for "derive from
// the (possibly overridden) search radius". Throws ConfigError on anything
// malformed or out of range.
std::vector<StageConfig> parse_stage_configs(const std::string& json_text);
std::string stage_configs_to_json(const std::vector<StageConfig>& stages);

// Sparse correspondences on a stage grid. consistency_error holds the
// forward-backward residual (mm) once the symmetry filter has run.
struct KeypointSet {
    std::vector<Vec3i> positions;
    std::vector<Vec3> displacements;
    std::vector<double> consistency_error;

    std::size_t size() const { return positions.size(); }
};

// Axis-aligned keypoint lattice phase-centred in the mask bounding box.
// Off-mask nodes snap to the nearest mask voxel within half a spacing per
// axis (ties: smaller z, then y, then x offset) and duplicates collapse to
// the first occurrence; nodes with no mask voxel in reach are dropped.
KeypointSet sample_keypoints(const Mask& mask, int dispersion_xy, int dispersion_z);

// Six-channel self-similarity descriptor: per unit offset (+x,-x,+y,-y,+z,-z)
// the squared difference to the shifted volume (clamp-to-edge), smoothed with
// a sigma=1 voxel Gaussian, normalised by the channel mean plus
// 1e-6*range^2, then mapped through exp(-c) into (0,1]. Constant
// neighbourhoods give exactly 1 in every channel.
struct DescriptorField {
    static constexpr int kChannels = 6;
    Geometry geom;
    std::vector<float> data; // kChannels per voxel, channel-interleaved

    const float* at(std::size_t voxel) const { return &data[voxel * kChannels]; }
};

DescriptorField ssc_descriptors(const Volume& vol);

// Stamps every invalid voxel's channels with the sentinel. Matching a
// sentinel against anything from the other image (sentinels are +3 for the
// fixed role and -3 for the moving role) saturates the per-channel distance
// clamp of 1, which is exactly the cost of an unusable voxel.
void apply_validity_sentinel(DescriptorField& d, const std::vector<std::uint8_t>& valid,
                             float sentinel);

inline constexpr float kFixedSentinel = 3.0f;
inline constexpr float kMovingSentinel = -3.0f;

// Quantised displacement candidates: voxel offsets (ix*step.x, iy*step.y,
// iz*step.z) for |ix|,|iy|,|iz| within half, x fastest in linear order.
struct CandidateSet {
    Vec3i half{0, 0, 0};
    Vec3i step{1, 1, 1};
    Vec3 step_mm{0, 0, 0};

    int count_x() const { return 2 * half.x + 1; }
    int count_y() const { return 2 * half.y + 1; }
    int count_z() const { return 2 * half.z + 1; }
    int count() const { return count_x() * count_y() * count_z(); }

    Vec3i offset(int linear) const {
        const int cx = count_x(), cy = count_y();
        const int ix = linear % cx - half.x;
        const int iy = (linear / cx) % cy - half.y;
        const int iz = linear / (cx * cy) - half.z;
        return {ix * step.x, iy * step.y, iz * step.z};
    }
    Vec3 offset_mm(int linear) const {
        const Vec3i o = offset(linear);
        return {o.x * step_mm.x / step.x, o.y * step_mm.y / step.y, o.z * step_mm.z / step.z};
    }
};

CandidateSet make_candidate_set(int search_xy, int search_z, int quant_xy, int quant_z,
                                const Vec3& spacing);

// Dense keypoint-by-candidate cost table (row-major, candidates fastest):
// mean absolute descriptor difference over the patch, per-voxel contributions
// clamped to 1, with off-grid patch voxels on either side costing exactly 1.
// Patches sample x densely and thin y/z to five offsets per axis once the
// radius exceeds 2. Pass a kernel table to pin the arithmetic (tests use the
// scalar table); null means the fastest available.
std::vector<float> unary_costs(const DescriptorField& fixed_desc, const DescriptorField& mov_desc,
                               const KeypointSet& kps, const CandidateSet& cands, int patch_xy,
                               int patch_z, const kernels::KernelTable* kern = nullptr);

// Offsets actually visited per patch axis (exposed for oracle tests).
std::vector<int> patch_axis_offsets(int radius);

// Exact minimiser of
//   sum_k cost(k, d_k) + lambda * sum_{(k,j) in T} |d_k - d_j|^2 / |x_k - x_j|
// over the minimum spanning forest T of the 8-nearest-neighbour graph
// (edge weights: Euclidean mm; ties broken towards smaller vertex indices).
// The component containing the keypoint nearest root_hint_mm is rooted
// there; other components root at their lowest index.
struct SolveResult {
    std::vector<int> assignment; // candidate index per keypoint

    struct Edge {
        int u, v;
        double length_mm;
    };
    std::vector<Edge> forest;
    double objective = 0.0;
};

SolveResult mst_regularize(const KeypointSet& kps, const Geometry& grid,
                           const std::vector<float>& costs, const CandidateSet& cands,
                           double lambda, const Vec3& root_hint_mm);

// Gaussian scatter of keypoint displacements onto the full grid: each voxel
// averages its 10 nearest keypoints with weights exp(-r^2 / 2 sigma^2).
// When every weight underflows the nearest keypoint wins outright. Throws
// DegenerateInputError on an empty keypoint set.
DisplacementField densify(const KeypointSet& kps, const Geometry& grid, double sigma_mm);

// Keeps keypoints whose forward displacement, chased through the dense
// backward field, lands within threshold_mm of where it started; survivors
// carry the residual in consistency_error.
KeypointSet symmetry_filter(const KeypointSet& fwd, const Geometry& grid,
                            const DisplacementField& backward_dense, double threshold_mm);

// Per-sub-stage accounting; degraded marks a sub-stage that produced no
// usable correspondences and contributed an identity increment.
struct StageReport {
    int stage = 0;
    int sub_stage = 0; // 0: full radius, 1: halved
    std::size_t keypoints = 0;
    std::size_t kept = 0;
    bool degraded = false;
    std::string note;
};

// One stage: both volumes are brought to the working resolution, matched at
// the full search radius, the moving volume is re-warped, and the match
// repeats at half the radius (same quantisation). Returns the composition of
// both increments on the working grid.
DisplacementField run_stage(const Volume& moving, const Volume& reference, const StageConfig& cfg,
                            int stage_index, std::vector<StageReport>* reports = nullptr);

// Full coarse-to-fine pipeline. The running total lives on the finest stage
// grid; each stage warps the original moving volume by the total resampled
// to the moving grid, then folds its increment into the total. An empty
// stage list yields the identity on the reference grid.
DisplacementField run_pipeline(const Volume& moving, const Volume& reference,
                               const std::vector<StageConfig>& stages,
                               std::vector<StageReport>* reports = nullptr);

} // namespace ctatlas
