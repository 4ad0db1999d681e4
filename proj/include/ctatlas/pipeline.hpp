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

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "ctatlas/affine.hpp"
#include "ctatlas/atlas.hpp"
#include "ctatlas/corrfield.hpp"
#include "ctatlas/qa.hpp"
#include "ctatlas/segmentation.hpp"

namespace ctatlas {

// One cohort scan. Clinical fields stay as the manifest strings; empty means
// unknown and never matches a filter clause.
struct ManifestRow {
    std::string scan_id;
    std::string path;
    std::string sex;
    std::string bmi;
    std::string copd;
    std::string cac;
};

struct Manifest {
    std::vector<ManifestRow> rows;
};

// CSV with the exact header scan_id,path,sex,bmi,copd,cac. Duplicate ids and
// ragged rows are rejected.
Manifest parse_manifest(const std::string& csv_text);
Manifest load_manifest(const std::string& path);

// Conjunctions of comparisons over manifest fields:
//   bmi>=18.5 and bmi<=24.9
//   copd==true
//   cac in (moderate,severe)
// Ordered comparisons need numeric values on both sides; == / != compare
// numerically when both sides parse as numbers, as strings otherwise
// (true/false also accept 1/0). An empty expression matches every row.
class Filter {
public:
    Filter() = default;
    static Filter parse(const std::string& expression);
    bool matches(const ManifestRow& row) const;
    const std::string& text() const { return text_; }

private:
    enum class Op { eq, ne, lt, le, gt, ge, in };
    struct Clause {
        std::string field;
        Op op = Op::eq;
        std::vector<std::string> values; // one entry unless op == in
    };
    std::vector<Clause> clauses_;
    std::string text_;
};

// Everything one moving scan yields against a reference: the affine, the
// total pull-back map (affine folded in), single-interpolation warps of the
// native volume and masks, and the QA verdict.
struct RegistrationResult {
    Affine affine;
    DisplacementField total;
    Volume warped_hu;  // partial-support trilinear warp
    Mask warped_valid; // nearest-neighbour warp of the native validity
    Mask warped_lung;
    Mask warped_body;
    QAReport qa;
    std::vector<StageReport> stage_reports;
};

RegistrationResult register_pair(const std::string& scan_id, const PreprocessedScan& moving,
                                 const PreprocessedScan& reference,
                                 const std::vector<StageConfig>& stages,
                                 const AffineConfig& affine_cfg = {});

// Stable fingerprint of the registration configuration; cache keys and the
// atlas sidecar embed it.
std::string config_hash(const std::vector<StageConfig>& stages, const AffineConfig& affine_cfg);

struct CohortOptions {
    std::vector<StageConfig> stages = default_stage_configs();
    AffineConfig affine;
    std::string cache_dir; // per-scan artifacts reused across runs; empty = off
    int workers = 1;
};

struct AtlasBundle {
    AtlasMoments hu;
    AtlasMoments logjac;
    std::size_t cohort_size = 0; // scans accumulated
    std::string filter_text;
    std::vector<std::pair<std::string, std::string>> failures; // scan_id, reason
    std::string config;                                        // config_hash value
    std::vector<QAReport> qa;                                  // every registered scan
};

// Registers every filtered row against the reference and accumulates the
// warped HU and log-Jacobian maps over each scan's effective region.
// Unreadable or degenerate rows are recorded and skipped; QA failures are
// recorded and excluded from the accumulation. No scan accumulated -> error.
AtlasBundle build_cohort_atlas(const Manifest& manifest, const PreprocessedScan& reference,
                               const Filter& filter, const CohortOptions& opt = {});

// Six NIfTI maps plus a JSON sidecar (cohort size, filter, failures, config
// hash) and the per-scan QA CSV.
void write_atlas_bundle(const std::string& dir, const AtlasBundle& bundle);

struct TuneScore {
    StageConfig config;
    std::array<int, 4> index{}; // list positions: search, dispersion, patch, reg
    std::size_t failures = 0;
    double mean_lung_dsc = 0.0;
};

// Exhaustive sweep of the grid over one stage: every scan in the manifest is
// registered under every combination; ranking is failures ascending, mean
// lung DSC descending, then parameter order. The result always has exactly
// grid.product() entries.
std::vector<TuneScore> grid_search(const Manifest& manifest, const PreprocessedScan& reference,
                                   const std::vector<StageConfig>& base_cfgs,
                                   const SearchGrid& grid, const CohortOptions& opt = {});

std::string tune_csv(const std::vector<TuneScore>& scores);

} // namespace ctatlas
