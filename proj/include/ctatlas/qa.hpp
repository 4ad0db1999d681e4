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
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "ctatlas/volume.hpp"

namespace ctatlas {

// A registration counts as usable when both masks land at least this well
// on the reference. Comparisons are inclusive.
inline constexpr double kLungDiceThreshold = 0.92;
inline constexpr double kBodyDiceThreshold = 0.975;

struct QAReport {
    std::string scan_id;
    double lung_dsc = 0.0;
    double body_dsc = 0.0;
    bool success = false;
    double folding_fraction = 0.0;
};

// 2|a n b| / (|a| + |b|); two empty masks agree perfectly (1.0).
double dice(const Mask& a, const Mask& b);

// DSC of both warped masks against the reference masks, pass/fail against
// the thresholds above, and the fraction of reference-body voxels whose
// Jacobian determinant is non-positive.
QAReport evaluate_registration(const std::string& scan_id, const Mask& warped_lung,
                               const Mask& warped_body, const Mask& ref_lung,
                               const Mask& ref_body, const DisplacementField& field);

// header scan_id,lung_dsc,body_dsc,success,folding_fraction
// floats with four decimals, success as 0/1, one row per report.
std::string qa_csv(const std::vector<QAReport>& reports);

struct GroupStats {
    std::string label;
    std::size_t total = 0;
    std::size_t successes = 0;
    std::string percent; // one decimal, round half up, e.g. "91.7%"
};

struct CohortSummary {
    GroupStats overall;
    std::vector<GroupStats> groups; // sorted by label
};

std::string format_success_percent(std::size_t successes, std::size_t total);

// Success rates overall and per subgroup (scan_id -> label; unmapped scans
// count toward the overall row only). Throws EmptySelectionError on an
// empty report list.
CohortSummary cohort_report(const std::vector<QAReport>& reports,
                            const std::map<std::string, std::string>& subgroup_of = {});

// Candidate values swept over one stage; every combination is evaluated.
struct SearchGrid {
    std::vector<std::array<int, 2>> search_radius; // (in-plane, through-plane) voxels
    std::vector<std::array<int, 2>> dispersion;
    std::vector<std::array<int, 2>> patch_radius;
    std::vector<double> regularization;
    int stage = 0;

    std::size_t product() const {
        return search_radius.size() * dispersion.size() * patch_radius.size() *
               regularization.size();
    }
};

// Strict JSON: the four parameter arrays (pairs for the spatial ones) plus
// the "stage" index. Unknown keys and empty lists are rejected.
SearchGrid parse_search_grid(const std::string& json_text);
std::string search_grid_to_json(const SearchGrid& grid);

} // namespace ctatlas
