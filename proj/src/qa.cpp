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

#include "ctatlas/qa.hpp"

#include <cstdio>

#include "ctatlas/errors.hpp"
#include "ctatlas/field.hpp"
#include <json.hpp>

namespace ctatlas {

double dice(const Mask& a, const Mask& b) {
    if (!a.geom.same_grid(b.geom))
        throw GeometryError("dice: masks on different grids");
    std::size_t na = 0, nb = 0, ni = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        na += a.data[i];
        nb += b.data[i];
        ni += static_cast<std::size_t>(a.data[i] && b.data[i]);
    }
    if (na + nb == 0)
        return 1.0;
    return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

QAReport evaluate_registration(const std::string& scan_id, const Mask& warped_lung,
                               const Mask& warped_body, const Mask& ref_lung,
                               const Mask& ref_body, const DisplacementField& field) {
    QAReport r;
    r.scan_id = scan_id;
    r.lung_dsc = dice(warped_lung, ref_lung);
    r.body_dsc = dice(warped_body, ref_body);
    r.success = r.lung_dsc >= kLungDiceThreshold && r.body_dsc >= kBodyDiceThreshold;
    r.folding_fraction = folding_fraction(field, ref_body);
    return r;
}

std::string qa_csv(const std::vector<QAReport>& reports) {
    std::string out = "scan_id,lung_dsc,body_dsc,success,folding_fraction\n";
    char line[256];
    for (const QAReport& r : reports) {
        std::snprintf(line, sizeof line, ",%.4f,%.4f,%d,%.4f\n", r.lung_dsc, r.body_dsc,
                      r.success ? 1 : 0, r.folding_fraction);
        out += r.scan_id;
        out += line;
    }
    return out;
}

std::string format_success_percent(std::size_t successes, std::size_t total) {
    if (total == 0)
        throw EmptySelectionError("success percentage of an empty set");
    // Tenths of a percent, half rounds up; integer arithmetic keeps the
    // boundary cases exact.
    const unsigned long long tenths = (2000ull * successes + total) / (2ull * total);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%llu.%llu%%", tenths / 10, tenths % 10);
    return buf;
}

namespace {

GroupStats close_group(std::string label, std::size_t total, std::size_t successes) {
    GroupStats g;
    g.label = std::move(label);
    g.total = total;
    g.successes = successes;
    g.percent = format_success_percent(successes, total);
    return g;
}

} // namespace

CohortSummary cohort_report(const std::vector<QAReport>& reports,
                            const std::map<std::string, std::string>& subgroup_of) {
    if (reports.empty())
        throw EmptySelectionError("cohort report over an empty report list");
    CohortSummary s;
    std::size_t ok = 0;
    std::map<std::string, std::pair<std::size_t, std::size_t>> groups; // total, successes
    for (const QAReport& r : reports) {
        ok += static_cast<std::size_t>(r.success);
        auto it = subgroup_of.find(r.scan_id);
        if (it != subgroup_of.end()) {
            auto& g = groups[it->second];
            g.first += 1;
            g.second += static_cast<std::size_t>(r.success);
        }
    }
    s.overall = close_group("all", reports.size(), ok);
    for (const auto& [label, counts] : groups)
        s.groups.push_back(close_group(label, counts.first, counts.second));
    return s;
}

namespace {

using nlohmann::json;

std::vector<std::array<int, 2>> require_pair_list(const json& v, const char* key) {
    if (!v.is_array() || v.empty())
        throw ConfigError(std::string("grid key '") + key + "' must be a nonempty array");
    std::vector<std::array<int, 2>> out;
    out.reserve(v.size());
    for (const json& e : v) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() ||
            !e[1].is_number_integer())
            throw ConfigError(std::string("grid key '") + key +
                              "' entries must be [in-plane, through-plane] integer pairs");
        const long long a = e[0].get<long long>(), b = e[1].get<long long>();
        if (a < 1 || b < 1 || a > 100000 || b > 100000)
            throw ConfigError(std::string("grid key '") + key + "' entry out of range");
        out.push_back({static_cast<int>(a), static_cast<int>(b)});
    }
    return out;
}

} // namespace

SearchGrid parse_search_grid(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("invalid JSON: ") + e.what());
    }
    if (!doc.is_object())
        throw ConfigError("grid spec must be a JSON object");
    SearchGrid grid;
    bool have_stage = false;
    for (const auto& item : doc.items()) {
        const std::string& key = item.key();
        const json& v = item.value();
        if (key == "search_radius") {
            grid.search_radius = require_pair_list(v, "search_radius");
        } else if (key == "dispersion") {
            grid.dispersion = require_pair_list(v, "dispersion");
        } else if (key == "patch_radius") {
            grid.patch_radius = require_pair_list(v, "patch_radius");
        } else if (key == "regularization") {
            if (!v.is_array() || v.empty())
                throw ConfigError("grid key 'regularization' must be a nonempty array");
            for (const json& e : v) {
                if (!e.is_number() || e.get<double>() < 0.0)
                    throw ConfigError("grid key 'regularization' entries must be >= 0");
                grid.regularization.push_back(e.get<double>());
            }
        } else if (key == "stage") {
            if (!v.is_number_integer() || v.get<long long>() < 0)
                throw ConfigError("grid key 'stage' must be a non-negative integer");
            grid.stage = static_cast<int>(v.get<long long>());
            have_stage = true;
        } else {
            throw ConfigError("unknown grid key '" + key + "'");
        }
    }
    if (grid.search_radius.empty() || grid.dispersion.empty() || grid.patch_radius.empty() ||
        grid.regularization.empty() || !have_stage)
        throw ConfigError(
            "grid spec needs search_radius, dispersion, patch_radius, regularization and stage");
    return grid;
}

std::string search_grid_to_json(const SearchGrid& grid) {
    json doc;
    auto pairs = [](const std::vector<std::array<int, 2>>& v) {
        json arr = json::array();
        for (const auto& p : v)
            arr.push_back({p[0], p[1]});
        return arr;
    };
    doc["search_radius"] = pairs(grid.search_radius);
    doc["dispersion"] = pairs(grid.dispersion);
    doc["patch_radius"] = pairs(grid.patch_radius);
    doc["regularization"] = grid.regularization;
    doc["stage"] = grid.stage;
    return doc.dump(2);
}

} // namespace ctatlas
