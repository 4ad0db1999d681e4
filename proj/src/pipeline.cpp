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

#include "ctatlas/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

#include "ctatlas/errors.hpp"
#include "ctatlas/field.hpp"
#include "ctatlas/nifti.hpp"
#include <json.hpp>

namespace fs = std::filesystem;

namespace ctatlas {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

constexpr const char* kManifestHeader = "scan_id,path,sex,bmi,copd,cac";

} // namespace

Manifest parse_manifest(const std::string& csv_text) {
    std::istringstream in(csv_text);
    std::string line;
    if (!std::getline(in, line))
        throw ConfigError("manifest is empty");
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n'))
        line.pop_back();
    if (line != kManifestHeader)
        throw ConfigError(std::string("manifest header must be exactly '") + kManifestHeader +
                          "'");
    Manifest m;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r")
            continue;
        std::vector<std::string> f = split_csv_line(line);
        if (f.size() != 6)
            throw ConfigError("manifest line " + std::to_string(lineno) + ": expected 6 fields, got " +
                              std::to_string(f.size()));
        if (f[0].empty() || f[1].empty())
            throw ConfigError("manifest line " + std::to_string(lineno) +
                              ": scan_id and path must be nonempty");
        for (const ManifestRow& r : m.rows)
            if (r.scan_id == f[0])
                throw ConfigError("manifest: duplicate scan_id '" + f[0] + "'");
        m.rows.push_back({f[0], f[1], f[2], f[3], f[4], f[5]});
    }
    return m;
}

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read manifest '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    Manifest m = parse_manifest(buf.str());
    // Relative scan paths are anchored at the manifest, not the working
    // directory, so cohort directories stay relocatable.
    const fs::path base = fs::path(path).parent_path();
    for (ManifestRow& r : m.rows) {
        const fs::path p(r.path);
        if (p.is_relative() && !base.empty())
            r.path = (base / p).string();
    }
    return m;
}

namespace {

bool parse_number(const std::string& s, double* out) {
    if (s.empty())
        return false;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size())
        return false;
    *out = v;
    return true;
}

std::string fold_token(const std::string& s) {
    std::string t;
    t.reserve(s.size());
    for (char c : s)
        t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (t == "1")
        return "true";
    if (t == "0")
        return "false";
    return t;
}

// Equality used by == / != / in: numeric when both sides are numbers,
// case-folded string (with 1/0 meaning true/false) otherwise.
bool value_equal(const std::string& row_value, const std::string& literal) {
    double a, b;
    if (parse_number(row_value, &a) && parse_number(literal, &b))
        return a == b;
    return fold_token(row_value) == fold_token(literal);
}

struct Cursor {
    const std::string& s;
    std::size_t i = 0;

    void skip_ws() {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i])))
            ++i;
    }
    bool done() const { return i >= s.size(); }
    char peek() const { return i < s.size() ? s[i] : '\0'; }

    std::string ident() {
        std::size_t b = i;
        while (i < s.size() &&
               (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '_'))
            ++i;
        if (i == b)
            throw ConfigError("filter: expected a name at position " + std::to_string(b) +
                              " in '" + s + "'");
        return s.substr(b, i - b);
    }

    std::string value_token() {
        std::size_t b = i;
        while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i])) && s[i] != ',' &&
               s[i] != ')')
            ++i;
        if (i == b)
            throw ConfigError("filter: expected a value at position " + std::to_string(b) +
                              " in '" + s + "'");
        return s.substr(b, i - b);
    }
};

const char* const kManifestFields[6] = {"scan_id", "path", "sex", "bmi", "copd", "cac"};

const std::string& manifest_field(const ManifestRow& row, const std::string& name) {
    if (name == "scan_id") return row.scan_id;
    if (name == "path") return row.path;
    if (name == "sex") return row.sex;
    if (name == "bmi") return row.bmi;
    if (name == "copd") return row.copd;
    return row.cac;
}

} // namespace

Filter Filter::parse(const std::string& expression) {
    Filter f;
    f.text_ = expression;
    Cursor c{expression};
    c.skip_ws();
    while (!c.done()) {
        Clause cl;
        cl.field = c.ident();
        if (std::find_if(std::begin(kManifestFields), std::end(kManifestFields),
                         [&](const char* n) { return cl.field == n; }) ==
            std::end(kManifestFields))
            throw ConfigError("filter: unknown manifest field '" + cl.field + "'");
        c.skip_ws();
        if (std::isalpha(static_cast<unsigned char>(c.peek()))) {
            const std::string word = c.ident();
            if (word != "in")
                throw ConfigError("filter: expected an operator, got '" + word + "'");
            cl.op = Op::in;
            c.skip_ws();
            if (c.peek() != '(')
                throw ConfigError("filter: 'in' needs a parenthesised list");
            ++c.i;
            for (;;) {
                c.skip_ws();
                cl.values.push_back(c.value_token());
                c.skip_ws();
                if (c.peek() == ',') {
                    ++c.i;
                    continue;
                }
                if (c.peek() == ')') {
                    ++c.i;
                    break;
                }
                throw ConfigError("filter: unterminated 'in' list");
            }
        } else {
            const char a = c.peek();
            const char b = c.i + 1 < expression.size() ? expression[c.i + 1] : '\0';
            if (a == '=' && b == '=') cl.op = Op::eq, c.i += 2;
            else if (a == '!' && b == '=') cl.op = Op::ne, c.i += 2;
            else if (a == '<' && b == '=') cl.op = Op::le, c.i += 2;
            else if (a == '>' && b == '=') cl.op = Op::ge, c.i += 2;
            else if (a == '<') cl.op = Op::lt, ++c.i;
            else if (a == '>') cl.op = Op::gt, ++c.i;
            else
                throw ConfigError("filter: expected an operator after '" + cl.field + "'");
            c.skip_ws();
            cl.values.push_back(c.value_token());
            if (cl.op == Op::lt || cl.op == Op::le || cl.op == Op::gt || cl.op == Op::ge) {
                double d;
                if (!parse_number(cl.values[0], &d))
                    throw ConfigError("filter: ordered comparison needs a numeric value, got '" +
                                      cl.values[0] + "'");
            }
        }
        f.clauses_.push_back(std::move(cl));
        c.skip_ws();
        if (c.done())
            break;
        const std::string conj = c.ident();
        if (conj != "and")
            throw ConfigError("filter: clauses join with 'and', got '" + conj + "'");
        c.skip_ws();
        if (c.done())
            throw ConfigError("filter: dangling 'and'");
    }
    return f;
}

bool Filter::matches(const ManifestRow& row) const {
    for (const Clause& cl : clauses_) {
        const std::string& rv = manifest_field(row, cl.field);
        if (rv.empty())
            return false; // unknown clinical value never satisfies a clause
        bool ok = false;
        switch (cl.op) {
        case Op::eq: ok = value_equal(rv, cl.values[0]); break;
        case Op::ne: ok = !value_equal(rv, cl.values[0]); break;
        case Op::in:
            for (const std::string& v : cl.values)
                if (value_equal(rv, v)) {
                    ok = true;
                    break;
                }
            break;
        default: {
            double a, b;
            if (!parse_number(rv, &a) || !parse_number(cl.values[0], &b))
                return false;
            switch (cl.op) {
            case Op::lt: ok = a < b; break;
            case Op::le: ok = a <= b; break;
            case Op::gt: ok = a > b; break;
            case Op::ge: ok = a >= b; break;
            default: break;
            }
        }
        }
        if (!ok)
            return false;
    }
    return true;
}

RegistrationResult register_pair(const std::string& scan_id, const PreprocessedScan& moving,
                                 const PreprocessedScan& reference,
                                 const std::vector<StageConfig>& stages,
                                 const AffineConfig& affine_cfg) {
    RegistrationResult r;
    r.affine = register_affine(reference.hu, reference.body, moving.hu, moving.body, affine_cfg);
    Volume moving_aff = apply_affine(moving.hu, r.affine, reference.hu.geom);
    const DisplacementField residual =
        run_pipeline(moving_aff, reference.hu, stages, &r.stage_reports);
    r.total = compose_affine_field(r.affine, residual);
    r.warped_hu = warp_volume_partial(moving.hu, r.total);
    r.warped_valid = warp_mask_nearest(moving.hu.valid_mask(), r.total);
    r.warped_lung = warp_mask_nearest(moving.lung, r.total);
    r.warped_body = warp_mask_nearest(moving.body, r.total);
    r.qa = evaluate_registration(scan_id, r.warped_lung, r.warped_body, reference.lung,
                                 reference.body, r.total);
    return r;
}

namespace {

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void run_pool(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    const int w = std::max(1, std::min<int>(workers, static_cast<int>(std::min<std::size_t>(
                                                         n, 1024))));
    if (w == 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(w));
    for (int t = 0; t < w; ++t)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n)
                    break;
                fn(i);
            }
        });
    for (std::thread& t : pool)
        t.join();
}

} // namespace

std::string config_hash(const std::vector<StageConfig>& stages, const AffineConfig& affine_cfg) {
    std::string blob = stage_configs_to_json(stages);
    char buf[256];
    std::snprintf(buf, sizeof buf, "|affine:%.17g,%.17g,%d,%d,%.17g,%.17g,%d,%.17g,%d",
                  affine_cfg.window_low, affine_cfg.window_high, affine_cfg.iterations_per_level,
                  affine_cfg.block_size, affine_cfg.min_valid_fraction,
                  affine_cfg.keep_variance_fraction, affine_cfg.search_radius_blocks,
                  affine_cfg.trim_fraction, affine_cfg.trim_rounds);
    blob += buf;
    for (double s : affine_cfg.level_spacings_mm) {
        std::snprintf(buf, sizeof buf, ",%.17g", s);
        blob += buf;
    }
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(blob)));
    return buf;
}

namespace {

// One scan's contribution to the atlas, as cached on disk.
struct ScanArtifacts {
    Volume hu;
    Volume logjac;
    Mask region;
    QAReport qa;
};

Volume mask_to_volume(const Mask& m) {
    Volume v(m.geom, 0.0f, true);
    for (std::size_t i = 0; i < m.data.size(); ++i)
        v.data[i] = m.data[i] ? 1.0f : 0.0f;
    return v;
}

Mask volume_to_mask(const Volume& v) {
    Mask m(v.geom);
    for (std::size_t i = 0; i < v.data.size(); ++i)
        m.data[i] = v.data[i] > 0.5f ? 1 : 0;
    return m;
}

bool load_cached_scan(const fs::path& dir, const Geometry& grid, ScanArtifacts* art,
                      const std::string& scan_id) {
    std::error_code ec;
    if (!fs::exists(dir / ".complete", ec))
        return false;
    try {
        art->hu = read_volume((dir / "warped.nii.gz").string());
        art->logjac = read_volume((dir / "logjac.nii.gz").string());
        art->region = volume_to_mask(read_volume((dir / "coverage.nii.gz").string()));
        if (!art->hu.geom.same_grid(grid) || !art->logjac.geom.same_grid(grid) ||
            !art->region.geom.same_grid(grid))
            return false; // stale cache from another reference
        std::ifstream in(dir / "qa.txt");
        if (!in)
            return false;
        int success = 0;
        if (!(in >> art->qa.lung_dsc >> art->qa.body_dsc >> success >> art->qa.folding_fraction))
            return false;
        art->qa.success = success != 0;
        art->qa.scan_id = scan_id;
        return true;
    } catch (const std::exception&) {
        return false; // unreadable cache entries are recomputed
    }
}

void store_cached_scan(const fs::path& dir, const ScanArtifacts& art) {
    fs::create_directories(dir);
    write_volume((dir / "warped.nii.gz").string(), art.hu);
    write_volume((dir / "logjac.nii.gz").string(), art.logjac);
    write_volume((dir / "coverage.nii.gz").string(), mask_to_volume(art.region));
    {
        std::ofstream out(dir / "qa.txt");
        char buf[160];
        std::snprintf(buf, sizeof buf, "%.17g %.17g %d %.17g\n", art.qa.lung_dsc, art.qa.body_dsc,
                      art.qa.success ? 1 : 0, art.qa.folding_fraction);
        out << buf;
    }
    std::ofstream(dir / ".complete") << "ok\n";
}

} // namespace

AtlasBundle build_cohort_atlas(const Manifest& manifest, const PreprocessedScan& reference,
                               const Filter& filter, const CohortOptions& opt) {
    std::vector<const ManifestRow*> rows;
    for (const ManifestRow& r : manifest.rows)
        if (filter.matches(r))
            rows.push_back(&r);
    if (rows.empty())
        throw EmptySelectionError("filter '" + filter.text() + "' matched no manifest rows");

    const Mask roi = standard_roi(reference.hu.valid_mask(), reference.body);
    const std::string hash = config_hash(opt.stages, opt.affine);

    AtlasBundle bundle;
    bundle.filter_text = filter.text();
    bundle.config = hash;
    bundle.hu = AtlasMoments{};
    AtlasAccumulator acc_hu(reference.hu.geom), acc_lj(reference.hu.geom);

    struct Slot {
        bool has_qa = false;
        QAReport qa;
        std::string failure; // empty = accumulated
    };
    std::vector<Slot> slots(rows.size());
    std::mutex acc_mutex;
    std::atomic<std::size_t> accumulated{0};

    run_pool(rows.size(), opt.workers, [&](std::size_t idx) {
        const ManifestRow& row = *rows[idx];
        Slot& slot = slots[idx];
        try {
            ScanArtifacts art;
            bool cached = false;
            fs::path cache_entry;
            if (!opt.cache_dir.empty()) {
                cache_entry = fs::path(opt.cache_dir) / (row.scan_id + "-" + hash);
                cached = load_cached_scan(cache_entry, reference.hu.geom, &art, row.scan_id);
            }
            if (!cached) {
                const Volume raw = read_volume(row.path);
                const PreprocessedScan scan = preprocess_scan(raw);
                RegistrationResult rr =
                    register_pair(row.scan_id, scan, reference, opt.stages, opt.affine);
                art.hu = std::move(rr.warped_hu);
                art.logjac = log_jacobian(rr.total);
                art.region = effective_region(scan.hu.valid_mask(), rr.total, roi);
                art.qa = rr.qa;
                if (!opt.cache_dir.empty())
                    store_cached_scan(cache_entry, art);
            }
            slot.has_qa = true;
            slot.qa = art.qa;
            if (!art.qa.success) {
                char buf[96];
                std::snprintf(buf, sizeof buf, "qa failure: lung=%.4f body=%.4f",
                              art.qa.lung_dsc, art.qa.body_dsc);
                slot.failure = buf;
                return;
            }
            // Integer accumulators commute exactly, so the lock order cannot
            // change a single bit of the result.
            std::lock_guard<std::mutex> lock(acc_mutex);
            accumulate(acc_hu, art.hu, art.region);
            accumulate(acc_lj, art.logjac, art.region);
            accumulated.fetch_add(1);
        } catch (const std::exception& e) {
            slot.failure = std::string("error: ") + e.what();
        }
    });

    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (slots[i].has_qa)
            bundle.qa.push_back(slots[i].qa);
        if (!slots[i].failure.empty())
            bundle.failures.emplace_back(rows[i]->scan_id, slots[i].failure);
    }
    bundle.cohort_size = accumulated.load();
    if (bundle.cohort_size == 0)
        throw EmptySelectionError("no scan in the filtered cohort passed registration QA");
    bundle.hu = finalize(acc_hu);
    bundle.logjac = finalize(acc_lj);
    return bundle;
}

void write_atlas_bundle(const std::string& dir, const AtlasBundle& bundle) {
    fs::create_directories(dir);
    const fs::path d(dir);
    write_volume((d / "hu_mean.nii.gz").string(), bundle.hu.mean);
    write_volume((d / "hu_variance.nii.gz").string(), bundle.hu.variance);
    write_volume((d / "hu_count.nii.gz").string(), bundle.hu.count);
    write_volume((d / "logjac_mean.nii.gz").string(), bundle.logjac.mean);
    write_volume((d / "logjac_variance.nii.gz").string(), bundle.logjac.variance);
    write_volume((d / "logjac_count.nii.gz").string(), bundle.logjac.count);

    nlohmann::json sidecar;
    sidecar["cohort_size"] = bundle.cohort_size;
    sidecar["filter"] = bundle.filter_text;
    sidecar["config_hash"] = bundle.config;
    nlohmann::json fails = nlohmann::json::array();
    for (const auto& [id, reason] : bundle.failures)
        fails.push_back({{"scan_id", id}, {"reason", reason}});
    sidecar["failures"] = std::move(fails);
    std::ofstream out(d / "atlas.json", std::ios::binary);
    if (!out)
        throw IoError("cannot write atlas sidecar in '" + dir + "'");
    out << sidecar.dump(2) << "\n";

    std::ofstream qa(d / "qa.csv", std::ios::binary);
    if (!qa)
        throw IoError("cannot write qa.csv in '" + dir + "'");
    qa << qa_csv(bundle.qa);
}

std::vector<TuneScore> grid_search(const Manifest& manifest, const PreprocessedScan& reference,
                                   const std::vector<StageConfig>& base_cfgs,
                                   const SearchGrid& grid, const CohortOptions& opt) {
    if (manifest.rows.empty())
        throw EmptySelectionError("grid search needs a nonempty tuning manifest");
    if (grid.search_radius.empty() || grid.dispersion.empty() || grid.patch_radius.empty() ||
        grid.regularization.empty())
        throw ConfigError("grid search: every parameter list must be nonempty");
    if (grid.stage < 0 || grid.stage >= static_cast<int>(base_cfgs.size()))
        throw ConfigError("grid search: stage index out of range");

    // Materialise every combination up front so invalid ones fail before any
    // registration runs.
    std::vector<TuneScore> scores;
    scores.reserve(grid.product());
    for (std::size_t si = 0; si < grid.search_radius.size(); ++si)
        for (std::size_t di = 0; di < grid.dispersion.size(); ++di)
            for (std::size_t pi = 0; pi < grid.patch_radius.size(); ++pi)
                for (std::size_t ri = 0; ri < grid.regularization.size(); ++ri) {
                    StageConfig cfg = base_cfgs[static_cast<std::size_t>(grid.stage)];
                    cfg.search_xy = grid.search_radius[si][0];
                    cfg.search_z = grid.search_radius[si][1];
                    cfg.dispersion_xy = grid.dispersion[di][0];
                    cfg.dispersion_z = grid.dispersion[di][1];
                    cfg.patch_xy = grid.patch_radius[pi][0];
                    cfg.patch_z = grid.patch_radius[pi][1];
                    cfg.regularization = grid.regularization[ri];
                    cfg.quant_xy = default_quantization(cfg.search_xy);
                    cfg.quant_z = default_quantization(cfg.search_z);
                    if (cfg.search_xy < cfg.dispersion_xy || cfg.search_z < cfg.dispersion_z)
                        throw ConfigError(
                            "grid search: search radius must cover the keypoint dispersion");
                    TuneScore t;
                    t.config = cfg;
                    t.index = {static_cast<int>(si), static_cast<int>(di), static_cast<int>(pi),
                               static_cast<int>(ri)};
                    scores.push_back(t);
                }

    std::vector<PreprocessedScan> scans;
    scans.reserve(manifest.rows.size());
    for (const ManifestRow& row : manifest.rows)
        scans.push_back(preprocess_scan(read_volume(row.path)));

    run_pool(scores.size(), opt.workers, [&](std::size_t ci) {
        TuneScore& t = scores[ci];
        std::vector<StageConfig> stages = base_cfgs;
        stages[static_cast<std::size_t>(grid.stage)] = t.config;
        double dsc_sum = 0.0;
        for (std::size_t s = 0; s < scans.size(); ++s) {
            try {
                RegistrationResult rr = register_pair(manifest.rows[s].scan_id, scans[s],
                                                      reference, stages, opt.affine);
                if (!rr.qa.success)
                    ++t.failures;
                dsc_sum += rr.qa.lung_dsc;
            } catch (const std::exception&) {
                // A configuration that cannot register a scan scores it as a
                // failure with zero overlap.
                ++t.failures;
            }
        }
        t.mean_lung_dsc = dsc_sum / static_cast<double>(scans.size());
    });

    std::stable_sort(scores.begin(), scores.end(), [](const TuneScore& a, const TuneScore& b) {
        if (a.failures != b.failures)
            return a.failures < b.failures;
        if (a.mean_lung_dsc != b.mean_lung_dsc)
            return a.mean_lung_dsc > b.mean_lung_dsc;
        return a.index < b.index;
    });
    return scores;
}

std::string tune_csv(const std::vector<TuneScore>& scores) {
    std::string out = "# configurations: " + std::to_string(scores.size()) + "\n";
    out += "rank,search_xy,search_z,dispersion_xy,dispersion_z,patch_xy,patch_z,"
           "regularization,quantization_xy,quantization_z,failures,mean_lung_dsc\n";
    char line[256];
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const StageConfig& c = scores[i].config;
        std::snprintf(line, sizeof line, "%zu,%d,%d,%d,%d,%d,%d,%.6g,%d,%d,%zu,%.6f\n", i + 1,
                      c.search_xy, c.search_z, c.dispersion_xy, c.dispersion_z, c.patch_xy,
                      c.patch_z, c.regularization, c.quant_xy, c.quant_z, scores[i].failures,
                      scores[i].mean_lung_dsc);
        out += line;
    }
    return out;
}

} // namespace ctatlas
