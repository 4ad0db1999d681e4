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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctatlas/errors.hpp"
#include "ctatlas/field.hpp"
#include "ctatlas/nifti.hpp"
#include "ctatlas/phantom.hpp"
#include "ctatlas/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ctatlas;

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write '" + path + "'");
    out << text;
}

std::vector<StageConfig> load_stages(const std::string& config_path) {
    if (config_path.empty())
        return default_stage_configs();
    return parse_stage_configs(read_text_file(config_path));
}

Volume mask_as_volume(const Mask& m) {
    Volume v(m.geom, 0.0f, true);
    for (std::size_t i = 0; i < m.data.size(); ++i)
        v.data[i] = m.data[i] ? 1.0f : 0.0f;
    return v;
}

// Mid-axial slice as a binary PGM, display window only; the NIfTI payloads
// stay untouched.
void write_montage_pgm(const std::string& path, const Volume& vol, double lo, double hi) {
    const Geometry& g = vol.geom;
    const int k = g.dims.z / 2;
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write '" + path + "'");
    out << "P5\n" << g.dims.x << " " << g.dims.y << "\n255\n";
    for (int j = 0; j < g.dims.y; ++j)
        for (int i = 0; i < g.dims.x; ++i) {
            unsigned char px = 0;
            if (vol.is_valid(i, j, k)) {
                double t = (vol.at(i, j, k) - lo) / (hi - lo);
                t = std::clamp(t, 0.0, 1.0);
                px = static_cast<unsigned char>(std::lround(t * 255.0));
            }
            out.put(static_cast<char>(px));
        }
}

struct WindowOpt {
    double lo = 0.0, hi = 0.0;
    bool set = false;
};

void add_window_flag(CLI::App* cmd, WindowOpt* w, const std::string& help) {
    cmd->add_option_function<std::string>(
        "--window",
        [w](const std::string& s) {
            if (std::sscanf(s.c_str(), "%lf,%lf", &w->lo, &w->hi) != 2 || !(w->lo < w->hi))
                throw CLI::ValidationError("--window expects LOW,HIGH with LOW < HIGH");
            w->set = true;
        },
        help);
}

void cmd_preprocess(const std::string& in, const std::string& out_dir) {
    const PreprocessedScan scan = preprocess_scan(read_volume(in));
    fs::create_directories(out_dir);
    const fs::path d(out_dir);
    write_volume((d / "hu.nii.gz").string(), scan.hu);
    write_volume((d / "body.nii.gz").string(), mask_as_volume(scan.body));
    write_volume((d / "lung.nii.gz").string(), mask_as_volume(scan.lung));
}

void cmd_register(const std::string& moving_path, const std::string& reference_path,
                  const std::string& out_dir, const std::string& config_path,
                  const WindowOpt& window) {
    const std::vector<StageConfig> stages = load_stages(config_path);
    AffineConfig affine_cfg;
    if (window.set) {
        affine_cfg.window_low = window.lo;
        affine_cfg.window_high = window.hi;
    }
    const PreprocessedScan moving = preprocess_scan(read_volume(moving_path));
    const PreprocessedScan reference = preprocess_scan(read_volume(reference_path));
    const std::string scan_id = fs::path(moving_path).stem().stem().string();
    RegistrationResult rr = register_pair(scan_id, moving, reference, stages, affine_cfg);

    fs::create_directories(out_dir);
    const fs::path d(out_dir);
    write_affine((d / "affine.txt").string(), rr.affine);
    write_field((d / "field.nii.gz").string(), rr.total);
    write_volume((d / "warped.nii.gz").string(), rr.warped_hu);
    write_volume((d / "warped_body.nii.gz").string(), mask_as_volume(rr.warped_body));
    write_volume((d / "warped_lung.nii.gz").string(), mask_as_volume(rr.warped_lung));
    write_text_file((d / "qa.csv").string(), qa_csv({rr.qa}));
}

void cmd_atlas(const std::string& manifest_path, const std::string& reference_path,
               const std::string& out_dir, const std::string& filter_expr,
               const std::string& config_path, int workers, const WindowOpt& window) {
    const Manifest manifest = load_manifest(manifest_path);
    const Filter filter = Filter::parse(filter_expr);
    CohortOptions opt;
    opt.stages = load_stages(config_path);
    if (window.set) {
        opt.affine.window_low = window.lo;
        opt.affine.window_high = window.hi;
    }
    opt.workers = workers;
    opt.cache_dir = (fs::path(out_dir) / "cache").string();
    fs::create_directories(opt.cache_dir);
    const PreprocessedScan reference = preprocess_scan(read_volume(reference_path));
    const AtlasBundle bundle = build_cohort_atlas(manifest, reference, filter, opt);
    write_atlas_bundle(out_dir, bundle);
    std::printf("atlas: %zu scan(s) accumulated, %zu failure(s)\n", bundle.cohort_size,
                bundle.failures.size());
}

void cmd_diff(const std::string& dir_a, const std::string& dir_b, const std::string& out_dir,
              const WindowOpt& window) {
    const fs::path a(dir_a), b(dir_b), d(out_dir);
    const Volume hu_a = read_volume((a / "hu_mean.nii.gz").string());
    const Volume hu_b = read_volume((b / "hu_mean.nii.gz").string());
    const Volume lj_a = read_volume((a / "logjac_mean.nii.gz").string());
    const Volume lj_b = read_volume((b / "logjac_mean.nii.gz").string());
    const Volume hu_diff = atlas_diff(hu_a, hu_b);
    const Volume lj_diff = atlas_diff(lj_a, lj_b);
    fs::create_directories(out_dir);
    write_volume((d / "hu_mean_diff.nii.gz").string(), hu_diff);
    write_volume((d / "logjac_mean_diff.nii.gz").string(), lj_diff);
    const double lo = window.set ? window.lo : -900.0;
    const double hi = window.set ? window.hi : -700.0;
    write_montage_pgm((d / "a_hu_mean.pgm").string(), hu_a, lo, hi);
    write_montage_pgm((d / "b_hu_mean.pgm").string(), hu_b, lo, hi);
    const double span = std::max(1e-6, 0.5 * (hi - lo));
    write_montage_pgm((d / "hu_mean_diff.pgm").string(), hu_diff, -span, span);
}

void cmd_tune(const std::string& manifest_path, const std::string& reference_path,
              const std::string& grid_path, const std::string& out_csv,
              const std::string& config_path, int workers) {
    const Manifest manifest = load_manifest(manifest_path);
    const SearchGrid grid = parse_search_grid(read_text_file(grid_path));
    const std::vector<StageConfig> base = load_stages(config_path);
    CohortOptions opt;
    opt.workers = workers;
    const PreprocessedScan reference = preprocess_scan(read_volume(reference_path));
    const std::vector<TuneScore> scores = grid_search(manifest, reference, base, grid, opt);
    if (!out_csv.empty() && fs::path(out_csv).has_parent_path())
        fs::create_directories(fs::path(out_csv).parent_path());
    write_text_file(out_csv, tune_csv(scores));
}

void cmd_phantom(const std::string& spec_path, const std::string& out_dir, int count,
                 long long seed_flag, double deform_mm) {
    PhantomSpec spec =
        spec_path.empty() ? PhantomSpec{} : parse_phantom_spec(read_text_file(spec_path));
    if (count < 1)
        throw ConfigError("phantom: --count must be at least 1");
    if (deform_mm < 0.0)
        throw ConfigError("phantom: --deform must be non-negative");
    if (seed_flag >= 0)
        spec.seed = static_cast<std::uint64_t>(seed_flag);
    fs::create_directories(out_dir);
    const fs::path d(out_dir);
    std::string manifest = "scan_id,path,sex,bmi,copd,cac\n";
    for (int i = 0; i < count; ++i) {
        PhantomSpec s = spec;
        s.seed = spec.seed + static_cast<std::uint64_t>(i);
        const Phantom ph = generate_phantom(s);
        Volume scan = ph.hu;
        if (deform_mm > 0.0) {
            const GeneratedDeformation gd =
                generate_deformation(s.seed, ph.hu.geom, deform_mm);
            scan = warp_volume(ph.hu, gd.field);
        }
        char name[64];
        std::snprintf(name, sizeof name, "scan_%03d.nii.gz", i);
        write_volume((d / name).string(), scan);
        char row[96];
        std::snprintf(row, sizeof row, "phantom_%03d,%s,,,,\n", i, name);
        manifest += row;
    }
    write_text_file((d / "manifest.csv").string(), manifest);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"chest CT cohort registration and atlas construction"};
    app.require_subcommand(1);

    std::string in_path, out_dir, moving_path, reference_path, manifest_path, grid_path,
        out_csv, dir_a, dir_b, spec_path, config_path, filter_expr;
    int workers = 1;
    int count = 1;
    long long seed = -1;
    double deform_mm = 0.0;
    WindowOpt reg_window, atlas_window, diff_window;

    CLI::App* pre = app.add_subcommand("preprocess", "Resample-free HU normalisation + masks");
    pre->add_option("input", in_path, "raw CT volume (NIfTI)")->required();
    pre->add_option("out", out_dir, "output directory")->required();
    pre->callback([&] { cmd_preprocess(in_path, out_dir); });

    CLI::App* reg = app.add_subcommand("register", "Affine + multi-stage registration of a pair");
    reg->add_option("moving", moving_path, "moving CT volume")->required();
    reg->add_option("reference", reference_path, "reference CT volume")->required();
    reg->add_option("out", out_dir, "output directory")->required();
    reg->add_option("--config", config_path, "stage configuration JSON");
    add_window_flag(reg, &reg_window, "affine matching window LOW,HIGH in HU");
    reg->callback(
        [&] { cmd_register(moving_path, reference_path, out_dir, config_path, reg_window); });

    CLI::App* atl = app.add_subcommand("atlas", "Cohort atlas of HU and log-Jacobian moments");
    atl->add_option("manifest", manifest_path, "cohort manifest CSV")->required();
    atl->add_option("reference", reference_path, "reference CT volume")->required();
    atl->add_option("out", out_dir, "output directory")->required();
    atl->add_option("--filter", filter_expr, "subgroup filter, e.g. 'bmi>=18.5 and bmi<=24.9'");
    atl->add_option("--config", config_path, "stage configuration JSON");
    atl->add_option("--workers", workers, "parallel scans")->check(CLI::PositiveNumber);
    add_window_flag(atl, &atlas_window, "affine matching window LOW,HIGH in HU");
    atl->callback([&] {
        cmd_atlas(manifest_path, reference_path, out_dir, filter_expr, config_path, workers,
                  atlas_window);
    });

    CLI::App* dif = app.add_subcommand("diff", "Difference of two atlas bundles");
    dif->add_option("atlas_a", dir_a, "first atlas directory")->required();
    dif->add_option("atlas_b", dir_b, "second atlas directory")->required();
    dif->add_option("out", out_dir, "output directory")->required();
    add_window_flag(dif, &diff_window, "montage display window LOW,HIGH (default -900,-700)");
    dif->callback([&] { cmd_diff(dir_a, dir_b, out_dir, diff_window); });

    CLI::App* tun = app.add_subcommand("tune", "Grid search over one stage's parameters");
    tun->add_option("manifest", manifest_path, "tuning manifest CSV")->required();
    tun->add_option("reference", reference_path, "reference CT volume")->required();
    tun->add_option("grid", grid_path, "search grid JSON")->required();
    tun->add_option("out", out_csv, "ranked CSV output path")->required();
    tun->add_option("--config", config_path, "base stage configuration JSON");
    tun->add_option("--workers", workers, "parallel configurations")->check(CLI::PositiveNumber);
    tun->callback([&] {
        cmd_tune(manifest_path, reference_path, grid_path, out_csv, config_path, workers);
    });

    CLI::App* pha = app.add_subcommand("phantom", "Synthetic chest phantom cohorts");
    pha->add_option("out", out_dir, "output directory")->required();
    pha->add_option("--spec", spec_path, "phantom specification JSON");
    pha->add_option("--count", count, "number of phantoms")->check(CLI::PositiveNumber);
    pha->add_option("--seed", seed, "base seed (overrides the spec)");
    pha->add_option("--deform", deform_mm, "peak synthetic deformation in mm");
    pha->callback([&] { cmd_phantom(spec_path, out_dir, count, seed, deform_mm); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::fprintf(stderr, "ctatlas: %s\n", e.what());
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "ctatlas: %s\n", e.what());
        return static_cast<int>(ExitCode::failure);
    }
    return 0;
}
