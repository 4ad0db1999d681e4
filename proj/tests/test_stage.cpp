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

#include <doctest.h>

#include <cmath>
#include <random>

#include "ctatlas/corrfield.hpp"
#include "ctatlas/errors.hpp"
#include "ctatlas/field.hpp"

#include "helpers.hpp"

using namespace ctatlas;
using testutil::make_geometry;

namespace {

// Smooth blob structure with enough texture for matching on small grids.
Volume blob_volume(const Geometry& g) {
    Volume v(g, kAirHU);
    const Vec3 c1{g.origin.x + 0.35 * (g.dims.x - 1) * g.spacing.x,
                  g.origin.y + 0.5 * (g.dims.y - 1) * g.spacing.y,
                  g.origin.z + 0.4 * (g.dims.z - 1) * g.spacing.z};
    const Vec3 c2{g.origin.x + 0.65 * (g.dims.x - 1) * g.spacing.x,
                  g.origin.y + 0.45 * (g.dims.y - 1) * g.spacing.y,
                  g.origin.z + 0.6 * (g.dims.z - 1) * g.spacing.z};
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const Vec3 w = g.world(i, j, k);
                const double r1 = (w - c1).norm(), r2 = (w - c2).norm();
                const double val = -1000.0 + 900.0 * std::exp(-r1 * r1 / 800.0) +
                                   1100.0 * std::exp(-r2 * r2 / 500.0) +
                                   80.0 * std::sin(0.35 * w.x) * std::cos(0.3 * w.y) *
                                       std::sin(0.25 * w.z);
                v.set(i, j, k, static_cast<float>(val));
            }
    return v;
}

} // namespace

TEST_CASE("an empty mask yields no keypoints") {
    const Geometry g = make_geometry(16, 16, 16);
    Mask empty(g, 0);
    CHECK(sample_keypoints(empty, 4, 2).size() == 0);
}

TEST_CASE("a full mask yields the complete keypoint lattice") {
    const Geometry g = make_geometry(32, 32, 32, 2.0, 2.0, 2.0);
    Mask all(g, 1);
    const KeypointSet kps = sample_keypoints(all, 8, 4);
    CHECK(kps.size() == 4 * 4 * 8);
    CHECK(kps.displacements.size() == kps.size());
    for (const Vec3& d : kps.displacements) CHECK(d.norm() == 0.0);
    // Lattice positions stay inside the grid.
    for (const Vec3i& p : kps.positions) CHECK(g.in_grid(p.x, p.y, p.z));
}

TEST_CASE("keypoints always land inside the mask") {
    const Geometry g = make_geometry(24, 24, 24, 2.0, 2.0, 2.0);
    Mask half(g, 0);
    for (int k = 0; k < 24; ++k)
        for (int j = 0; j < 24; ++j)
            for (int i = 0; i < 12; ++i) half.set(i, j, k, 1);
    const KeypointSet kps = sample_keypoints(half, 4, 4);
    CHECK(kps.size() > 0);
    for (const Vec3i& p : kps.positions) CHECK(half.at(p.x, p.y, p.z) == 1);

    // A sparse mask still snaps nodes onto its few voxels, without duplicates.
    Mask sparse(g, 0);
    sparse.set(6, 6, 6, 1);
    sparse.set(18, 18, 18, 1);
    const KeypointSet snapped = sample_keypoints(sparse, 12, 12);
    CHECK(snapped.size() <= 2);
    for (const Vec3i& p : snapped.positions) CHECK(sparse.at(p.x, p.y, p.z) == 1);
    for (std::size_t a = 0; a < snapped.size(); ++a)
        for (std::size_t b = a + 1; b < snapped.size(); ++b)
            CHECK_FALSE(snapped.positions[a] == snapped.positions[b]);
}

TEST_CASE("densifying a single keypoint gives a constant field") {
    const Geometry g = make_geometry(12, 12, 12, 2.0, 2.0, 2.0);
    KeypointSet kps;
    kps.positions = {{6, 6, 6}};
    kps.displacements = {{3.0, -1.5, 0.5}};
    const DisplacementField f = densify(kps, g, 10.0);
    for (int k = 0; k < 12; ++k)
        for (int j = 0; j < 12; ++j)
            for (int i = 0; i < 12; ++i) {
                const Vec3 u = f.at(i, j, k);
                CHECK(u.x == doctest::Approx(3.0).epsilon(1e-12));
                CHECK(u.y == doctest::Approx(-1.5).epsilon(1e-12));
                CHECK(u.z == doctest::Approx(0.5).epsilon(1e-12));
            }
}

TEST_CASE("densifying identical displacements reproduces them everywhere") {
    const Geometry g = make_geometry(14, 14, 14, 1.5, 1.5, 1.5);
    std::mt19937_64 rng(9);
    KeypointSet kps;
    for (int n = 0; n < 12; ++n)
        kps.positions.push_back({int(rng() % 14), int(rng() % 14), int(rng() % 14)});
    kps.displacements.assign(12, {-2.0, 4.0, 1.0});
    const DisplacementField f = densify(kps, g, 6.0);
    for (std::size_t i = 0; i < f.ux.size(); ++i) {
        CHECK(f.ux[i] == doctest::Approx(-2.0).epsilon(1e-9));
        CHECK(f.uy[i] == doctest::Approx(4.0).epsilon(1e-9));
        CHECK(f.uz[i] == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("a keypoint dominates its own voxel after densification") {
    const Geometry g = make_geometry(24, 24, 24, 2.0, 2.0, 2.0);
    KeypointSet kps;
    // Well separated keypoints relative to the kernel width.
    kps.positions = {{4, 4, 4}, {19, 18, 20}, {5, 19, 18}};
    kps.displacements = {{8.0, 0.0, 0.0}, {0.0, -6.0, 0.0}, {0.0, 0.0, 5.0}};
    const DisplacementField f = densify(kps, g, 4.0);
    for (std::size_t n = 0; n < kps.size(); ++n) {
        const Vec3 u = f.at(kps.positions[n].x, kps.positions[n].y, kps.positions[n].z);
        const Vec3 d = kps.displacements[n];
        CHECK((u - d).norm() <= 0.1 * d.norm());
    }
}

TEST_CASE("densifying far outside the keypoint cloud falls back to the nearest one") {
    // Keypoints in one corner, samples in the other; with a tiny sigma all
    // weights underflow and the nearest keypoint must win outright.
    const Geometry g = make_geometry(64, 4, 4, 4.0, 4.0, 4.0);
    KeypointSet kps;
    kps.positions = {{0, 0, 0}, {2, 0, 0}};
    kps.displacements = {{7.0, 0.0, 0.0}, {-3.0, 0.0, 0.0}};
    const DisplacementField f = densify(kps, g, 0.05);
    const Vec3 far = f.at(63, 3, 3);
    CHECK(far.x == -3.0);
    CHECK(far.y == 0.0);
    CHECK(far.z == 0.0);

    KeypointSet none;
    CHECK_THROWS_AS(densify(none, g, 1.0), DegenerateInputError);
}

TEST_CASE("the symmetry filter keeps consistent matches and drops one-sided ones") {
    const Geometry g = make_geometry(32, 32, 32, 2.0, 2.0, 2.0);
    KeypointSet fwd;
    fwd.positions = {{8, 8, 8}, {16, 16, 16}, {24, 24, 24}};
    fwd.displacements.assign(3, {10.0, 0.0, 0.0});

    // Backward field that exactly undoes the forward displacement.
    DisplacementField consistent(g);
    for (auto& x : consistent.ux) x = -10.0;
    const double threshold = 0.5 * 8 * 2.0; // half the keypoint spacing in mm
    const KeypointSet kept = symmetry_filter(fwd, g, consistent, threshold);
    CHECK(kept.size() == 3);
    REQUIRE(kept.consistency_error.size() == 3);
    for (double e : kept.consistency_error) CHECK(e <= 1e-9);

    // A backward field of zero leaves the full 10 mm residual: over the
    // 8 mm gate, so everything is discarded.
    const DisplacementField zero(g);
    const KeypointSet dropped = symmetry_filter(fwd, g, zero, threshold);
    CHECK(dropped.size() == 0);

    // Residual exactly at the gate survives (inclusive threshold).
    DisplacementField partial(g);
    for (auto& x : partial.ux) x = -2.0;
    const KeypointSet edge = symmetry_filter(fwd, g, partial, 8.0);
    CHECK(edge.size() == 3);
    for (double e : edge.consistency_error) CHECK(e == doctest::Approx(8.0));
}

TEST_CASE("stage self registration stays well under half the working resolution") {
    const Geometry g = make_geometry(32, 32, 32, 4.0, 4.0, 4.0);
    const Volume v = blob_volume(g);
    StageConfig cfg;
    cfg.resolution_mm = 4.0;
    cfg.search_xy = 4;
    cfg.search_z = 2;
    cfg.dispersion_xy = 4;
    cfg.dispersion_z = 2;
    cfg.patch_xy = 2;
    cfg.patch_z = 2;
    cfg.quant_xy = 1;
    cfg.quant_z = 1;
    cfg.regularization = 0.5;

    std::vector<StageReport> reports;
    const DisplacementField f = run_stage(v, v, cfg, 0, &reports);
    Mask all(f.geom, 1);
    CHECK(mean_displacement(f, all) < 0.5 * cfg.resolution_mm);
    REQUIRE(reports.size() == 2); // full radius plus the halved sub-stage
    CHECK(reports[0].stage == 0);
    CHECK(reports[0].sub_stage == 0);
    CHECK(reports[1].sub_stage == 1);
    CHECK(reports[0].keypoints > 0);
    CHECK_FALSE(reports[0].degraded);
}

TEST_CASE("an empty stage list is the identity on the reference grid") {
    const Geometry g = make_geometry(20, 18, 16, 2.5, 2.0, 3.0, 1.0, -2.0, 0.5);
    const Volume v = blob_volume(g);
    const DisplacementField f = run_pipeline(v, v, {});
    CHECK(f.geom.same_grid(g, 1e-12));
    for (std::size_t i = 0; i < f.ux.size(); ++i) {
        CHECK(f.ux[i] == 0.0);
        CHECK(f.uy[i] == 0.0);
        CHECK(f.uz[i] == 0.0);
    }
}

TEST_CASE("a single stage pipeline equals the stage itself bit for bit") {
    const Geometry g = make_geometry(28, 28, 28, 4.0, 4.0, 4.0);
    const Volume ref = blob_volume(g);
    Volume mov = ref;
    // Mild intensity perturbation so the match is not trivially flat.
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<float> jitter(-15.0f, 15.0f);
    for (auto& x : mov.data) x += jitter(rng);

    StageConfig cfg;
    cfg.resolution_mm = 4.0;
    cfg.search_xy = 4;
    cfg.search_z = 2;
    cfg.dispersion_xy = 4;
    cfg.dispersion_z = 2;
    cfg.patch_xy = 2;
    cfg.patch_z = 2;
    cfg.quant_xy = 1;
    cfg.quant_z = 1;

    const DisplacementField direct = run_stage(mov, ref, cfg, 0);
    const DisplacementField via = run_pipeline(mov, ref, {cfg});
    REQUIRE(via.geom.same_grid(direct.geom, 1e-12));
    CHECK(via.ux == direct.ux);
    CHECK(via.uy == direct.uy);
    CHECK(via.uz == direct.uz);
}

TEST_CASE("the pipeline is bit deterministic") {
    const Geometry g = make_geometry(24, 24, 24, 4.0, 4.0, 4.0);
    const Volume ref = blob_volume(g);
    Volume mov = ref;
    std::mt19937_64 rng(43);
    std::uniform_real_distribution<float> jitter(-20.0f, 20.0f);
    for (auto& x : mov.data) x += jitter(rng);

    StageConfig cfg;
    cfg.resolution_mm = 4.0;
    cfg.search_xy = 3;
    cfg.search_z = 2;
    cfg.dispersion_xy = 3;
    cfg.dispersion_z = 2;
    cfg.patch_xy = 2;
    cfg.patch_z = 1;
    cfg.quant_xy = 1;
    cfg.quant_z = 1;

    const DisplacementField a = run_pipeline(mov, ref, {cfg, cfg});
    const DisplacementField b = run_pipeline(mov, ref, {cfg, cfg});
    CHECK(a.ux == b.ux);
    CHECK(a.uy == b.uy);
    CHECK(a.uz == b.uz);
}

TEST_CASE("stage defaults follow the coarse-to-fine schedule") {
    const std::vector<StageConfig> defaults = default_stage_configs();
    REQUIRE(defaults.size() == 4);
    CHECK(defaults[0].resolution_mm == 2.0);
    CHECK(defaults[0].search_xy == 60);
    CHECK(defaults[0].search_z == 30);
    CHECK(defaults[0].dispersion_xy == 8);
    CHECK(defaults[0].dispersion_z == 4);
    CHECK(defaults[0].patch_xy == 6);
    CHECK(defaults[0].patch_z == 4);
    CHECK(defaults[0].regularization == 1.0);
    CHECK(defaults[0].quant_xy == 7);
    CHECK(defaults[0].quant_z == 3);

    CHECK(defaults[1].search_xy == 32);
    CHECK(defaults[1].quant_xy == 4);
    CHECK(defaults[2].search_xy == 10);
    CHECK(defaults[2].quant_xy == 1);
    CHECK(defaults[3].resolution_mm == 1.0);
    CHECK(defaults[3].search_xy == 20);
    CHECK(defaults[3].quant_xy == 2);
    // Past the schedule the last stage repeats.
    CHECK(default_stage_config(9).search_xy == 20);

    CHECK(default_quantization(60) == 7);
    CHECK(default_quantization(8) == 1);
    CHECK(default_quantization(1) == 1);
}

TEST_CASE("stage JSON parsing applies defaults, derives steps and validates") {
    CHECK(parse_stage_configs("[]").empty());

    const auto one = parse_stage_configs("[{}]");
    REQUIRE(one.size() == 1);
    CHECK(one[0].search_xy == 60);
    CHECK(one[0].quant_xy == 7);

    const auto two = parse_stage_configs(
        R"([{"search_radius": [16, 8], "quantization": 0},
            {"resolution_mm": 1.5, "dispersion": [6, 3], "regularization": 0.25}])");
    REQUIRE(two.size() == 2);
    CHECK(two[0].search_xy == 16);
    CHECK(two[0].search_z == 8);
    CHECK(two[0].quant_xy == 2); // derived: max(1, 16/8)
    CHECK(two[0].quant_z == 1);
    CHECK(two[1].resolution_mm == 1.5);
    CHECK(two[1].dispersion_xy == 6);
    CHECK(two[1].regularization == 0.25);

    const auto wrapped = parse_stage_configs(R"({"stages": [{"patch_radius": [3, 2]}]})");
    REQUIRE(wrapped.size() == 1);
    CHECK(wrapped[0].patch_xy == 3);
    CHECK(wrapped[0].patch_z == 2);

    CHECK_THROWS_AS(parse_stage_configs("not json"), ConfigError);
    CHECK_THROWS_AS(parse_stage_configs(R"([{"search_radius": [4, 2], "dispersion": [8, 4]}])"),
                    ConfigError); // search must cover dispersion
    CHECK_THROWS_AS(parse_stage_configs(R"([{"quantization": [70, 3]}])"),
                    ConfigError); // step exceeds the search radius
    CHECK_THROWS_AS(parse_stage_configs(R"([{"search_radius": 16}])"), ConfigError);
    CHECK_THROWS_AS(parse_stage_configs(R"([{"sigma": 3}])"), ConfigError);
    CHECK_THROWS_AS(parse_stage_configs(R"({"no_stages": []})"), ConfigError);
}

TEST_CASE("stage JSON serialisation round trips") {
    const std::vector<StageConfig> defaults = default_stage_configs();
    const std::string text = stage_configs_to_json(defaults);
    const std::vector<StageConfig> back = parse_stage_configs(text);
    REQUIRE(back.size() == defaults.size());
    for (std::size_t i = 0; i < defaults.size(); ++i) {
        CHECK(back[i].resolution_mm == defaults[i].resolution_mm);
        CHECK(back[i].search_xy == defaults[i].search_xy);
        CHECK(back[i].search_z == defaults[i].search_z);
        CHECK(back[i].dispersion_xy == defaults[i].dispersion_xy);
        CHECK(back[i].dispersion_z == defaults[i].dispersion_z);
        CHECK(back[i].patch_xy == defaults[i].patch_xy);
        CHECK(back[i].patch_z == defaults[i].patch_z);
        CHECK(back[i].regularization == defaults[i].regularization);
        CHECK(back[i].quant_xy == defaults[i].quant_xy);
        CHECK(back[i].quant_z == defaults[i].quant_z);
    }
}
