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

#include <algorithm>
#include <cmath>
#include <vector>

#include "ctatlas/corrfield.hpp"
#include "ctatlas/errors.hpp"

#include "helpers.hpp"

using namespace ctatlas;
using testutil::make_geometry;
using testutil::random_volume;

namespace {

// Plain nested-loop cost table in double precision: no summed-area shortcut,
// no kernel dispatch, no run splitting. Off-grid voxels on either side cost
// one per channel.
std::vector<double> cost_oracle(const DescriptorField& fixed_desc, const DescriptorField& mov_desc,
                                const KeypointSet& kps, const CandidateSet& cands, int patch_xy,
                                int patch_z) {
    const auto xs = [&] {
        std::vector<int> v;
        for (int i = -patch_xy; i <= patch_xy; ++i) v.push_back(i);
        return v;
    }();
    const std::vector<int> ys = patch_axis_offsets(patch_xy);
    const std::vector<int> zs = patch_axis_offsets(patch_z);
    const double denom = 6.0 * double(xs.size()) * double(ys.size()) * double(zs.size());

    std::vector<double> out(kps.size() * static_cast<std::size_t>(cands.count()));
    for (std::size_t ki = 0; ki < kps.size(); ++ki) {
        const Vec3i p = kps.positions[ki];
        for (int c = 0; c < cands.count(); ++c) {
            const Vec3i off = cands.offset(c);
            double total = 0.0;
            for (int oz : zs)
                for (int oy : ys)
                    for (int ox : xs) {
                        const Vec3i f{p.x + ox, p.y + oy, p.z + oz};
                        const Vec3i m{f.x + off.x, f.y + off.y, f.z + off.z};
                        if (!fixed_desc.geom.in_grid(f.x, f.y, f.z) ||
                            !mov_desc.geom.in_grid(m.x, m.y, m.z)) {
                            total += 6.0;
                            continue;
                        }
                        const float* a = fixed_desc.at(fixed_desc.geom.index(f.x, f.y, f.z));
                        const float* b = mov_desc.at(mov_desc.geom.index(m.x, m.y, m.z));
                        for (int ch = 0; ch < 6; ++ch)
                            total += std::min(std::abs(double(a[ch]) - double(b[ch])), 1.0);
                    }
            out[ki * cands.count() + c] = total / denom;
        }
    }
    return out;
}

DescriptorField stamped_descriptors(const Volume& v, float sentinel) {
    DescriptorField d = ssc_descriptors(v);
    apply_validity_sentinel(d, v.valid, sentinel);
    return d;
}

} // namespace

TEST_CASE("candidate sets enumerate the quantised search box x-fastest") {
    const Vec3 spacing{2.0, 2.0, 2.0};
    const CandidateSet c = make_candidate_set(8, 4, 2, 1, spacing);
    CHECK(c.half.x == 4);
    CHECK(c.half.z == 4);
    CHECK(c.count() == 9 * 9 * 9);
    CHECK(c.offset(0).x == -8);
    CHECK(c.offset(0).y == -8);
    CHECK(c.offset(0).z == -4);
    CHECK(c.offset(1).x == -6); // x advances first, in step units
    CHECK(c.offset(1).y == -8);
    const int centre = (c.half.z * c.count_y() + c.half.y) * c.count_x() + c.half.x;
    CHECK(c.offset(centre).x == 0);
    CHECK(c.offset(centre).y == 0);
    CHECK(c.offset(centre).z == 0);
    const Vec3 mm = c.offset_mm(0);
    CHECK(mm.x == doctest::Approx(-16.0));
    CHECK(mm.z == doctest::Approx(-8.0));

    CHECK_THROWS_AS(make_candidate_set(8, 4, 0, 1, spacing), ConfigError);
}

TEST_CASE("default stage candidate sets have the documented sizes") {
    const Vec3 sp{2.0, 2.0, 2.0};
    const StageConfig s0 = default_stage_config(0);
    const StageConfig s1 = default_stage_config(1);
    const StageConfig s2 = default_stage_config(2);
    const StageConfig s3 = default_stage_config(3);
    CHECK(make_candidate_set(s0.search_xy, s0.search_z, s0.quant_xy, s0.quant_z, sp).count() ==
          17 * 17 * 21);
    CHECK(make_candidate_set(s1.search_xy, s1.search_z, s1.quant_xy, s1.quant_z, sp).count() ==
          17 * 17 * 17);
    CHECK(make_candidate_set(s2.search_xy, s2.search_z, s2.quant_xy, s2.quant_z, sp).count() ==
          21 * 21 * 13);
    CHECK(make_candidate_set(s3.search_xy, s3.search_z, s3.quant_xy, s3.quant_z, sp).count() ==
          21 * 21 * 21);
}

TEST_CASE("patch axes are dense up to radius two and thin to five offsets beyond") {
    CHECK(patch_axis_offsets(1) == std::vector<int>{-1, 0, 1});
    CHECK(patch_axis_offsets(2) == std::vector<int>{-2, -1, 0, 1, 2});
    CHECK(patch_axis_offsets(3) == std::vector<int>{-3, -2, 0, 2, 3});
    CHECK(patch_axis_offsets(5) == std::vector<int>{-5, -3, 0, 3, 5});
    CHECK(patch_axis_offsets(6) == std::vector<int>{-6, -3, 0, 3, 6});
}

TEST_CASE("matching a volume against itself costs zero at zero displacement") {
    const Geometry g = make_geometry(16, 16, 16, 2.0, 2.0, 2.0);
    const Volume v = random_volume(g, 3, -500.0, 500.0, 0.0);
    const DescriptorField d = stamped_descriptors(v, kFixedSentinel);
    const DescriptorField dm = stamped_descriptors(v, kMovingSentinel);

    KeypointSet kps;
    kps.positions = {{8, 8, 8}, {5, 9, 6}, {10, 4, 11}};
    kps.displacements.assign(3, {0, 0, 0});
    const CandidateSet cands = make_candidate_set(2, 1, 1, 1, g.spacing);
    const auto costs = unary_costs(d, dm, kps, cands, 2, 1, &kernels::scalar_table());

    const int centre = (cands.half.z * cands.count_y() + cands.half.y) * cands.count_x() +
                       cands.half.x;
    for (std::size_t k = 0; k < kps.size(); ++k) {
        CHECK(costs[k * cands.count() + centre] == 0.0f);
        for (int c = 0; c < cands.count(); ++c) {
            CHECK(costs[k * cands.count() + c] >= 0.0f);
            CHECK(costs[k * cands.count() + c] <= 1.0f);
        }
    }
}

TEST_CASE("cost tables match the nested loop oracle") {
    const Geometry g = make_geometry(16, 16, 16, 2.0, 2.0, 2.0);
    const Volume fixed_v = random_volume(g, 71, -600.0, 600.0, 0.05);
    const Volume moving_v = random_volume(g, 72, -600.0, 600.0, 0.05);
    const DescriptorField fd = stamped_descriptors(fixed_v, kFixedSentinel);
    const DescriptorField md = stamped_descriptors(moving_v, kMovingSentinel);

    KeypointSet kps;
    // Interior, edge and corner keypoints so both off-grid paths trigger.
    kps.positions = {{8, 8, 8}, {1, 8, 14}, {15, 0, 0}};
    kps.displacements.assign(3, {0, 0, 0});
    const CandidateSet cands = make_candidate_set(4, 2, 2, 1, g.spacing);

    for (int patch_xy : {2, 3}) {
        const int patch_z = 2;
        const auto got =
            unary_costs(fd, md, kps, cands, patch_xy, patch_z, &kernels::scalar_table());
        const auto want = cost_oracle(fd, md, kps, cands, patch_xy, patch_z);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i)
            CHECK(std::abs(double(got[i]) - want[i]) < 1e-6);
    }
}

TEST_CASE("every kernel variant agrees with the scalar cost table") {
    const Geometry g = make_geometry(14, 14, 14, 2.0, 2.0, 2.0);
    const Volume fixed_v = random_volume(g, 81, -600.0, 600.0, 0.0);
    const Volume moving_v = random_volume(g, 82, -600.0, 600.0, 0.0);
    const DescriptorField fd = stamped_descriptors(fixed_v, kFixedSentinel);
    const DescriptorField md = stamped_descriptors(moving_v, kMovingSentinel);

    KeypointSet kps;
    kps.positions = {{7, 7, 7}, {3, 10, 5}};
    kps.displacements.assign(2, {0, 0, 0});
    const CandidateSet cands = make_candidate_set(3, 2, 1, 1, g.spacing);

    const auto ref = unary_costs(fd, md, kps, cands, 3, 2, &kernels::scalar_table());
    for (const auto* table : kernels::available_tables()) {
        const auto got = unary_costs(fd, md, kps, cands, 3, 2, table);
        REQUIRE(got.size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(std::abs(got[i] - ref[i]) <= 1e-5f * std::max(1.0f, std::abs(ref[i])));
    }
}

TEST_CASE("the flat-region shortcut is bit-identical to the full evaluation") {
    // Ambient air around a small structure: keypoints deep in the flat zone
    // take the shortcut, the one near the structure cannot.
    const Geometry g = make_geometry(24, 24, 24, 2.0, 2.0, 2.0);
    Volume v(g, kAirHU);
    for (int k = 10; k < 14; ++k)
        for (int j = 10; j < 14; ++j)
            for (int i = 10; i < 14; ++i) v.set(i, j, k, 100.0f);

    const DescriptorField fd = stamped_descriptors(v, kFixedSentinel);
    const DescriptorField md = stamped_descriptors(v, kMovingSentinel);

    KeypointSet kps;
    kps.positions = {{4, 4, 4}, {19, 19, 19}, {12, 12, 12}, {9, 12, 12}};
    kps.displacements.assign(4, {0, 0, 0});
    const CandidateSet cands = make_candidate_set(2, 2, 1, 1, g.spacing);

    const auto got = unary_costs(fd, md, kps, cands, 2, 2, &kernels::scalar_table());
    const auto want = cost_oracle(fd, md, kps, cands, 2, 2);
    for (std::size_t i = 0; i < got.size(); ++i) {
        // The oracle is exact in double here because flat regions subtract
        // identical floats; everything else is small-patch arithmetic.
        CHECK(std::abs(double(got[i]) - want[i]) < 1e-6);
    }
    // Deep flat keypoints really do cost zero against every candidate.
    for (int c = 0; c < cands.count(); ++c) {
        CHECK(got[0 * cands.count() + c] == 0.0f);
        CHECK(got[1 * cands.count() + c] == 0.0f);
    }
}

TEST_CASE("swapping roles mirrors the cost table") {
    const Geometry g = make_geometry(18, 18, 18, 2.0, 2.0, 2.0);
    const Volume v = random_volume(g, 99, -400.0, 400.0, 0.0);
    const DescriptorField d = ssc_descriptors(v);

    // Two keypoints separated by exactly one candidate offset.
    const Vec3i delta{2, 0, 0};
    KeypointSet kps;
    kps.positions = {{8, 9, 9}, {8 + delta.x, 9, 9}};
    kps.displacements.assign(2, {0, 0, 0});
    const CandidateSet cands = make_candidate_set(2, 2, 2, 2, g.spacing);

    const auto costs = unary_costs(d, d, kps, cands, 2, 2, &kernels::scalar_table());
    int forward = -1, backward = -1;
    for (int c = 0; c < cands.count(); ++c) {
        const Vec3i o = cands.offset(c);
        if (o.x == delta.x && o.y == 0 && o.z == 0) forward = c;
        if (o.x == -delta.x && o.y == 0 && o.z == 0) backward = c;
    }
    REQUIRE(forward >= 0);
    REQUIRE(backward >= 0);
    // cost(p -> p+delta) equals cost(p+delta -> p) term for term.
    CHECK(costs[0 * cands.count() + forward] == costs[1 * cands.count() + backward]);
}

TEST_CASE("invalid regions pay the saturated penalty") {
    const Geometry g = make_geometry(16, 16, 16, 2.0, 2.0, 2.0);
    Volume fixed_v = random_volume(g, 13, -300.0, 300.0, 0.0);
    Volume moving_v = fixed_v;
    // Invalidate the moving half-space the candidate walks into.
    for (int k = 0; k < 16; ++k)
        for (int j = 0; j < 16; ++j)
            for (int i = 10; i < 16; ++i) moving_v.invalidate(g.index(i, j, k));

    const DescriptorField fd = stamped_descriptors(fixed_v, kFixedSentinel);
    const DescriptorField md = stamped_descriptors(moving_v, kMovingSentinel);

    KeypointSet kps;
    kps.positions = {{12, 8, 8}};
    kps.displacements.assign(1, {0, 0, 0});
    const CandidateSet cands = make_candidate_set(1, 1, 1, 1, g.spacing);
    const auto costs = unary_costs(fd, md, kps, cands, 1, 1, &kernels::scalar_table());
    // The whole patch is invalid on the moving side: every channel of every
    // voxel is a sentinel pairing, so the mean clamps to exactly one.
    for (int c = 0; c < cands.count(); ++c) CHECK(costs[c] == 1.0f);
}

TEST_CASE("empty keypoint sets give empty tables and bad patches throw") {
    const Geometry g = make_geometry(8, 8, 8);
    const Volume v = random_volume(g, 1, 0.0, 1.0, 0.0);
    const DescriptorField d = ssc_descriptors(v);
    KeypointSet none;
    const CandidateSet cands = make_candidate_set(1, 1, 1, 1, g.spacing);
    CHECK(unary_costs(d, d, none, cands, 1, 1).empty());

    KeypointSet one;
    one.positions = {{4, 4, 4}};
    one.displacements.assign(1, {0, 0, 0});
    CHECK_THROWS_AS(unary_costs(d, d, one, cands, 0, 1), ConfigError);
}
