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

#include "ctatlas/interp.hpp"
#include "ctatlas/volume.hpp"

#include "helpers.hpp"

using namespace ctatlas;
using testutil::make_geometry;
using testutil::random_volume;

TEST_CASE("geometry world and voxel coordinates invert each other") {
    const Geometry g = make_geometry(7, 5, 9, 1.5, 2.0, 0.75, -10.0, 3.5, 42.0);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-50.0, 90.0);
    for (int n = 0; n < 200; ++n) {
        const Vec3 w{u(rng), u(rng), u(rng)};
        const Vec3 t = g.voxel(w);
        const Vec3 back{g.origin.x + t.x * g.spacing.x, g.origin.y + t.y * g.spacing.y,
                        g.origin.z + t.z * g.spacing.z};
        CHECK(std::abs(back.x - w.x) < 1e-9);
        CHECK(std::abs(back.y - w.y) < 1e-9);
        CHECK(std::abs(back.z - w.z) < 1e-9);
    }
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const Vec3 t = g.voxel(g.world(i, j, k));
                CHECK(std::abs(t.x - i) < 1e-12);
                CHECK(std::abs(t.y - j) < 1e-12);
                CHECK(std::abs(t.z - k) < 1e-12);
            }
}

TEST_CASE("geometry index is x-fastest and in_grid bounds the lattice") {
    const Geometry g = make_geometry(4, 3, 2);
    CHECK(g.voxel_count() == 24);
    CHECK(g.index(0, 0, 0) == 0);
    CHECK(g.index(1, 0, 0) == 1);
    CHECK(g.index(0, 1, 0) == 4);
    CHECK(g.index(0, 0, 1) == 12);
    CHECK(g.in_grid(3, 2, 1));
    CHECK_FALSE(g.in_grid(4, 0, 0));
    CHECK_FALSE(g.in_grid(0, -1, 0));
    CHECK_FALSE(g.in_grid(0, 0, 2));
}

TEST_CASE("invalid voxels always hold the air value") {
    const Geometry g = make_geometry(6, 6, 6);
    Volume v = random_volume(g, 5, -1000.0, 2000.0, 0.3);
    for (std::size_t i = 0; i < v.data.size(); ++i)
        if (!v.valid[i]) CHECK(v.data[i] == kAirHU);
    v.data[0] = 500.0f;
    v.valid[0] = 0;
    v.impute_invalid();
    CHECK(v.data[0] == kAirHU);
}

TEST_CASE("trilinear sampling reproduces stored values at valid voxel centres") {
    const Geometry g = make_geometry(5, 4, 6, 2.0, 1.0, 3.0, -7.0, 2.0, 1.0);
    const Volume v = random_volume(g, 17, -1000.0, 1000.0, 0.2);
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const Sample s = trilinear_sample(v, g.world(i, j, k));
                if (v.is_valid(i, j, k)) {
                    REQUIRE(s.valid);
                    CHECK(s.value == v.at(i, j, k));
                } else {
                    CHECK_FALSE(s.valid);
                }
            }
}

TEST_CASE("trilinear sampling is invalid outside the grid and near invalid corners") {
    const Geometry g = make_geometry(4, 4, 4);
    Volume v(g, 100.0f);
    v.invalidate(g.index(2, 2, 2));

    CHECK_FALSE(trilinear_sample(v, {-0.5, 0.0, 0.0}).valid);
    CHECK_FALSE(trilinear_sample(v, {3.5, 1.0, 1.0}).valid);
    // Any nonzero weight on the invalid corner kills the sample.
    CHECK_FALSE(trilinear_sample(v, {1.5, 2.0, 2.0}).valid);
    CHECK_FALSE(trilinear_sample(v, {2.0, 2.0, 1.2}).valid);
    // Zero-weight contact with the invalid corner is fine.
    const Sample s = trilinear_sample(v, {1.0, 2.0, 2.5});
    REQUIRE(s.valid);
    CHECK(s.value == 100.0f);
}

TEST_CASE("invalidating voxels never turns an invalid sample valid") {
    const Geometry g = make_geometry(6, 5, 4, 1.0, 2.0, 1.5);
    Volume a = random_volume(g, 23, -500.0, 500.0, 0.15);
    Volume b = a;
    std::mt19937_64 rng(29);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(g.voxel_count()) - 1);
    for (int n = 0; n < 20; ++n) b.invalidate(static_cast<std::size_t>(pick(rng)));

    std::uniform_real_distribution<double> ux(-1.0, 7.0), uy(-1.0, 9.0), uz(-1.0, 6.0);
    for (int n = 0; n < 2000; ++n) {
        const Vec3 w{ux(rng), uy(rng), uz(rng)};
        const Sample sa = trilinear_sample(a, w);
        const Sample sb = trilinear_sample(b, w);
        if (!sa.valid) CHECK_FALSE(sb.valid);
        if (sb.valid) CHECK(sa.value == sb.value);
    }
}

TEST_CASE("trilinear interpolation is exact for affine ramps") {
    const Geometry g = make_geometry(6, 6, 6, 1.25, 1.0, 2.0, 3.0, -4.0, 0.5);
    Volume v(g);
    auto ramp = [](const Vec3& w) { return 3.0 + 0.5 * w.x - 1.25 * w.y + 2.0 * w.z; };
    for (int k = 0; k < 6; ++k)
        for (int j = 0; j < 6; ++j)
            for (int i = 0; i < 6; ++i) v.set(i, j, k, static_cast<float>(ramp(g.world(i, j, k))));

    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> t(0.0, 5.0);
    for (int n = 0; n < 500; ++n) {
        const Vec3 vox{t(rng), t(rng), t(rng)};
        const Vec3 w{g.origin.x + vox.x * g.spacing.x, g.origin.y + vox.y * g.spacing.y,
                     g.origin.z + vox.z * g.spacing.z};
        const Sample s = trilinear_sample(v, w);
        REQUIRE(s.valid);
        CHECK(std::abs(s.value - ramp(w)) < 1e-3);
    }
}

TEST_CASE("partial sampling agrees with strict sampling when all corners are valid") {
    const Geometry g = make_geometry(7, 6, 5, 1.0, 1.5, 2.0, -3.0, 0.0, 1.0);
    const Volume v = random_volume(g, 41, -1000.0, 1500.0, 0.2);
    std::mt19937_64 rng(43);
    std::uniform_real_distribution<double> ux(-5.0, 12.0), uy(-2.0, 12.0), uz(-1.0, 12.0);
    int both = 0, partial_only = 0;
    for (int n = 0; n < 5000; ++n) {
        const Vec3 w{ux(rng), uy(rng), uz(rng)};
        const Sample strict = trilinear_sample(v, w);
        const Sample relaxed = trilinear_sample_partial(v, w);
        if (strict.valid) {
            REQUIRE(relaxed.valid);
            CHECK(relaxed.value == strict.value);
            ++both;
        } else if (relaxed.valid) {
            ++partial_only;
        }
    }
    CHECK(both > 0);
    CHECK(partial_only > 0); // partial mode must actually rescue boundary samples
}

TEST_CASE("partial sampling renormalises over the surviving corners") {
    const Geometry g = make_geometry(2, 1, 1);
    Volume v(g);
    v.set(0, 0, 0, 10.0f);
    v.set(1, 0, 0, 30.0f);
    v.invalidate(g.index(1, 0, 0));

    // Strict sampling dies half way across; partial keeps the valid corner.
    CHECK_FALSE(trilinear_sample(v, {0.5, 0.0, 0.0}).valid);
    const Sample s = trilinear_sample_partial(v, {0.5, 0.0, 0.0});
    REQUIRE(s.valid);
    CHECK(s.value == 10.0f);

    // Fully outside stays invalid even in partial mode.
    CHECK_FALSE(trilinear_sample_partial(v, {-0.5, 0.0, 0.0}).valid);
    v.invalidate(g.index(0, 0, 0));
    CHECK_FALSE(trilinear_sample_partial(v, {0.5, 0.0, 0.0}).valid);
}

TEST_CASE("mask count and valid_mask round trip") {
    const Geometry g = make_geometry(5, 5, 5);
    Volume v = random_volume(g, 47, 0.0, 10.0, 0.4);
    const Mask m = v.valid_mask();
    std::size_t n = 0;
    for (auto f : v.valid) n += (f != 0);
    CHECK(m.count() == n);
    for (std::size_t i = 0; i < v.valid.size(); ++i) CHECK((m.data[i] != 0) == (v.valid[i] != 0));
}
