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

#include "ctatlas/errors.hpp"
#include "ctatlas/phantom.hpp"

#include "helpers.hpp"

using namespace ctatlas;
using testutil::make_geometry;

namespace {

PhantomSpec small_spec(std::uint64_t seed) {
    PhantomSpec s;
    s.seed = seed;
    s.dims = {48, 48, 48};
    s.spacing = {3.0, 3.0, 3.0};
    s.body_semiaxes = {60.0, 48.0, 64.0};
    s.lung_semiaxes = {18.0, 24.0, 30.0};
    s.lung_center_left = {-26.0, 0.0, 6.0};
    s.lung_center_right = {26.0, 0.0, 6.0};
    return s;
}

} // namespace

TEST_CASE("phantom generation is deterministic in the spec") {
    const Phantom a = generate_phantom(small_spec(11));
    const Phantom b = generate_phantom(small_spec(11));
    CHECK(a.hu.data == b.hu.data);
    CHECK(a.hu.valid == b.hu.valid);
    CHECK(a.truth.body.data == b.truth.body.data);
    CHECK(a.truth.lung.data == b.truth.lung.data);

    const Phantom c = generate_phantom(small_spec(12));
    CHECK(a.hu.data != c.hu.data);
    // Truth masks depend only on geometry, not on the noise seed.
    CHECK(a.truth.body.data == c.truth.body.data);
}

TEST_CASE("phantom truth masks nest and HU levels land where expected") {
    PhantomSpec s = small_spec(5);
    s.noise_sigma = 0.0;
    const Phantom p = generate_phantom(s);
    const Geometry& g = p.hu.geom;

    std::size_t lung_voxels = 0;
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
        if (p.truth.lung.data[i]) {
            ++lung_voxels;
            CHECK(p.truth.body.data[i] == 1);
        }
    }
    CHECK(lung_voxels > 1000);

    // Voxel nearest a probe point in world mm (the body centre sits at the
    // grid centre).
    const Vec3 centre = g.world(g.dims.x / 2, g.dims.y / 2, g.dims.z / 2);
    const auto probe = [&](const Vec3& offset) {
        const Vec3 v = g.voxel(centre + offset);
        return p.hu.at(int(std::lround(v.x)), int(std::lround(v.y)), int(std::lround(v.z)));
    };
    CHECK(std::abs(probe({0.0, 0.0, 0.0}) - s.hu.soft) < 40.0);
    CHECK(std::abs(probe(s.lung_center_left) - s.hu.lung) < 40.0);
    CHECK(std::abs(probe(s.lung_center_right) - s.hu.lung) < 40.0);
    CHECK(std::abs(p.hu.at(0, 0, 0) - s.hu.air) < 40.0);
}

TEST_CASE("the field of view crop invalidates exactly the top slices") {
    PhantomSpec s = small_spec(3);
    s.dims = {24, 24, 32};
    s.fov_crop = 0.25;
    const Phantom p = generate_phantom(s);
    const Geometry& g = p.hu.geom;
    for (int k = 0; k < g.dims.z; ++k) {
        const bool cropped = k >= 24; // llround(0.25 * 32) = 8 top slices
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                CHECK(p.hu.is_valid(i, j, k) == !cropped);
                if (cropped) CHECK(p.hu.at(i, j, k) == kAirHU);
            }
    }
    // Truth masks ignore the crop.
    PhantomSpec full = s;
    full.fov_crop = 0.0;
    CHECK(p.truth.body.data == generate_phantom(full).truth.body.data);

    PhantomSpec bad = small_spec(3);
    bad.fov_crop = 1.5;
    CHECK_THROWS_AS(generate_phantom(bad), ConfigError);
}

TEST_CASE("HU noise has the requested moments and spares invalid voxels") {
    const Geometry g = make_geometry(64, 64, 64, 2.0, 2.0, 2.0);
    Volume clean(g, 100.0f);
    clean.invalidate(g.index(10, 10, 10));
    clean.invalidate(g.index(11, 10, 10));

    const Volume noisy = add_hu_noise(clean, 20.0, 77);
    double sum = 0.0, sum2 = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
        if (!noisy.valid[i]) continue;
        const double d = noisy.data[i] - clean.data[i];
        sum += d;
        sum2 += d * d;
        ++n;
    }
    const double mean = sum / n;
    const double sd = std::sqrt(sum2 / n - mean * mean);
    CHECK(std::abs(mean) < 0.5);
    CHECK(sd == doctest::Approx(20.0).epsilon(0.02));

    CHECK_FALSE(noisy.is_valid(10, 10, 10));
    CHECK(noisy.at(10, 10, 10) == kAirHU);

    // Sigma zero is the identity on valid voxels.
    const Volume same = add_hu_noise(clean, 0.0, 77);
    CHECK(same.data == clean.data);
}

TEST_CASE("phantom spec JSON round trips and rejects unknown keys") {
    PhantomSpec s = small_spec(123);
    s.fov_crop = 0.1;
    s.noise_sigma = 7.5;
    s.rib_count = 12;
    s.hu.lung = -820.0;

    const PhantomSpec back = parse_phantom_spec(phantom_spec_to_json(s));
    CHECK(back.seed == s.seed);
    CHECK(back.dims == s.dims);
    CHECK(back.spacing.x == s.spacing.x);
    CHECK(back.body_semiaxes.y == s.body_semiaxes.y);
    CHECK(back.lung_semiaxes.z == s.lung_semiaxes.z);
    CHECK(back.lung_center_left.x == s.lung_center_left.x);
    CHECK(back.fat_thickness == s.fat_thickness);
    CHECK(back.rib_count == 12);
    CHECK(back.hu.lung == -820.0);
    CHECK(back.fov_crop == 0.1);
    CHECK(back.noise_sigma == 7.5);

    CHECK(parse_phantom_spec("{}").dims == PhantomSpec{}.dims);
    CHECK(parse_phantom_spec(R"({"noise_sigma": 0})").noise_sigma == 0.0);
    CHECK_THROWS_AS(parse_phantom_spec(R"({"sigma": 1})"), ConfigError);
    CHECK_THROWS_AS(parse_phantom_spec(R"({"hu_levels": {"metal": 3000}})"), ConfigError);
    CHECK_THROWS_AS(parse_phantom_spec("["), ConfigError);
}

TEST_CASE("generated deformations match their analytic form at voxel centres") {
    const Geometry g = make_geometry(40, 40, 40, 3.0, 3.0, 3.0, -10.0, 5.0, 0.0);
    const GeneratedDeformation gen = generate_deformation(21, g, 8.0);
    REQUIRE(gen.field.geom.same_grid(g, 1e-12));

    double max_u = 0.0;
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const Vec3 u = gen.field.at(i, j, k);
                const Vec3 a = gen.analytic.displacement(g.world(i, j, k));
                CHECK(u.x == a.x);
                CHECK(u.y == a.y);
                CHECK(u.z == a.z);
                max_u = std::max(max_u, u.norm());
            }
    // The requested peak bounds the sampled peak; the safety margin for
    // inter-voxel maxima costs at most half of it.
    CHECK(max_u <= 8.0 + 1e-9);
    CHECK(max_u >= 4.0);
}

TEST_CASE("generated deformations are provably fold free") {
    const Geometry g = make_geometry(32, 32, 32, 4.0, 4.0, 4.0);
    const GeneratedDeformation gen = generate_deformation(4, g, 9.0);
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i)
                CHECK(gen.analytic.jacobian_det(g.world(i, j, k)) > 0.0);

    // The analytic gradient agrees with central differences.
    const Vec3 x = g.world(13, 17, 9);
    double grad[3][3];
    gen.analytic.gradient(x, grad);
    const double h = 1e-4;
    for (int c = 0; c < 3; ++c) {
        Vec3 xp = x, xm = x;
        (c == 0 ? xp.x : c == 1 ? xp.y : xp.z) += h;
        (c == 0 ? xm.x : c == 1 ? xm.y : xm.z) -= h;
        const Vec3 num = (gen.analytic.displacement(xp) - gen.analytic.displacement(xm)) / (2 * h);
        CHECK(grad[0][c] == doctest::Approx(num.x).epsilon(1e-5));
        CHECK(grad[1][c] == doctest::Approx(num.y).epsilon(1e-5));
        CHECK(grad[2][c] == doctest::Approx(num.z).epsilon(1e-5));
    }
}

TEST_CASE("deformation edge cases: zero peak, negative peak, impossible peak") {
    const Geometry g = make_geometry(16, 16, 16, 4.0, 4.0, 4.0);
    const GeneratedDeformation zero = generate_deformation(9, g, 0.0);
    for (double v : zero.field.ux) CHECK(v == 0.0);
    for (double v : zero.field.uy) CHECK(v == 0.0);
    for (double v : zero.field.uz) CHECK(v == 0.0);

    CHECK_THROWS_AS(generate_deformation(9, g, -1.0), ConfigError);
    CHECK_THROWS_AS(generate_deformation(9, g, 1e6), ConfigError);

    // Determinism: the same seed reproduces the field bit for bit.
    const GeneratedDeformation a = generate_deformation(33, g, 3.0);
    const GeneratedDeformation b = generate_deformation(33, g, 3.0);
    CHECK(a.field.ux == b.field.ux);
    CHECK(a.field.uy == b.field.uy);
    CHECK(a.field.uz == b.field.uz);
    const GeneratedDeformation c = generate_deformation(34, g, 3.0);
    CHECK(a.field.ux != c.field.ux);
}
