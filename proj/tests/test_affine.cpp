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

#include "ctatlas/affine.hpp"
#include "ctatlas/errors.hpp"
#include "ctatlas/phantom.hpp"
#include "ctatlas/segmentation.hpp"

#include "helpers.hpp"

using namespace ctatlas;
using testutil::make_geometry;
using testutil::TempDir;

namespace {

// Mid-size phantom keeps the affine tests fast while leaving enough texture
// for block matching.
struct AffineFixture {
    Phantom phantom;
    PreprocessedScan scan;

    AffineFixture() {
        PhantomSpec spec;
        spec.seed = 7;
        spec.dims = {64, 64, 64};
        spec.spacing = {3.0, 3.0, 3.0};
        phantom = generate_phantom(spec);
        scan = preprocess_scan(phantom.hu);
    }
};

const AffineFixture& fixture() {
    static const AffineFixture f;
    return f;
}

// Pyramid levels matched to the 3 mm fixture so the tests stay quick.
AffineConfig fixture_config() {
    AffineConfig cfg;
    cfg.level_spacings_mm = {6.0, 3.0};
    return cfg;
}

double linear_deviation(const Affine& a, const Affine& b) {
    double worst = 0.0;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(a.A[r][c] - b.A[r][c]));
    return worst;
}

} // namespace

TEST_CASE("window clipping clamps values and keeps validity") {
    const Geometry g = make_geometry(3, 1, 1);
    Volume v(g);
    v.set(0, 0, 0, -200.0f);
    v.set(1, 0, 0, 1500.0f);
    v.set(2, 0, 0, 500.0f);
    v.invalidate(g.index(2, 0, 0));

    const Volume c = window_clip(v, 0.0, 1000.0);
    CHECK(c.at(0, 0, 0) == 0.0f);
    CHECK(c.at(1, 0, 0) == 1000.0f);
    CHECK_FALSE(c.is_valid(2, 0, 0));

    Volume mid(g, 500.0f);
    CHECK(window_clip(mid, 0.0, 1000.0).at(1, 0, 0) == 500.0f);
}

TEST_CASE("affine inverse round trips points") {
    Affine a;
    a.A[0][0] = 1.1;
    a.A[0][1] = 0.05;
    a.A[1][1] = 0.95;
    a.A[2][2] = 1.02;
    a.A[1][2] = -0.03;
    a.t = {4.0, -7.0, 2.5};
    const Affine inv = a.inverse();
    const Vec3 p{12.0, -5.0, 30.0};
    const Vec3 back = inv.apply(a.apply(p));
    CHECK(std::abs(back.x - p.x) < 1e-9);
    CHECK(std::abs(back.y - p.y) < 1e-9);
    CHECK(std::abs(back.z - p.z) < 1e-9);

    Affine singular;
    singular.A[1][1] = 0.0;
    CHECK_THROWS_AS(singular.inverse(), GeometryError);
}

TEST_CASE("affine matrices round trip through the text format") {
    TempDir tmp("affine_txt");
    Affine a;
    a.A[0][2] = 0.125;
    a.A[2][1] = -0.0625;
    a.t = {1.5, 2.25, -3.0};
    const std::string path = tmp.file("a.txt");
    write_affine(path, a);
    const Affine r = read_affine(path);
    CHECK(linear_deviation(a, r) == 0.0);
    CHECK(r.t.x == a.t.x);
    CHECK(r.t.y == a.t.y);
    CHECK(r.t.z == a.t.z);
    CHECK_THROWS_AS(read_affine(tmp.file("missing.txt")), IoError);
}

TEST_CASE("resampling through the identity affine reproduces voxel centres") {
    const auto& f = fixture();
    const Volume out = apply_affine(f.phantom.hu, Affine::identity(), f.phantom.hu.geom);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        CHECK(out.valid[i] == f.phantom.hu.valid[i]);
        if (out.valid[i]) CHECK(out.data[i] == f.phantom.hu.data[i]);
    }
}

TEST_CASE("resampling through a one-voxel shift relabels and invalidates inflow") {
    const Geometry g = make_geometry(8, 8, 8, 2.0, 2.0, 2.0);
    const Volume v = testutil::random_volume(g, 5, 0.0, 100.0, 0.0);
    Affine shift;
    shift.t = {2.0, 0.0, 0.0};
    const Volume out = apply_affine(v, shift, g);
    for (int k = 0; k < 8; ++k)
        for (int j = 0; j < 8; ++j) {
            for (int i = 0; i < 7; ++i) CHECK(out.at(i, j, k) == v.at(i + 1, j, k));
            CHECK_FALSE(out.is_valid(7, j, k));
        }

    Mask m(g, 0);
    m.set(4, 4, 4, 1);
    const Mask mm = apply_affine_mask(m, shift, g);
    CHECK(mm.at(3, 4, 4) == 1);
    CHECK(mm.count() == 1);
}

TEST_CASE("self registration recovers the identity") {
    const auto& f = fixture();
    const Affine a =
        register_affine(f.scan.hu, f.scan.body, f.scan.hu, f.scan.body, fixture_config());
    CHECK(a.t.norm() < 0.1);
    CHECK(linear_deviation(a, Affine::identity()) < 0.005);
}

TEST_CASE("a known translation is recovered within half a millimetre") {
    const auto& f = fixture();
    Affine shift;
    shift.t = {10.0, -6.0, 4.0};
    // moving(x) = reference(shift(x)), so the recovered pull-back map must
    // invert the shift.
    const Volume moving = apply_affine(f.scan.hu, shift, f.scan.hu.geom);
    const Mask moving_body = apply_affine_mask(f.scan.body, shift, f.scan.hu.geom);
    const Affine a = register_affine(f.scan.hu, f.scan.body, moving, moving_body, fixture_config());
    CHECK(std::abs(a.t.x + 10.0) < 0.5);
    CHECK(std::abs(a.t.y - 6.0) < 0.5);
    CHECK(std::abs(a.t.z - 4.0) < 0.5);
    CHECK(linear_deviation(a, Affine::identity()) < 0.01);
}

TEST_CASE("a known uniform scale is recovered within one percent") {
    const auto& f = fixture();
    const Geometry& g = f.scan.hu.geom;
    const Vec3 centre = {g.origin.x + 0.5 * (g.dims.x - 1) * g.spacing.x,
                         g.origin.y + 0.5 * (g.dims.y - 1) * g.spacing.y,
                         g.origin.z + 0.5 * (g.dims.z - 1) * g.spacing.z};
    const double s = 1.05;
    Affine scale;
    for (int r = 0; r < 3; ++r) scale.A[r][r] = s;
    scale.t = centre * (1.0 - s);

    const Volume moving = apply_affine(f.scan.hu, scale, g);
    const Mask moving_body = apply_affine_mask(f.scan.body, scale, g);
    const Affine a = register_affine(f.scan.hu, f.scan.body, moving, moving_body, fixture_config());
    for (int r = 0; r < 3; ++r) CHECK(std::abs(a.A[r][r] - 1.0 / s) < 0.01);
}

TEST_CASE("a constant intensity offset does not move the registration") {
    const auto& f = fixture();
    Affine shift;
    shift.t = {6.0, 0.0, -4.0};
    const Volume moving = apply_affine(f.scan.hu, shift, f.scan.hu.geom);
    const Mask moving_body = apply_affine_mask(f.scan.body, shift, f.scan.hu.geom);

    Volume offset = moving;
    for (std::size_t i = 0; i < offset.data.size(); ++i)
        if (offset.valid[i]) offset.data[i] += 200.0f;

    const Affine plain =
        register_affine(f.scan.hu, f.scan.body, moving, moving_body, fixture_config());
    const Affine shifted =
        register_affine(f.scan.hu, f.scan.body, offset, moving_body, fixture_config());
    CHECK((plain.t - shifted.t).norm() < 0.5);
    CHECK(linear_deviation(plain, shifted) < 0.01);
}

TEST_CASE("registration needs at least a dozen usable blocks") {
    const Geometry g = make_geometry(6, 6, 6, 2.0, 2.0, 2.0);
    Volume tiny(g, 40.0f);
    Mask body(g, 0);
    body.set(3, 3, 3, 1);
    CHECK_THROWS_AS(register_affine(tiny, body, tiny, body, AffineConfig{}), DegenerateInputError);
}

TEST_CASE("affine registration is deterministic") {
    const auto& f = fixture();
    Affine shift;
    shift.t = {5.0, 3.0, -2.0};
    const Volume moving = apply_affine(f.scan.hu, shift, f.scan.hu.geom);
    const Mask moving_body = apply_affine_mask(f.scan.body, shift, f.scan.hu.geom);
    const Affine a = register_affine(f.scan.hu, f.scan.body, moving, moving_body, fixture_config());
    const Affine b = register_affine(f.scan.hu, f.scan.body, moving, moving_body, fixture_config());
    CHECK(linear_deviation(a, b) == 0.0);
    CHECK((a.t - b.t).norm() == 0.0);
}
