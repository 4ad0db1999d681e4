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

#include "ctatlas/phantom.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "ctatlas/errors.hpp"
#include "ctatlas/resample.hpp"
#include "ctatlas/rng.hpp"

namespace ctatlas {

namespace {

using nlohmann::json;

Vec3 json_vec3(const json& v, const char* key) {
    if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() ||
        !v[2].is_number())
        throw ConfigError(std::string("phantom key '") + key + "' must be [x, y, z]");
    return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

double json_num(const json& v, const char* key) {
    if (!v.is_number()) throw ConfigError(std::string("phantom key '") + key + "' must be a number");
    return v.get<double>();
}

void validate_spec(const PhantomSpec& s) {
    if (s.dims.x < 4 || s.dims.y < 4 || s.dims.z < 4)
        throw ConfigError("phantom: dims must be at least 4 voxels per axis");
    if (s.spacing.x <= 0 || s.spacing.y <= 0 || s.spacing.z <= 0)
        throw ConfigError("phantom: spacing must be positive");
    if (s.body_semiaxes.x <= 0 || s.body_semiaxes.y <= 0 || s.body_semiaxes.z <= 0 ||
        s.lung_semiaxes.x <= 0 || s.lung_semiaxes.y <= 0 || s.lung_semiaxes.z <= 0)
        throw ConfigError("phantom: semi-axes must be positive");
    if (!(s.hu.air < s.hu.lung && s.hu.lung < s.hu.fat && s.hu.fat < s.hu.soft &&
          s.hu.soft < s.hu.bone))
        throw ConfigError("phantom: HU levels must be ordered air < lung < fat < soft < bone");
    if (s.fat_thickness < 0) throw ConfigError("phantom: fat thickness must be non-negative");
    if (s.rib_count < 0) throw ConfigError("phantom: rib count must be non-negative");
    if (s.fov_crop < 0.0 || s.fov_crop >= 1.0)
        throw ConfigError("phantom: fov_crop must lie in [0, 1)");
    if (s.noise_sigma < 0.0) throw ConfigError("phantom: noise sigma must be non-negative");
}

inline double ellipsoid_rho2(const Vec3& p, const Vec3& c, const Vec3& ax) {
    const double x = (p.x - c.x) / ax.x;
    const double y = (p.y - c.y) / ax.y;
    const double z = (p.z - c.z) / ax.z;
    return x * x + y * y + z * z;
}

} // namespace

PhantomSpec parse_phantom_spec(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("invalid phantom JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("phantom spec must be a JSON object");
    PhantomSpec s;
    for (const auto& item : doc.items()) {
        const std::string& key = item.key();
        const json& v = item.value();
        if (key == "seed") {
            if (!v.is_number_unsigned() && !v.is_number_integer())
                throw ConfigError("phantom key 'seed' must be an integer");
            s.seed = v.get<std::uint64_t>();
        } else if (key == "dims") {
            const Vec3 d = json_vec3(v, "dims");
            s.dims = {static_cast<int>(d.x), static_cast<int>(d.y), static_cast<int>(d.z)};
        } else if (key == "spacing") {
            s.spacing = json_vec3(v, "spacing");
        } else if (key == "body_semiaxes") {
            s.body_semiaxes = json_vec3(v, "body_semiaxes");
        } else if (key == "lung_semiaxes") {
            s.lung_semiaxes = json_vec3(v, "lung_semiaxes");
        } else if (key == "lung_center_left") {
            s.lung_center_left = json_vec3(v, "lung_center_left");
        } else if (key == "lung_center_right") {
            s.lung_center_right = json_vec3(v, "lung_center_right");
        } else if (key == "fat_thickness") {
            s.fat_thickness = json_num(v, "fat_thickness");
        } else if (key == "rib_count") {
            s.rib_count = static_cast<int>(json_num(v, "rib_count"));
        } else if (key == "hu_levels") {
            if (!v.is_object()) throw ConfigError("phantom key 'hu_levels' must be an object");
            for (const auto& h : v.items()) {
                const double x = json_num(h.value(), h.key().c_str());
                if (h.key() == "air")
                    s.hu.air = x;
                else if (h.key() == "lung")
                    s.hu.lung = x;
                else if (h.key() == "fat")
                    s.hu.fat = x;
                else if (h.key() == "soft")
                    s.hu.soft = x;
                else if (h.key() == "bone")
                    s.hu.bone = x;
                else
                    throw ConfigError("unknown hu_levels key '" + h.key() + "'");
            }
        } else if (key == "fov_crop") {
            s.fov_crop = json_num(v, "fov_crop");
        } else if (key == "noise_sigma") {
            s.noise_sigma = json_num(v, "noise_sigma");
        } else {
            throw ConfigError("unknown phantom key '" + key + "'");
        }
    }
    validate_spec(s);
    return s;
}

std::string phantom_spec_to_json(const PhantomSpec& s) {
    json j;
    j["seed"] = s.seed;
    j["dims"] = {s.dims.x, s.dims.y, s.dims.z};
    j["spacing"] = {s.spacing.x, s.spacing.y, s.spacing.z};
    j["body_semiaxes"] = {s.body_semiaxes.x, s.body_semiaxes.y, s.body_semiaxes.z};
    j["lung_semiaxes"] = {s.lung_semiaxes.x, s.lung_semiaxes.y, s.lung_semiaxes.z};
    j["lung_center_left"] = {s.lung_center_left.x, s.lung_center_left.y, s.lung_center_left.z};
    j["lung_center_right"] = {s.lung_center_right.x, s.lung_center_right.y, s.lung_center_right.z};
    j["fat_thickness"] = s.fat_thickness;
    j["rib_count"] = s.rib_count;
    j["hu_levels"] = {{"air", s.hu.air},
                      {"lung", s.hu.lung},
                      {"fat", s.hu.fat},
                      {"soft", s.hu.soft},
                      {"bone", s.hu.bone}};
    j["fov_crop"] = s.fov_crop;
    j["noise_sigma"] = s.noise_sigma;
    return j.dump(2);
}

Volume add_hu_noise(const Volume& vol, double sigma, std::uint64_t seed) {
    Volume out = vol;
    if (sigma <= 0.0) return out;
    Rng rng(seed);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double n = rng.normal() * sigma; // one draw per voxel keeps the
        if (!out.valid[i]) continue;           // stream independent of masks
        out.data[i] = static_cast<float>(out.data[i] + n);
    }
    return out;
}

Phantom generate_phantom(const PhantomSpec& spec) {
    validate_spec(spec);

    Geometry g;
    g.dims = spec.dims;
    g.spacing = spec.spacing;
    g.origin = {-0.5 * (spec.dims.x - 1) * spec.spacing.x,
                -0.5 * (spec.dims.y - 1) * spec.spacing.y,
                -0.5 * (spec.dims.z - 1) * spec.spacing.z};

    Phantom out;
    out.hu = Volume(g, static_cast<float>(spec.hu.air), true);
    out.truth.body = Mask(g);
    out.truth.lung = Mask(g);

    // Nominal fat shell: constant fraction of the normalised radius, taken
    // from the mean semi-axis.
    const double mean_ax =
        std::cbrt(spec.body_semiaxes.x * spec.body_semiaxes.y * spec.body_semiaxes.z);
    constexpr double kPi = 3.14159265358979323846;
    const double rho_fat = std::max(0.0, 1.0 - spec.fat_thickness / mean_ax);
    const double rib_outer = std::min(1.0, rho_fat + 0.08);
    const double rib_half_angle = spec.rib_count > 0 ? 0.4 * kPi / spec.rib_count : 0.0;

    const Vec3 zero{0, 0, 0};
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const Vec3 p = g.world(i, j, k);
                const std::size_t idx = g.index(i, j, k);

                const bool in_lung = ellipsoid_rho2(p, spec.lung_center_left, spec.lung_semiaxes) <=
                                         1.0 ||
                                     ellipsoid_rho2(p, spec.lung_center_right, spec.lung_semiaxes) <=
                                         1.0;
                const double rho2 = ellipsoid_rho2(p, zero, spec.body_semiaxes);
                const bool in_body = rho2 <= 1.0;
                if (in_lung && !in_body)
                    throw ConfigError("phantom: lungs must lie strictly inside the body");

                out.truth.body.data[idx] = in_body ? 1 : 0;
                out.truth.lung.data[idx] = in_lung ? 1 : 0;

                double hu = spec.hu.air;
                if (in_lung) {
                    hu = spec.hu.lung;
                } else if (in_body) {
                    const double rho = std::sqrt(rho2);
                    bool rib = false;
                    if (spec.rib_count > 0 && rho >= rho_fat && rho <= rib_outer &&
                        std::abs(p.z) <= 0.75 * spec.body_semiaxes.z) {
                        const double theta =
                            std::atan2(p.y / spec.body_semiaxes.y, p.x / spec.body_semiaxes.x);
                        const double sector = 2.0 * kPi / spec.rib_count;
                        double local = std::fmod(theta + 2.0 * kPi, sector);
                        if (local > sector / 2.0) local -= sector;
                        rib = std::abs(local) <= rib_half_angle;
                    }
                    hu = rib ? spec.hu.bone : (rho <= rho_fat ? spec.hu.soft : spec.hu.fat);
                }
                out.hu.data[idx] = static_cast<float>(hu);
            }

    out.hu = gaussian_smooth(out.hu, {1.0, 1.0, 1.0});
    out.hu = add_hu_noise(out.hu, spec.noise_sigma, spec.seed);

    if (spec.fov_crop > 0.0) {
        const int n_crop = std::min(
            g.dims.z, static_cast<int>(std::llround(spec.fov_crop * g.dims.z)));
        for (int k = g.dims.z - n_crop; k < g.dims.z; ++k)
            for (int j = 0; j < g.dims.y; ++j)
                for (int i = 0; i < g.dims.x; ++i) out.hu.invalidate(g.index(i, j, k));
    }
    return out;
}

Vec3 SyntheticDeformation::displacement(const Vec3& x) const {
    const Vec3 r{x.x - pivot.x, x.y - pivot.y, x.z - pivot.z};
    Vec3 u{affine[0][0] * r.x + affine[0][1] * r.y + affine[0][2] * r.z + translation.x,
           affine[1][0] * r.x + affine[1][1] * r.y + affine[1][2] * r.z + translation.y,
           affine[2][0] * r.x + affine[2][1] * r.y + affine[2][2] * r.z + translation.z};
    for (const Bump& b : bumps) {
        const Vec3 d = x - b.center;
        const double w2 = b.width * b.width;
        const double gsc = std::exp(-0.5 * d.dot(d) / w2);
        u += b.amplitude * gsc;
    }
    return u;
}

void SyntheticDeformation::gradient(const Vec3& x, double g[3][3]) const {
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) g[r][c] = affine[r][c];
    for (const Bump& b : bumps) {
        const Vec3 d = x - b.center;
        const double w2 = b.width * b.width;
        const double gsc = std::exp(-0.5 * d.dot(d) / w2);
        const double fx = -d.x / w2 * gsc, fy = -d.y / w2 * gsc, fz = -d.z / w2 * gsc;
        g[0][0] += b.amplitude.x * fx;
        g[0][1] += b.amplitude.x * fy;
        g[0][2] += b.amplitude.x * fz;
        g[1][0] += b.amplitude.y * fx;
        g[1][1] += b.amplitude.y * fy;
        g[1][2] += b.amplitude.y * fz;
        g[2][0] += b.amplitude.z * fx;
        g[2][1] += b.amplitude.z * fy;
        g[2][2] += b.amplitude.z * fz;
    }
}

double SyntheticDeformation::jacobian_det(const Vec3& x) const {
    double g[3][3];
    gradient(x, g);
    const double a = 1.0 + g[0][0], b = g[0][1], c = g[0][2];
    const double d = g[1][0], e = 1.0 + g[1][1], f = g[1][2];
    const double h = g[2][0], i = g[2][1], j = 1.0 + g[2][2];
    return a * (e * j - f * i) - b * (d * j - f * h) + c * (d * i - e * h);
}

GeneratedDeformation generate_deformation(std::uint64_t seed, const Geometry& geom,
                                          double max_displacement) {
    if (max_displacement < 0.0)
        throw ConfigError("deformation: max_displacement must be non-negative");

    const Vec3 lo = geom.world(0, 0, 0);
    const Vec3 hi = geom.world(geom.dims.x - 1, geom.dims.y - 1, geom.dims.z - 1);
    const Vec3 extent = hi - lo;
    const double min_extent = std::min({extent.x, extent.y, extent.z});

    SyntheticDeformation def;
    def.pivot = (lo + hi) / 2.0;

    Rng rng(seed);
    for (int b = 0; b < 8; ++b) {
        SyntheticDeformation::Bump bump;
        bump.center = {lo.x + extent.x * (0.2 + 0.6 * rng.uniform()),
                       lo.y + extent.y * (0.2 + 0.6 * rng.uniform()),
                       lo.z + extent.z * (0.2 + 0.6 * rng.uniform())};
        Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
        const double dn = dir.norm();
        if (dn < 1e-12) dir = {1, 0, 0};
        else dir = dir / dn;
        bump.amplitude = dir * (0.5 + 0.5 * rng.uniform());
        bump.width = std::max(1.0, (0.25 + 0.10 * rng.uniform()) * min_extent);
        def.bumps.push_back(bump);
    }
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) def.affine[r][c] = rng.normal() * 0.004;
    def.translation = {rng.normal() * 0.3, rng.normal() * 0.3, rng.normal() * 0.3};

    // Sample the raw peak magnitude and worst gradient row sum at voxel
    // centres; Lipschitz cushions cover the gaps between samples.
    double peak = 0.0, worst_row = 0.0;
    for (int k = 0; k < geom.dims.z; ++k)
        for (int j = 0; j < geom.dims.y; ++j)
            for (int i = 0; i < geom.dims.x; ++i) {
                const Vec3 x = geom.world(i, j, k);
                peak = std::max(peak, def.displacement(x).norm());
                double g[3][3];
                def.gradient(x, g);
                for (int r = 0; r < 3; ++r)
                    worst_row = std::max(
                        worst_row, std::abs(g[r][0]) + std::abs(g[r][1]) + std::abs(g[r][2]));
            }
    const double half_step =
        0.5 * std::sqrt(geom.spacing.x * geom.spacing.x + geom.spacing.y * geom.spacing.y +
                        geom.spacing.z * geom.spacing.z);
    double hess = 0.0; // row-sum variation bound between neighbouring samples
    for (const auto& b : def.bumps) hess += 2.0 * b.amplitude.norm() / (b.width * b.width);
    peak += std::sqrt(3.0) * (worst_row + hess * half_step) * half_step;
    worst_row += hess * half_step;

    double scale = 0.0;
    if (max_displacement > 0.0) {
        if (peak <= 0.0) throw ConfigError("deformation: degenerate draw");
        scale = max_displacement / peak;
        if (scale * worst_row > 0.45)
            throw ConfigError(
                "deformation: max_displacement exceeds the fold-free budget for this grid");
    }
    for (auto& b : def.bumps) b.amplitude = b.amplitude * scale;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) def.affine[r][c] *= scale;
    def.translation = def.translation * scale;

    GeneratedDeformation out{DisplacementField(geom), std::move(def)};
    for (int k = 0; k < geom.dims.z; ++k)
        for (int j = 0; j < geom.dims.y; ++j)
            for (int i = 0; i < geom.dims.x; ++i)
                out.field.set(i, j, k, out.analytic.displacement(geom.world(i, j, k)));
    return out;
}

} // namespace ctatlas
