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

#include "ctatlas/corrfield.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <optional>
#include <tuple>
#include <unordered_set>

#include <json.hpp>

#include "ctatlas/dt.hpp"
#include "ctatlas/errors.hpp"
#include "ctatlas/interp.hpp"
#include "ctatlas/parallel.hpp"
#include "ctatlas/resample.hpp"

namespace ctatlas {

int default_quantization(int search_radius) { return std::max(1, search_radius / 8); }

StageConfig default_stage_config(int index) {
    static const StageConfig table[4] = {
        {2.0, 60, 30, 8, 4, 6, 4, 1.0, 7, 3},
        {2.0, 32, 16, 7, 3, 6, 4, 0.7, 4, 2},
        {2.0, 10, 6, 6, 3, 3, 2, 0.5, 1, 1},
        {1.0, 20, 10, 10, 5, 6, 4, 0.1, 2, 1},
    };
    return table[std::clamp(index, 0, 3)];
}

std::vector<StageConfig> default_stage_configs() {
    return {default_stage_config(0), default_stage_config(1), default_stage_config(2),
            default_stage_config(3)};
}

namespace {

using nlohmann::json;

int require_pos_int(const json& v, const char* key, int minimum = 1) {
    if (!v.is_number_integer())
        throw ConfigError(std::string("stage key '") + key + "' must be an integer");
    const long long x = v.get<long long>();
    if (x < minimum || x > 100000)
        throw ConfigError(std::string("stage key '") + key + "' out of range");
    return static_cast<int>(x);
}

std::pair<int, int> require_pair(const json& v, const char* key, int minimum = 1) {
    if (!v.is_array() || v.size() != 2)
        throw ConfigError(std::string("stage key '") + key +
                          "' must be a two-element array [in-plane, through-plane]");
    return {require_pos_int(v[0], key, minimum), require_pos_int(v[1], key, minimum)};
}

StageConfig parse_stage(const json& j, int index) {
    if (!j.is_object()) throw ConfigError("each stage must be a JSON object");
    StageConfig cfg = default_stage_config(index);
    bool quant_given = false;
    for (const auto& item : j.items()) {
        const std::string& key = item.key();
        const json& v = item.value();
        if (key == "resolution_mm") {
            if (!v.is_number() || v.get<double>() <= 0.0)
                throw ConfigError("stage key 'resolution_mm' must be a positive number");
            cfg.resolution_mm = v.get<double>();
        } else if (key == "search_radius") {
            std::tie(cfg.search_xy, cfg.search_z) = require_pair(v, "search_radius");
        } else if (key == "dispersion") {
            std::tie(cfg.dispersion_xy, cfg.dispersion_z) = require_pair(v, "dispersion");
        } else if (key == "patch_radius") {
            std::tie(cfg.patch_xy, cfg.patch_z) = require_pair(v, "patch_radius");
        } else if (key == "regularization") {
            if (!v.is_number() || v.get<double>() < 0.0)
                throw ConfigError("stage key 'regularization' must be a non-negative number");
            cfg.regularization = v.get<double>();
        } else if (key == "quantization") {
            quant_given = true;
            if (v.is_number_integer() && v.get<long long>() == 0) {
                cfg.quant_xy = 0;
                cfg.quant_z = 0;
            } else {
                std::tie(cfg.quant_xy, cfg.quant_z) = require_pair(v, "quantization");
            }
        } else {
            throw ConfigError("unknown stage key '" + key + "'");
        }
    }
    // Unless pinned explicitly, the step follows the (possibly overridden)
    // search radius. Materialised here: later radius halving keeps it.
    if (!quant_given || cfg.quant_xy == 0) {
        cfg.quant_xy = default_quantization(cfg.search_xy);
        cfg.quant_z = default_quantization(cfg.search_z);
    }
    if (cfg.search_xy < cfg.dispersion_xy || cfg.search_z < cfg.dispersion_z)
        throw ConfigError("stage search radius must cover the keypoint dispersion");
    if (cfg.quant_xy > cfg.search_xy || cfg.quant_z > cfg.search_z)
        throw ConfigError("stage quantization exceeds the search radius");
    return cfg;
}

} // namespace

std::vector<StageConfig> parse_stage_configs(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("invalid JSON: ") + e.what());
    }
    const json* stages = &doc;
    if (doc.is_object()) {
        if (!doc.contains("stages")) throw ConfigError("config object lacks a 'stages' array");
        stages = &doc.at("stages");
    }
    if (!stages->is_array()) throw ConfigError("'stages' must be a JSON array");
    std::vector<StageConfig> out;
    out.reserve(stages->size());
    for (std::size_t i = 0; i < stages->size(); ++i)
        out.push_back(parse_stage((*stages)[i], static_cast<int>(i)));
    return out;
}

std::string stage_configs_to_json(const std::vector<StageConfig>& stages) {
    json arr = json::array();
    for (const StageConfig& s : stages) {
        json j;
        j["resolution_mm"] = s.resolution_mm;
        j["search_radius"] = {s.search_xy, s.search_z};
        j["dispersion"] = {s.dispersion_xy, s.dispersion_z};
        j["patch_radius"] = {s.patch_xy, s.patch_z};
        j["regularization"] = s.regularization;
        j["quantization"] = {s.quant_xy, s.quant_z};
        arr.push_back(std::move(j));
    }
    json doc;
    doc["stages"] = std::move(arr);
    return doc.dump(2);
}

KeypointSet sample_keypoints(const Mask& mask, int dispersion_xy, int dispersion_z) {
    if (dispersion_xy < 1 || dispersion_z < 1)
        throw ConfigError("keypoint dispersion must be at least 1 voxel");
    KeypointSet out;
    const Geometry& g = mask.geom;

    Vec3i lo{g.dims.x, g.dims.y, g.dims.z}, hi{-1, -1, -1};
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                if (!mask.data[g.index(i, j, k)]) continue;
                lo.x = std::min(lo.x, i);
                lo.y = std::min(lo.y, j);
                lo.z = std::min(lo.z, k);
                hi.x = std::max(hi.x, i);
                hi.y = std::max(hi.y, j);
                hi.z = std::max(hi.z, k);
            }
    if (hi.x < lo.x) return out;

    // Lattice phase-centred in the bounding box: n nodes of pitch d leave
    // e-1-(n-1)d slack, half of which pads the low side.
    const int d[3] = {dispersion_xy, dispersion_xy, dispersion_z};
    int start[3], count[3];
    for (int a = 0; a < 3; ++a) {
        const int l = a == 0 ? lo.x : a == 1 ? lo.y : lo.z;
        const int h = a == 0 ? hi.x : a == 1 ? hi.y : hi.z;
        const int e = h - l + 1;
        count[a] = (e - 1) / d[a] + 1;
        start[a] = l + (e - 1 - (count[a] - 1) * d[a]) / 2;
    }

    // Snap offsets sorted by distance, ties towards smaller (z, y, x).
    struct Off {
        int r2, z, y, x;
    };
    std::vector<Off> offs;
    const int hx = dispersion_xy / 2, hz = dispersion_z / 2;
    offs.reserve(static_cast<std::size_t>(2 * hx + 1) * (2 * hx + 1) * (2 * hz + 1));
    for (int z = -hz; z <= hz; ++z)
        for (int y = -hx; y <= hx; ++y)
            for (int x = -hx; x <= hx; ++x) offs.push_back({x * x + y * y + z * z, z, y, x});
    std::sort(offs.begin(), offs.end(), [](const Off& a, const Off& b) {
        return std::tie(a.r2, a.z, a.y, a.x) < std::tie(b.r2, b.z, b.y, b.x);
    });

    std::unordered_set<std::size_t> taken;
    for (int kz = 0; kz < count[2]; ++kz)
        for (int ky = 0; ky < count[1]; ++ky)
            for (int kx = 0; kx < count[0]; ++kx) {
                const Vec3i p{start[0] + kx * d[0], start[1] + ky * d[1], start[2] + kz * d[2]};
                Vec3i snapped;
                bool found = false;
                for (const Off& o : offs) {
                    const Vec3i q{p.x + o.x, p.y + o.y, p.z + o.z};
                    if (!g.in_grid(q.x, q.y, q.z)) continue;
                    if (!mask.data[g.index(q.x, q.y, q.z)]) continue;
                    snapped = q;
                    found = true;
                    break;
                }
                if (!found) continue;
                if (!taken.insert(g.index(snapped.x, snapped.y, snapped.z)).second) continue;
                out.positions.push_back(snapped);
            }
    out.displacements.assign(out.positions.size(), Vec3{0, 0, 0});
    return out;
}

DescriptorField ssc_descriptors(const Volume& vol) {
    const Geometry& g = vol.geom;
    const std::size_t nvox = g.voxel_count();
    DescriptorField out;
    out.geom = g;
    out.data.resize(nvox * DescriptorField::kChannels);
    if (nvox == 0) return out;

    float mn = std::numeric_limits<float>::max(), mx = std::numeric_limits<float>::lowest();
    for (const float v : vol.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    const double range = std::max(0.0f, mx - mn);
    const double eps = 1e-6 * range * range;

    static const int shift[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                    {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
    std::vector<float> chan(nvox);
    for (int c = 0; c < 6; ++c) {
        const int ox = shift[c][0], oy = shift[c][1], oz = shift[c][2];
        parallel_for(0, g.dims.z, [&](std::int64_t k0, std::int64_t k1) {
            for (int k = static_cast<int>(k0); k < k1; ++k) {
                const int kk = std::clamp(k + oz, 0, g.dims.z - 1);
                for (int j = 0; j < g.dims.y; ++j) {
                    const int jj = std::clamp(j + oy, 0, g.dims.y - 1);
                    for (int i = 0; i < g.dims.x; ++i) {
                        const int ii = std::clamp(i + ox, 0, g.dims.x - 1);
                        const float diff = vol.data[g.index(i, j, k)] - vol.data[g.index(ii, jj, kk)];
                        chan[g.index(i, j, k)] = diff * diff;
                    }
                }
            }
        });
        gaussian_smooth_buffer(chan, g.dims, {1.0, 1.0, 1.0});
        for (std::size_t v = 0; v < nvox; ++v) out.data[v * 6 + c] = chan[v];
    }

    parallel_for(0, static_cast<std::int64_t>(nvox), [&](std::int64_t v0, std::int64_t v1) {
        for (std::int64_t v = v0; v < v1; ++v) {
            float* d6 = &out.data[static_cast<std::size_t>(v) * 6];
            double mean = 0.0;
            for (int c = 0; c < 6; ++c) mean += d6[c];
            const double denom = mean / 6.0 + eps;
            if (denom > 0.0) {
                for (int c = 0; c < 6; ++c) d6[c] = std::exp(-static_cast<float>(d6[c] / denom));
            } else {
                for (int c = 0; c < 6; ++c) d6[c] = 1.0f;
            }
        }
    });
    return out;
}

void apply_validity_sentinel(DescriptorField& d, const std::vector<std::uint8_t>& valid,
                             float sentinel) {
    if (valid.size() != d.geom.voxel_count())
        throw GeometryError("sentinel: validity array does not match descriptor grid");
    for (std::size_t v = 0; v < valid.size(); ++v) {
        if (valid[v]) continue;
        float* d6 = &d.data[v * 6];
        for (int c = 0; c < 6; ++c) d6[c] = sentinel;
    }
}

CandidateSet make_candidate_set(int search_xy, int search_z, int quant_xy, int quant_z,
                                const Vec3& spacing) {
    if (quant_xy < 1 || quant_z < 1) throw ConfigError("candidate quantization must be positive");
    CandidateSet c;
    c.step = {quant_xy, quant_xy, quant_z};
    c.half = {search_xy / quant_xy, search_xy / quant_xy, search_z / quant_z};
    c.step_mm = {quant_xy * spacing.x, quant_xy * spacing.y, quant_z * spacing.z};
    return c;
}

std::vector<int> patch_axis_offsets(int radius) {
    if (radius <= 2) {
        std::vector<int> out;
        for (int o = -radius; o <= radius; ++o) out.push_back(o);
        return out;
    }
    const int mid = static_cast<int>(std::lround(radius / 2.0));
    return {-radius, -mid, 0, mid, radius};
}

namespace {

// Summed-area table over "voxel is unusable or textured": a zero box on both
// sides proves every candidate cost is exactly zero, so whole rows of the
// cost table can be skipped. Ambient air normalised to a constant produces
// vast such regions.
struct FlagTable {
    Vec3i dims;
    std::vector<std::uint32_t> sat; // (nx+1)(ny+1)(nz+1)

    std::uint32_t at(int i, int j, int k) const {
        return sat[(static_cast<std::size_t>(k) * (dims.y + 1) + j) * (dims.x + 1) + i];
    }
    // Count over the closed box [a, b]; caller guarantees it lies in-grid.
    std::uint32_t box(const Vec3i& a, const Vec3i& b) const {
        const int x0 = a.x, y0 = a.y, z0 = a.z, x1 = b.x + 1, y1 = b.y + 1, z1 = b.z + 1;
        return at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) +
               at(x0, y1, z0) + at(x1, y0, z0) - at(x0, y0, z0);
    }
};

FlagTable build_flag_table(const DescriptorField& d) {
    FlagTable t;
    t.dims = d.geom.dims;
    const int nx = t.dims.x, ny = t.dims.y, nz = t.dims.z;
    t.sat.assign(static_cast<std::size_t>(nx + 1) * (ny + 1) * (nz + 1), 0);
    const auto sat_at = [&](int i, int j, int k) -> std::uint32_t& {
        return t.sat[(static_cast<std::size_t>(k) * (ny + 1) + j) * (nx + 1) + i];
    };
    for (int k = 1; k <= nz; ++k)
        for (int j = 1; j <= ny; ++j) {
            std::uint32_t row = 0;
            for (int i = 1; i <= nx; ++i) {
                const float* d6 = d.at(d.geom.index(i - 1, j - 1, k - 1));
                bool flagged = false;
                for (int c = 0; c < 6; ++c) flagged |= (d6[c] != 1.0f);
                row += flagged ? 1u : 0u;
                sat_at(i, j, k) = row + sat_at(i, j, k - 1) + sat_at(i, j - 1, k) -
                                  sat_at(i, j - 1, k - 1);
            }
        }
    return t;
}

inline bool box_in_grid(const Vec3i& a, const Vec3i& b, const Vec3i& dims) {
    return a.x >= 0 && a.y >= 0 && a.z >= 0 && b.x < dims.x && b.y < dims.y && b.z < dims.z;
}

} // namespace

std::vector<float> unary_costs(const DescriptorField& fixed_desc, const DescriptorField& mov_desc,
                               const KeypointSet& kps, const CandidateSet& cands, int patch_xy,
                               int patch_z, const kernels::KernelTable* kern) {
    if (patch_xy < 1 || patch_z < 1) throw ConfigError("patch radius must be at least 1 voxel");
    const kernels::KernelTable& kt = kern ? *kern : kernels::active_table();
    const Geometry& fg = fixed_desc.geom;
    const Geometry& mg = mov_desc.geom;
    const int m = cands.count();
    const std::size_t n = kps.size();
    std::vector<float> out(n * static_cast<std::size_t>(m));
    if (out.empty()) return out;

    const std::vector<int> ys = patch_axis_offsets(patch_xy);
    const std::vector<int> zs = patch_axis_offsets(patch_z);
    const int rxy = patch_xy;
    const int rowlen = 2 * rxy + 1;
    const double denom =
        6.0 * rowlen * static_cast<double>(ys.size()) * static_cast<double>(zs.size());

    std::vector<Vec3i> offsets(m);
    for (int c = 0; c < m; ++c) offsets[c] = cands.offset(c);

    const FlagTable fixed_flags = build_flag_table(fixed_desc);
    const FlagTable mov_flags = build_flag_table(mov_desc);
    const Vec3i reach{cands.half.x * cands.step.x, cands.half.y * cands.step.y,
                      cands.half.z * cands.step.z};

    parallel_for(0, static_cast<std::int64_t>(n), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t ki = lo; ki < hi; ++ki) {
            const Vec3i p = kps.positions[ki];
            float* row = &out[static_cast<std::size_t>(ki) * m];

            const Vec3i fa{p.x - rxy, p.y - rxy, p.z - patch_z};
            const Vec3i fb{p.x + rxy, p.y + rxy, p.z + patch_z};
            const Vec3i ma{fa.x - reach.x, fa.y - reach.y, fa.z - reach.z};
            const Vec3i mb{fb.x + reach.x, fb.y + reach.y, fb.z + reach.z};
            if (box_in_grid(fa, fb, fg.dims) && box_in_grid(ma, mb, mg.dims) &&
                fixed_flags.box(fa, fb) == 0 && mov_flags.box(ma, mb) == 0) {
                std::memset(row, 0, sizeof(float) * m);
                continue;
            }

            for (int c = 0; c < m; ++c) {
                const Vec3i off = offsets[c];
                double total = 0.0;
                for (const int oz : zs) {
                    const int rz = p.z + oz, mz = rz + off.z;
                    const bool z_ok = rz >= 0 && rz < fg.dims.z && mz >= 0 && mz < mg.dims.z;
                    for (const int oy : ys) {
                        const int ry = p.y + oy, my = ry + off.y;
                        if (!z_ok || ry < 0 || ry >= fg.dims.y || my < 0 || my >= mg.dims.y) {
                            total += 6.0 * rowlen;
                            continue;
                        }
                        const int xlo = std::max({p.x - rxy, 0, -off.x});
                        const int xhi = std::min({p.x + rxy, fg.dims.x - 1, mg.dims.x - 1 - off.x});
                        const int len = xhi - xlo + 1;
                        if (len <= 0) {
                            total += 6.0 * rowlen;
                            continue;
                        }
                        const float* fp = fixed_desc.at(fg.index(xlo, ry, rz));
                        const float* mp = mov_desc.at(mg.index(xlo + off.x, my, mz));
                        total += kt.sad_clamped(fp, mp, static_cast<std::size_t>(len) * 6);
                        total += 6.0 * (rowlen - len);
                    }
                }
                row[c] = static_cast<float>(total / denom);
            }
        }
    });
    return out;
}

namespace {

// Uniform bucket grid over points in mm; cells hold point indices in input
// order so scans stay deterministic.
struct BucketGrid {
    Vec3 lo{0, 0, 0};
    double cell = 1.0;
    Vec3i dims{1, 1, 1};
    std::vector<std::vector<int>> cells;

    Vec3i cell_of(const Vec3& p) const {
        const auto f = [&](double v, double l, int n) {
            return std::clamp(static_cast<int>(std::floor((v - l) / cell)), 0, n - 1);
        };
        return {f(p.x, lo.x, dims.x), f(p.y, lo.y, dims.y), f(p.z, lo.z, dims.z)};
    }
    const std::vector<int>& at(int i, int j, int k) const {
        return cells[(static_cast<std::size_t>(k) * dims.y + j) * dims.x + i];
    }
};

BucketGrid build_buckets(const std::vector<Vec3>& pts, double cell) {
    BucketGrid b;
    b.cell = std::max(cell, 1e-6);
    Vec3 lo = pts[0], hi = pts[0];
    for (const Vec3& p : pts) {
        lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
        hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
    b.lo = lo;
    const auto ncells = [&](double l, double h) {
        return std::max(1, static_cast<int>(std::floor((h - l) / b.cell)) + 1);
    };
    b.dims = {ncells(lo.x, hi.x), ncells(lo.y, hi.y), ncells(lo.z, hi.z)};
    b.cells.resize(static_cast<std::size_t>(b.dims.x) * b.dims.y * b.dims.z);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const Vec3i c = b.cell_of(pts[i]);
        b.cells[(static_cast<std::size_t>(c.z) * b.dims.y + c.y) * b.dims.x + c.x].push_back(
            static_cast<int>(i));
    }
    return b;
}

// Fixed-capacity nearest list ordered by (distance^2, index).
struct Nearest {
    int cap;
    std::vector<std::pair<double, int>> items; // sorted ascending

    explicit Nearest(int k) : cap(k) { items.reserve(k + 1); }

    double worst() const {
        return static_cast<int>(items.size()) < cap ? std::numeric_limits<double>::infinity()
                                                    : items.back().first;
    }
    void offer(double d2, int idx) {
        const std::pair<double, int> cand{d2, idx};
        if (static_cast<int>(items.size()) == cap && !(cand < items.back())) return;
        items.insert(std::upper_bound(items.begin(), items.end(), cand), cand);
        if (static_cast<int>(items.size()) > cap) items.pop_back();
    }
};

// Scans bucket rings outward from the query until the remaining rings
// cannot contain anything nearer than the current worst of the k kept.
void knn_scan(const BucketGrid& b, const std::vector<Vec3>& pts, const Vec3& q, Nearest& best,
              int skip_index = -1) {
    const Vec3i c = b.cell_of(q);
    const int rmax = std::max({b.dims.x, b.dims.y, b.dims.z});
    for (int r = 0; r <= rmax; ++r) {
        if (r > 0) {
            const double bound = (r - 1) * b.cell;
            if (static_cast<int>(best.items.size()) == best.cap && bound * bound > best.worst())
                break;
        }
        const int zlo = std::max(0, c.z - r), zhi = std::min(b.dims.z - 1, c.z + r);
        const int ylo = std::max(0, c.y - r), yhi = std::min(b.dims.y - 1, c.y + r);
        const int xlo = std::max(0, c.x - r), xhi = std::min(b.dims.x - 1, c.x + r);
        for (int k = zlo; k <= zhi; ++k)
            for (int j = ylo; j <= yhi; ++j)
                for (int i = xlo; i <= xhi; ++i) {
                    const int ring = std::max({std::abs(i - c.x), std::abs(j - c.y),
                                               std::abs(k - c.z)});
                    if (ring != r) continue;
                    for (const int idx : b.at(i, j, k)) {
                        if (idx == skip_index) continue;
                        const Vec3 dd = pts[idx] - q;
                        best.offer(dd.dot(dd), idx);
                    }
                }
    }
}

struct GraphEdge {
    double w;
    int u, v;
    bool operator<(const GraphEdge& o) const { return std::tie(w, u, v) < std::tie(o.w, o.u, o.v); }
};

std::vector<GraphEdge> knn_edges(const std::vector<Vec3>& pts, int k) {
    const int n = static_cast<int>(pts.size());
    std::vector<GraphEdge> edges;
    if (n < 2) return edges;
    // Cell size targets a couple of points per bucket on average.
    Vec3 mn = pts[0], mx = pts[0];
    for (const Vec3& p : pts) {
        mn = {std::min(mn.x, p.x), std::min(mn.y, p.y), std::min(mn.z, p.z)};
        mx = {std::max(mx.x, p.x), std::max(mx.y, p.y), std::max(mx.z, p.z)};
    }
    const double vol = std::max(1e-9, (mx.x - mn.x) * (mx.y - mn.y) * (mx.z - mn.z));
    const double cell = std::max(1e-3, 1.3 * std::cbrt(vol / n));
    const BucketGrid b = build_buckets(pts, cell);

    std::unordered_set<std::uint64_t> seen;
    for (int i = 0; i < n; ++i) {
        Nearest best(std::min(k, n - 1));
        knn_scan(b, pts, pts[i], best, i);
        for (const auto& [d2, j] : best.items) {
            if (d2 <= 0.0)
                throw DegenerateInputError("regularizer: duplicate keypoint positions");
            const int u = std::min(i, j), v = std::max(i, j);
            if (!seen.insert(static_cast<std::uint64_t>(u) * n + v).second) continue;
            edges.push_back({std::sqrt(d2), u, v});
        }
    }
    return edges;
}

struct Dsu {
    std::vector<int> parent;
    explicit Dsu(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    bool unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        parent[std::max(a, b)] = std::min(a, b);
        return true;
    }
};

} // namespace

SolveResult mst_regularize(const KeypointSet& kps, const Geometry& grid,
                           const std::vector<float>& costs, const CandidateSet& cands,
                           double lambda, const Vec3& root_hint_mm) {
    SolveResult res;
    const int n = static_cast<int>(kps.size());
    const int m = cands.count();
    if (n == 0) return res;
    if (costs.size() != static_cast<std::size_t>(n) * m)
        throw ConfigError("regularizer: cost table shape mismatch");

    std::vector<Vec3> pts(n);
    for (int i = 0; i < n; ++i)
        pts[i] = grid.world(kps.positions[i].x, kps.positions[i].y, kps.positions[i].z);

    res.assignment.assign(n, 0);

    // lambda = 0 decouples the keypoints: per-row argmin, first index wins.
    if (lambda == 0.0 || n == 1) {
        for (int i = 0; i < n; ++i) {
            const float* row = &costs[static_cast<std::size_t>(i) * m];
            int best = 0;
            for (int c = 1; c < m; ++c)
                if (row[c] < row[best]) best = c;
            res.assignment[i] = best;
            res.objective += row[best];
        }
        return res;
    }

    std::vector<GraphEdge> all_edges = knn_edges(pts, 8);
    std::sort(all_edges.begin(), all_edges.end());
    Dsu dsu(n);
    std::vector<std::vector<int>> adj(n);
    for (const GraphEdge& e : all_edges) {
        if (!dsu.unite(e.u, e.v)) continue;
        res.forest.push_back({e.u, e.v, e.w});
        adj[e.u].push_back(e.v);
        adj[e.v].push_back(e.u);
    }
    for (auto& a : adj) std::sort(a.begin(), a.end());

    // Root the component holding the keypoint nearest the hint there; any
    // other component roots at its lowest index.
    int hint_root = 0;
    double hint_d2 = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
        const Vec3 d = pts[i] - root_hint_mm;
        const double d2 = d.dot(d);
        if (d2 < hint_d2) {
            hint_d2 = d2;
            hint_root = i;
        }
    }
    std::vector<int> order;
    order.reserve(n);
    std::vector<int> parent(n, -1);
    std::vector<std::uint8_t> visited(n, 0);
    const auto bfs = [&](int root) {
        visited[root] = 1;
        parent[root] = -1;
        std::size_t head = order.size();
        order.push_back(root);
        while (head < order.size()) {
            const int v = order[head++];
            for (const int w : adj[v]) {
                if (visited[w]) continue;
                visited[w] = 1;
                parent[w] = v;
                order.push_back(w);
            }
        }
    };
    bfs(hint_root);
    for (int i = 0; i < n; ++i)
        if (!visited[i]) bfs(i);

    std::vector<double> len_to_parent(n, 0.0);
    for (int i = 0; i < n; ++i) {
        if (parent[i] < 0) continue;
        len_to_parent[i] = (pts[i] - pts[parent[i]]).norm();
    }

    // Min-sum over the forest: leaves push lower-envelope messages upward,
    // then assignments unroll downward. Messages are separable per axis
    // because the pair term is squared Euclidean over the candidate lattice.
    std::vector<double> reg(costs.begin(), costs.end());
    const int cx = cands.count_x(), cy = cands.count_y(), cz = cands.count_z();
    const double step2[3] = {cands.step_mm.x * cands.step_mm.x,
                             cands.step_mm.y * cands.step_mm.y,
                             cands.step_mm.z * cands.step_mm.z};

    EnvelopeScratch scratch;
    std::vector<double> msg(m), line_in(std::max({cx, cy, cz})), line_out(std::max({cx, cy, cz}));
    const auto envelope_axis = [&](std::vector<double>& f, int axis, double a) {
        const int na = axis == 0 ? cx : axis == 1 ? cy : cz;
        if (na == 1) return;
        const std::size_t stride = axis == 0 ? 1 : axis == 1 ? cx : static_cast<std::size_t>(cx) * cy;
        const int nu = axis == 0 ? cy : cx;
        const int nv = axis == 2 ? cy : cz;
        for (int v = 0; v < nv; ++v)
            for (int u = 0; u < nu; ++u) {
                std::size_t base;
                if (axis == 0)
                    base = (static_cast<std::size_t>(v) * cy + u) * cx;
                else if (axis == 1)
                    base = static_cast<std::size_t>(v) * cx * cy + u;
                else
                    base = static_cast<std::size_t>(v) * cx + u;
                for (int i = 0; i < na; ++i) line_in[i] = f[base + i * stride];
                lower_envelope_1d(line_in.data(), line_out.data(), na, a, scratch);
                for (int i = 0; i < na; ++i) f[base + i * stride] = line_out[i];
            }
    };

    for (int oi = n - 1; oi >= 1; --oi) {
        const int v = order[oi];
        const int p = parent[v];
        if (p < 0) continue;
        std::copy(reg.begin() + static_cast<std::size_t>(v) * m,
                  reg.begin() + static_cast<std::size_t>(v) * m + m, msg.begin());
        const double inv_len = 1.0 / len_to_parent[v];
        for (int axis = 0; axis < 3; ++axis)
            envelope_axis(msg, axis, lambda * step2[axis] * inv_len);
        double* prow = &reg[static_cast<std::size_t>(p) * m];
        for (int c = 0; c < m; ++c) prow[c] += msg[c];
    }

    const auto pair_cost = [&](int c_child, int c_parent, double len) {
        const int dx = c_child % cx - c_parent % cx;
        const int dy = (c_child / cx) % cy - (c_parent / cx) % cy;
        const int dz = c_child / (cx * cy) - c_parent / (cx * cy);
        return lambda * (dx * dx * step2[0] + dy * dy * step2[1] + dz * dz * step2[2]) / len;
    };

    for (const int v : order) {
        const double* row = &reg[static_cast<std::size_t>(v) * m];
        int best = 0;
        if (parent[v] < 0) {
            for (int c = 1; c < m; ++c)
                if (row[c] < row[best]) best = c;
        } else {
            const int dp = res.assignment[parent[v]];
            const double len = len_to_parent[v];
            double best_val = row[0] + pair_cost(0, dp, len);
            for (int c = 1; c < m; ++c) {
                const double val = row[c] + pair_cost(c, dp, len);
                if (val < best_val) {
                    best_val = val;
                    best = c;
                }
            }
        }
        res.assignment[v] = best;
    }

    for (int i = 0; i < n; ++i)
        res.objective += costs[static_cast<std::size_t>(i) * m + res.assignment[i]];
    for (const SolveResult::Edge& e : res.forest)
        res.objective += pair_cost(res.assignment[e.u], res.assignment[e.v], e.length_mm);
    return res;
}

DisplacementField densify(const KeypointSet& kps, const Geometry& grid, double sigma_mm) {
    const int n = static_cast<int>(kps.size());
    if (n == 0) throw DegenerateInputError("densify: empty keypoint set");
    if (sigma_mm <= 0.0) throw ConfigError("densify: sigma must be positive");

    std::vector<Vec3> pts(n);
    for (int i = 0; i < n; ++i)
        pts[i] = grid.world(kps.positions[i].x, kps.positions[i].y, kps.positions[i].z);
    const BucketGrid buckets = build_buckets(pts, sigma_mm);

    DisplacementField out(grid);
    const double inv2s2 = 1.0 / (2.0 * sigma_mm * sigma_mm);
    const int K = std::min(10, n);
    constexpr int kBlock = 4;

    const int nbx = (grid.dims.x + kBlock - 1) / kBlock;
    const int nby = (grid.dims.y + kBlock - 1) / kBlock;
    const int nbz = (grid.dims.z + kBlock - 1) / kBlock;

    parallel_for(0, nbz, [&](std::int64_t bz0, std::int64_t bz1) {
        std::vector<int> cand;
        for (int bz = static_cast<int>(bz0); bz < bz1; ++bz)
            for (int by = 0; by < nby; ++by)
                for (int bx = 0; bx < nbx; ++bx) {
                    const int x0 = bx * kBlock, x1 = std::min(grid.dims.x, x0 + kBlock);
                    const int y0 = by * kBlock, y1 = std::min(grid.dims.y, y0 + kBlock);
                    const int z0 = bz * kBlock, z1 = std::min(grid.dims.z, z0 + kBlock);
                    const Vec3 c0 = grid.world(x0, y0, z0);
                    const Vec3 c1 = grid.world(x1 - 1, y1 - 1, z1 - 1);
                    const Vec3 center = (c0 + c1) / 2.0;
                    const Vec3 halfd = (c1 - c0) / 2.0;
                    const double half_diag = halfd.norm();

                    // Superset radius: the k-th neighbour of any voxel in the
                    // block is within d_k(center) + |v - center|, so every
                    // true neighbour lies within this ball around the center.
                    Nearest probe(K);
                    knn_scan(buckets, pts, center, probe);
                    const double dk = std::sqrt(probe.items.back().first);
                    const double radius = dk + 2.0 * half_diag + 1e-9;
                    const double r2 = radius * radius;

                    cand.clear();
                    const Vec3i clo = buckets.cell_of(
                        {center.x - radius, center.y - radius, center.z - radius});
                    const Vec3i chi = buckets.cell_of(
                        {center.x + radius, center.y + radius, center.z + radius});
                    for (int ck = clo.z; ck <= chi.z; ++ck)
                        for (int cj = clo.y; cj <= chi.y; ++cj)
                            for (int ci = clo.x; ci <= chi.x; ++ci)
                                for (const int idx : buckets.at(ci, cj, ck)) {
                                    const Vec3 d = pts[idx] - center;
                                    if (d.dot(d) <= r2) cand.push_back(idx);
                                }

                    Nearest best(K);
                    for (int k = z0; k < z1; ++k)
                        for (int j = y0; j < y1; ++j)
                            for (int i = x0; i < x1; ++i) {
                                const Vec3 x = grid.world(i, j, k);
                                best.items.clear();
                                for (const int idx : cand) {
                                    const Vec3 d = pts[idx] - x;
                                    best.offer(d.dot(d), idx);
                                }
                                double wsum = 0.0;
                                Vec3 acc{0, 0, 0};
                                for (const auto& [d2, idx] : best.items) {
                                    const double w = std::exp(-d2 * inv2s2);
                                    wsum += w;
                                    acc += kps.displacements[idx] * w;
                                }
                                // Everything underflowed: nearest keypoint wins.
                                const Vec3 u = wsum > 0.0 ? acc / wsum
                                                          : kps.displacements[best.items[0].second];
                                out.set(i, j, k, u);
                            }
                }
    });
    return out;
}

KeypointSet symmetry_filter(const KeypointSet& fwd, const Geometry& grid,
                            const DisplacementField& backward_dense, double threshold_mm) {
    KeypointSet out;
    for (std::size_t i = 0; i < fwd.size(); ++i) {
        const Vec3i p = fwd.positions[i];
        const Vec3 d = fwd.displacements[i];
        const Vec3 x = grid.world(p.x, p.y, p.z);
        const Vec3 back = field_sample(backward_dense, x + d);
        const Vec3 residual = d + back;
        const double e = residual.norm();
        if (e > threshold_mm) continue;
        out.positions.push_back(p);
        out.displacements.push_back(d);
        out.consistency_error.push_back(e);
    }
    return out;
}

namespace {

struct SubStageResult {
    std::optional<DisplacementField> field;
    StageReport report;
};

SubStageResult solve_substage(const Volume& ref_s, const DescriptorField& ref_desc,
                              const Volume& mov_s, const StageConfig& cfg, int search_xy,
                              int search_z, int stage_index, int sub_index) {
    SubStageResult res;
    res.report.stage = stage_index;
    res.report.sub_stage = sub_index;

    const Geometry& g = ref_s.geom;
    Mask effective(g);
    std::size_t eff_count = 0;
    Vec3 centroid{0, 0, 0};
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const std::size_t idx = g.index(i, j, k);
                if (!ref_s.valid[idx] || !mov_s.valid[idx]) continue;
                effective.data[idx] = 1;
                centroid += g.world(i, j, k);
                ++eff_count;
            }
    if (eff_count == 0) {
        res.report.degraded = true;
        res.report.note = "empty effective region";
        return res;
    }
    centroid = centroid / static_cast<double>(eff_count);

    KeypointSet kps = sample_keypoints(effective, cfg.dispersion_xy, cfg.dispersion_z);
    res.report.keypoints = kps.size();
    if (kps.size() == 0) {
        res.report.degraded = true;
        res.report.note = "no keypoints in effective region";
        return res;
    }

    DescriptorField mov_desc = ssc_descriptors(mov_s);
    apply_validity_sentinel(mov_desc, mov_s.valid, kMovingSentinel);

    const CandidateSet cands =
        make_candidate_set(search_xy, search_z, cfg.quant_xy, cfg.quant_z, g.spacing);
    const double sigma_mm = cfg.dispersion_xy * g.spacing.x;

    {
        std::vector<float> costs =
            unary_costs(ref_desc, mov_desc, kps, cands, cfg.patch_xy, cfg.patch_z);
        const SolveResult sol = mst_regularize(kps, g, costs, cands, cfg.regularization, centroid);
        for (std::size_t i = 0; i < kps.size(); ++i)
            kps.displacements[i] = cands.offset_mm(sol.assignment[i]);
    }

    KeypointSet kps_b;
    kps_b.positions = kps.positions;
    kps_b.displacements.assign(kps.size(), Vec3{0, 0, 0});
    {
        std::vector<float> costs =
            unary_costs(mov_desc, ref_desc, kps_b, cands, cfg.patch_xy, cfg.patch_z);
        const SolveResult sol =
            mst_regularize(kps_b, g, costs, cands, cfg.regularization, centroid);
        for (std::size_t i = 0; i < kps_b.size(); ++i)
            kps_b.displacements[i] = cands.offset_mm(sol.assignment[i]);
    }
    const DisplacementField backward = densify(kps_b, g, sigma_mm);

    const double threshold = 0.5 * cfg.dispersion_xy * g.spacing.x;
    const KeypointSet kept = symmetry_filter(kps, g, backward, threshold);
    res.report.kept = kept.size();
    if (kept.size() == 0) {
        res.report.degraded = true;
        res.report.note = "symmetry filter rejected all correspondences";
        return res;
    }

    res.field = densify(kept, g, sigma_mm);
    return res;
}

} // namespace

DisplacementField run_stage(const Volume& moving, const Volume& reference, const StageConfig& cfg,
                            int stage_index, std::vector<StageReport>* reports) {
    const Vec3 res_mm{cfg.resolution_mm, cfg.resolution_mm, cfg.resolution_mm};
    Volume ref_s = resample_to_spacing(reference, res_mm);
    ref_s.impute_invalid();
    DescriptorField ref_desc = ssc_descriptors(ref_s);
    apply_validity_sentinel(ref_desc, ref_s.valid, kFixedSentinel);

    Volume mov_s = resample_to_spacing(moving, res_mm);
    mov_s.impute_invalid();

    SubStageResult a =
        solve_substage(ref_s, ref_desc, mov_s, cfg, cfg.search_xy, cfg.search_z, stage_index, 0);
    if (reports) reports->push_back(a.report);
    DisplacementField f_a = a.field ? std::move(*a.field) : identity_field(ref_s.geom);

    Volume mov_b = warp_volume(moving, f_a);
    mov_b.impute_invalid();
    SubStageResult b = solve_substage(ref_s, ref_desc, mov_b, cfg, (cfg.search_xy + 1) / 2,
                                      (cfg.search_z + 1) / 2, stage_index, 1);
    if (reports) reports->push_back(b.report);
    if (!b.field) return f_a;
    return compose_fields(*b.field, f_a);
}

DisplacementField run_pipeline(const Volume& moving, const Volume& reference,
                               const std::vector<StageConfig>& stages,
                               std::vector<StageReport>* reports) {
    if (stages.empty()) return identity_field(reference.geom);

    double finest = stages[0].resolution_mm;
    for (const StageConfig& s : stages) finest = std::min(finest, s.resolution_mm);
    const Geometry total_grid =
        resampled_geometry(reference.geom, {finest, finest, finest});

    DisplacementField total = identity_field(total_grid);
    for (std::size_t si = 0; si < stages.size(); ++si) {
        const Volume mov_cur = warp_volume(moving, resample_field(total, moving.geom));
        const DisplacementField f_stage =
            run_stage(mov_cur, reference, stages[si], static_cast<int>(si), reports);
        total = compose_fields(resample_field(f_stage, total_grid), total);
    }
    return total;
}

} // namespace ctatlas
