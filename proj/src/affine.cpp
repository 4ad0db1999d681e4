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

#include "ctatlas/affine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ctatlas/errors.hpp"
#include "ctatlas/interp.hpp"
#include "ctatlas/kernels.hpp"
#include "ctatlas/parallel.hpp"
#include "ctatlas/resample.hpp"

namespace ctatlas {

namespace {

// Gaussian elimination with partial pivoting for the n x n system M x = b.
bool solve_dense(std::vector<double>& M, std::vector<double>& b, int n) {
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(M[r * n + col]) > std::abs(M[pivot * n + col])) pivot = r;
        if (std::abs(M[pivot * n + col]) < 1e-12) return false;
        if (pivot != col) {
            for (int c = 0; c < n; ++c) std::swap(M[col * n + c], M[pivot * n + c]);
            std::swap(b[col], b[pivot]);
        }
        const double inv = 1.0 / M[col * n + col];
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = M[r * n + col] * inv;
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) M[r * n + c] -= f * M[col * n + c];
            b[r] -= f * b[col];
        }
    }
    for (int i = 0; i < n; ++i) b[i] /= M[i * n + i];
    return true;
}

struct Correspondence {
    Vec3 ref;
    Vec3 mov;
};

// Least-squares affine through correspondence pairs; rows of (A | t) solve
// independent 4-unknown systems sharing the normal matrix.
Affine fit_affine(const std::vector<Correspondence>& pairs) {
    double N[16] = {0};
    double B[3][4] = {{0}};
    for (const auto& p : pairs) {
        const double X[4] = {p.ref.x, p.ref.y, p.ref.z, 1.0};
        const double Y[3] = {p.mov.x, p.mov.y, p.mov.z};
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) N[r * 4 + c] += X[r] * X[c];
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c) B[r][c] += Y[r] * X[c];
    }
    Affine out;
    for (int r = 0; r < 3; ++r) {
        std::vector<double> M(N, N + 16);
        std::vector<double> rhs(B[r], B[r] + 4);
        if (!solve_dense(M, rhs, 4))
            throw DegenerateInputError("affine: block correspondences span a degenerate subspace");
        out.A[r][0] = rhs[0];
        out.A[r][1] = rhs[1];
        out.A[r][2] = rhs[2];
        (r == 0 ? out.t.x : r == 1 ? out.t.y : out.t.z) = rhs[3];
    }
    return out;
}

// Moving-level data padded with kAirHU so the lag sweep never branches on
// grid bounds.
struct PaddedLevel {
    int pad;
    Vec3i dims; // padded
    std::vector<float> data;
    std::vector<float> data_sq;

    const float* row(int i, int j, int k) const {
        return &data[(static_cast<std::size_t>(k) * dims.y + j) * dims.x + i];
    }
    const float* row_sq(int i, int j, int k) const {
        return &data_sq[(static_cast<std::size_t>(k) * dims.y + j) * dims.x + i];
    }
};

PaddedLevel pad_level(const Volume& v, int pad, float fill) {
    PaddedLevel p;
    p.pad = pad;
    p.dims = {v.geom.dims.x + 2 * pad, v.geom.dims.y + 2 * pad, v.geom.dims.z + 2 * pad};
    p.data.assign(static_cast<std::size_t>(p.dims.x) * p.dims.y * p.dims.z, fill);
    for (int k = 0; k < v.geom.dims.z; ++k)
        for (int j = 0; j < v.geom.dims.y; ++j) {
            const float* src = &v.data[v.geom.index(0, j, k)];
            float* dst = &p.data[(static_cast<std::size_t>(k + pad) * p.dims.y + (j + pad)) *
                                     p.dims.x +
                                 pad];
            std::copy(src, src + v.geom.dims.x, dst);
        }
    p.data_sq.resize(p.data.size());
    for (std::size_t i = 0; i < p.data.size(); ++i) p.data_sq[i] = p.data[i] * p.data[i];
    return p;
}

struct BlockMatch {
    bool ok = false;
    Correspondence pair;
};

// Intensity-weighted centre of the valid body region, weights measured above
// the window floor. Degenerates to a plain centroid when everything sits at
// the floor. Returns false only for an empty region.
bool weighted_com(const Volume& clipped, const Mask& body, double window_low, Vec3* com) {
    double wsum = 0.0;
    std::size_t count = 0;
    Vec3 acc{0, 0, 0}, acc_plain{0, 0, 0};
    const Geometry& g = clipped.geom;
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const std::size_t idx = g.index(i, j, k);
                if (!clipped.valid[idx] || !body.data[idx]) continue;
                const Vec3 x = g.world(i, j, k);
                ++count;
                acc_plain += x;
                const double w = static_cast<double>(clipped.data[idx]) - window_low;
                if (w <= 0.0) continue;
                acc += x * w;
                wsum += w;
            }
    if (count == 0) return false;
    *com = wsum > 0.0 ? acc / wsum : acc_plain / static_cast<double>(count);
    return true;
}

} // namespace

Affine Affine::inverse() const {
    const double* a = &A[0][0];
    const double det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
                       a[2] * (a[3] * a[7] - a[4] * a[6]);
    if (std::abs(det) < 1e-12) throw GeometryError("affine is singular");
    Affine inv;
    inv.A[0][0] = (a[4] * a[8] - a[5] * a[7]) / det;
    inv.A[0][1] = (a[2] * a[7] - a[1] * a[8]) / det;
    inv.A[0][2] = (a[1] * a[5] - a[2] * a[4]) / det;
    inv.A[1][0] = (a[5] * a[6] - a[3] * a[8]) / det;
    inv.A[1][1] = (a[0] * a[8] - a[2] * a[6]) / det;
    inv.A[1][2] = (a[2] * a[3] - a[0] * a[5]) / det;
    inv.A[2][0] = (a[3] * a[7] - a[4] * a[6]) / det;
    inv.A[2][1] = (a[1] * a[6] - a[0] * a[7]) / det;
    inv.A[2][2] = (a[0] * a[4] - a[1] * a[3]) / det;
    inv.t = {-(inv.A[0][0] * t.x + inv.A[0][1] * t.y + inv.A[0][2] * t.z),
             -(inv.A[1][0] * t.x + inv.A[1][1] * t.y + inv.A[1][2] * t.z),
             -(inv.A[2][0] * t.x + inv.A[2][1] * t.y + inv.A[2][2] * t.z)};
    return inv;
}

Affine read_affine(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    double m[16];
    for (int i = 0; i < 16; ++i)
        if (!(in >> m[i])) throw IoError("expected 16 numbers in affine file " + path);
    Affine a;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) a.A[r][c] = m[r * 4 + c];
        (r == 0 ? a.t.x : r == 1 ? a.t.y : a.t.z) = m[r * 4 + 3];
    }
    if (std::abs(m[12]) > 1e-9 || std::abs(m[13]) > 1e-9 || std::abs(m[14]) > 1e-9 ||
        std::abs(m[15] - 1.0) > 1e-9)
        throw IoError("affine file " + path + " is not a homogeneous 4x4 matrix");
    return a;
}

void write_affine(const std::string& path, const Affine& a) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    char line[256];
    for (int r = 0; r < 3; ++r) {
        const double tr = r == 0 ? a.t.x : r == 1 ? a.t.y : a.t.z;
        std::snprintf(line, sizeof(line), "%.17g %.17g %.17g %.17g\n", a.A[r][0], a.A[r][1],
                      a.A[r][2], tr);
        out << line;
    }
    out << "0 0 0 1\n";
    if (!out) throw IoError("cannot write " + path);
}

DisplacementField affine_to_field(const Affine& a, const Geometry& g) {
    DisplacementField f(g);
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const Vec3 x = g.world(i, j, k);
                f.set(i, j, k, a.apply(x) - x);
            }
    return f;
}

DisplacementField compose_affine_field(const Affine& a, const DisplacementField& u) {
    DisplacementField out(u.geom);
    const Geometry& g = u.geom;
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) {
                const Vec3 x = g.world(i, j, k);
                out.set(i, j, k, a.apply(x + u.at(i, j, k)) - x);
            }
    return out;
}

Volume window_clip(const Volume& vol, double low, double high) {
    if (!(low < high)) throw ConfigError("window: low must be below high");
    Volume out = vol;
    const float lo = static_cast<float>(low), hi = static_cast<float>(high);
    for (float& v : out.data) v = std::clamp(v, lo, hi);
    return out;
}

Volume apply_affine(const Volume& vol, const Affine& t, const Geometry& ref_geom) {
    Volume out(ref_geom, kAirHU, false);
    const Geometry& g = ref_geom;
    parallel_for(0, g.dims.z, [&](std::int64_t klo, std::int64_t khi) {
        for (int k = static_cast<int>(klo); k < khi; ++k)
            for (int j = 0; j < g.dims.y; ++j)
                for (int i = 0; i < g.dims.x; ++i) {
                    const Sample s = trilinear_sample(vol, t.apply(g.world(i, j, k)));
                    if (!s.valid) continue;
                    const std::size_t idx = g.index(i, j, k);
                    out.data[idx] = s.value;
                    out.valid[idx] = 1;
                }
    });
    return out;
}

Mask apply_affine_mask(const Mask& m, const Affine& t, const Geometry& ref_geom) {
    Mask out(ref_geom);
    const Geometry& g = ref_geom;
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i)
                out.set(i, j, k, nearest_mask_sample(m, t.apply(g.world(i, j, k))));
    return out;
}

Affine register_affine(const Volume& reference, const Mask& reference_body, const Volume& moving,
                       const Mask& moving_body, const AffineConfig& cfg) {
    const Volume ref_c = window_clip(reference, cfg.window_low, cfg.window_high);
    const Volume mov_c = window_clip(moving, cfg.window_low, cfg.window_high);

    Affine T = Affine::identity();
    {
        Vec3 com_ref, com_mov;
        if (!weighted_com(ref_c, reference_body, cfg.window_low, &com_ref) ||
            !weighted_com(mov_c, moving_body, cfg.window_low, &com_mov))
            throw DegenerateInputError("affine: empty body mask");
        T.t = com_mov - com_ref;
    }

    const auto& kern = kernels::active_table();
    const int bs = cfg.block_size;
    const int R = cfg.search_radius_blocks * bs;
    const int nlag = 2 * R + 1;
    const std::vector<float> ones_v(bs, 1.0f);
    const float* ones = ones_v.data();
    const float pad_fill =
        static_cast<float>(std::clamp(static_cast<double>(kAirHU), cfg.window_low, cfg.window_high));

    for (const double sp : cfg.level_spacings_mm) {
        const Volume ref = resample_to_spacing(ref_c, {sp, sp, sp});
        const Volume mov = resample_to_spacing(mov_c, {sp, sp, sp});
        const Mask ref_body = resample_mask_nearest(reference_body, ref.geom);
        const PaddedLevel pad = pad_level(mov, R + bs, pad_fill);
        const Geometry& rg = ref.geom;
        const Geometry& mg = mov.geom;

        // Candidate blocks, chosen once per level on the reference.
        struct Block {
            Vec3i start;
            double variance;
        };
        std::vector<Block> blocks;
        for (int bz = 0; bz + bs <= rg.dims.z; bz += bs)
            for (int by = 0; by + bs <= rg.dims.y; by += bs)
                for (int bx = 0; bx + bs <= rg.dims.x; bx += bs) {
                    int good = 0;
                    double s = 0.0, ss = 0.0;
                    for (int dz = 0; dz < bs; ++dz)
                        for (int dy = 0; dy < bs; ++dy)
                            for (int dx = 0; dx < bs; ++dx) {
                                const std::size_t idx = rg.index(bx + dx, by + dy, bz + dz);
                                if (!ref.valid[idx] || !ref_body.data[idx]) continue;
                                ++good;
                                s += ref.data[idx];
                                ss += double(ref.data[idx]) * ref.data[idx];
                            }
                    const int total = bs * bs * bs;
                    if (good * 2 < total) continue;
                    const double var = (ss - s * s / good) / good;
                    blocks.push_back({{bx, by, bz}, var});
                }
        if (blocks.empty()) throw DegenerateInputError("affine: no usable blocks");
        const std::size_t keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(blocks.size() * cfg.keep_variance_fraction));
        std::stable_sort(blocks.begin(), blocks.end(),
                         [](const Block& a, const Block& b) { return a.variance > b.variance; });
        blocks.resize(keep);

        for (int iter = 0; iter < cfg.iterations_per_level; ++iter) {
            std::vector<BlockMatch> matches(blocks.size());
            parallel_for(0, static_cast<std::int64_t>(blocks.size()), [&](std::int64_t lo,
                                                                          std::int64_t hi) {
                std::vector<float> a_buf(bs * bs * bs);
                std::vector<float> sab(nlag), sb(nlag), sbb(nlag);
                std::vector<float> ncc(static_cast<std::size_t>(nlag) * nlag * nlag);
                for (std::int64_t bi = lo; bi < hi; ++bi) {
                    const Vec3i b = blocks[bi].start;
                    double sa = 0.0, saa = 0.0;
                    for (int dz = 0; dz < bs; ++dz)
                        for (int dy = 0; dy < bs; ++dy)
                            for (int dx = 0; dx < bs; ++dx) {
                                const float v = ref.data[rg.index(b.x + dx, b.y + dy, b.z + dz)];
                                a_buf[(dz * bs + dy) * bs + dx] = v;
                                sa += v;
                                saa += double(v) * v;
                            }
                    const int n = bs * bs * bs;
                    const double va = saa - sa * sa / n;
                    if (va < 1e-6) continue;

                    // Centre of the block mapped through the current affine,
                    // rounded to a moving voxel as the search anchor.
                    const double half = (bs - 1) / 2.0;
                    const Vec3 c_ref = rg.world(b.x, b.y, b.z) +
                                       Vec3{half * rg.spacing.x, half * rg.spacing.y,
                                            half * rg.spacing.z};
                    const Vec3 m0 = mg.voxel(T.apply(c_ref));
                    const Vec3i s0 = {static_cast<int>(std::lround(m0.x - half)),
                                      static_cast<int>(std::lround(m0.y - half)),
                                      static_cast<int>(std::lround(m0.z - half))};
                    // Entirely outside the padded interior means the anchor is
                    // nonsense; skip the block.
                    if (s0.x < -pad.pad + R || s0.y < -pad.pad + R || s0.z < -pad.pad + R ||
                        s0.x >= mg.dims.x + pad.pad - R - bs ||
                        s0.y >= mg.dims.y + pad.pad - R - bs ||
                        s0.z >= mg.dims.z + pad.pad - R - bs)
                        continue;

                    float best = -2.0f;
                    Vec3i bestd{0, 0, 0};
                    for (int dz = -R; dz <= R; ++dz) {
                        for (int dy = -R; dy <= R; ++dy) {
                            std::fill(sab.begin(), sab.end(), 0.0f);
                            std::fill(sb.begin(), sb.end(), 0.0f);
                            std::fill(sbb.begin(), sbb.end(), 0.0f);
                            for (int rz = 0; rz < bs; ++rz)
                                for (int ry = 0; ry < bs; ++ry) {
                                    const int mi = s0.x - R + pad.pad;
                                    const int mj = s0.y + dy + ry + pad.pad;
                                    const int mk = s0.z + dz + rz + pad.pad;
                                    const float* arow = &a_buf[(rz * bs + ry) * bs];
                                    kern.xcorr_lags(arow, bs, pad.row(mi, mj, mk), sab.data(),
                                                    nlag);
                                    kern.xcorr_lags(ones, bs, pad.row(mi, mj, mk), sb.data(),
                                                    nlag);
                                    kern.xcorr_lags(ones, bs, pad.row_sq(mi, mj, mk), sbb.data(),
                                                    nlag);
                                }
                            float* ncc_row = &ncc[(static_cast<std::size_t>(dz + R) * nlag +
                                                   (dy + R)) *
                                                  nlag];
                            for (int l = 0; l < nlag; ++l) {
                                const double vb = double(sbb[l]) - double(sb[l]) * sb[l] / n;
                                double v = -2.0;
                                if (vb > 1e-6) {
                                    v = (double(sab[l]) - sa * sb[l] / n) / std::sqrt(va * vb);
                                }
                                ncc_row[l] = static_cast<float>(v);
                                if (ncc_row[l] > best) {
                                    best = ncc_row[l];
                                    bestd = {l - R, dy, dz};
                                }
                            }
                        }
                    }
                    if (best <= -1.5f) continue;

                    // One parabolic refinement per axis when the neighbours
                    // exist and are genuine correlations.
                    Vec3 delta{static_cast<double>(bestd.x), static_cast<double>(bestd.y),
                               static_cast<double>(bestd.z)};
                    const auto ncc_at = [&](int dx, int dy2, int dz2) -> float {
                        return ncc[(static_cast<std::size_t>(dz2 + R) * nlag + (dy2 + R)) * nlag +
                                   (dx + R)];
                    };
                    for (int axis = 0; axis < 3; ++axis) {
                        const int q = axis == 0 ? bestd.x : axis == 1 ? bestd.y : bestd.z;
                        if (q <= -R || q >= R) continue;
                        const int dm = axis == 0 ? -1 : 0, dym = axis == 1 ? -1 : 0,
                                  dzm = axis == 2 ? -1 : 0;
                        const float cm = ncc_at(bestd.x + dm, bestd.y + dym, bestd.z + dzm);
                        const float cp = ncc_at(bestd.x - dm, bestd.y - dym, bestd.z - dzm);
                        if (cm <= -1.5f || cp <= -1.5f) continue;
                        const double denom = double(cm) - 2.0 * best + cp;
                        if (std::abs(denom) < 1e-9) continue;
                        double off = 0.5 * (double(cm) - cp) / denom;
                        if (off < -0.5 || off > 0.5) continue;
                        (axis == 0 ? delta.x : axis == 1 ? delta.y : delta.z) += off;
                    }

                    const Vec3 matched_vox{s0.x + half + delta.x, s0.y + half + delta.y,
                                           s0.z + half + delta.z};
                    matches[bi].ok = true;
                    matches[bi].pair = {c_ref, mg.world(0, 0, 0) +
                                                   Vec3{matched_vox.x * mg.spacing.x,
                                                        matched_vox.y * mg.spacing.y,
                                                        matched_vox.z * mg.spacing.z}};
                }
            });

            std::vector<Correspondence> pairs;
            pairs.reserve(matches.size());
            for (const auto& m : matches)
                if (m.ok) pairs.push_back(m.pair);
            if (pairs.size() < 12)
                throw DegenerateInputError("affine: fewer than 12 block correspondences");

            Affine fit = fit_affine(pairs);
            for (int round = 0; round < cfg.trim_rounds; ++round) {
                std::vector<std::pair<double, std::size_t>> res(pairs.size());
                for (std::size_t i = 0; i < pairs.size(); ++i)
                    res[i] = {(pairs[i].mov - fit.apply(pairs[i].ref)).norm2(), i};
                std::stable_sort(res.begin(), res.end(),
                                 [](const auto& a, const auto& b) { return a.first < b.first; });
                const std::size_t keep_n = std::max<std::size_t>(
                    12, static_cast<std::size_t>(pairs.size() * cfg.trim_fraction));
                if (keep_n >= pairs.size()) break;
                std::vector<Correspondence> trimmed;
                trimmed.reserve(keep_n);
                for (std::size_t i = 0; i < keep_n; ++i) trimmed.push_back(pairs[res[i].second]);
                pairs.swap(trimmed);
                fit = fit_affine(pairs);
            }
            T = fit;
        }
    }
    return T;
}

} // namespace ctatlas
