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

#include "ctatlas/segmentation.hpp"

#include <algorithm>
#include <queue>

#include "ctatlas/dt.hpp"
#include "ctatlas/errors.hpp"

namespace ctatlas {

Mask dilate_ball(const Mask& m, double r_vox) {
    const auto d2 = squared_edt(m.data, m.geom.dims.x, m.geom.dims.y, m.geom.dims.z);
    Mask out(m.geom);
    const double r2 = r_vox * r_vox;
    for (std::size_t i = 0; i < d2.size(); ++i) out.data[i] = d2[i] <= r2 ? 1 : 0;
    return out;
}

Mask erode_ball(const Mask& m, double r_vox) {
    std::vector<std::uint8_t> inv(m.data.size());
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = m.data[i] ? 0 : 1;
    const auto d2 = squared_edt(inv, m.geom.dims.x, m.geom.dims.y, m.geom.dims.z);
    Mask out(m.geom);
    const double r2 = r_vox * r_vox;
    for (std::size_t i = 0; i < d2.size(); ++i) out.data[i] = d2[i] > r2 ? 1 : 0;
    return out;
}

Mask close_ball(const Mask& m, double r_vox) { return erode_ball(dilate_ball(m, r_vox), r_vox); }

std::vector<std::int32_t> connected_components_6(const Mask& m, int* n_components) {
    const Geometry& g = m.geom;
    std::vector<std::int32_t> labels(m.data.size(), 0);
    std::vector<std::size_t> stack;
    std::int32_t next = 0;
    const int nx = g.dims.x, ny = g.dims.y, nz = g.dims.z;
    const std::size_t sx = 1, sy = nx, sz = static_cast<std::size_t>(nx) * ny;
    for (std::size_t seed = 0; seed < m.data.size(); ++seed) {
        if (!m.data[seed] || labels[seed]) continue;
        ++next;
        labels[seed] = next;
        stack.push_back(seed);
        while (!stack.empty()) {
            const std::size_t idx = stack.back();
            stack.pop_back();
            const int i = static_cast<int>(idx % nx);
            const int j = static_cast<int>((idx / nx) % ny);
            const int k = static_cast<int>(idx / sz);
            const auto visit = [&](std::size_t n) {
                if (m.data[n] && !labels[n]) {
                    labels[n] = next;
                    stack.push_back(n);
                }
            };
            if (i > 0) visit(idx - sx);
            if (i < nx - 1) visit(idx + sx);
            if (j > 0) visit(idx - sy);
            if (j < ny - 1) visit(idx + sy);
            if (k > 0) visit(idx - sz);
            if (k < nz - 1) visit(idx + sz);
        }
    }
    if (n_components) *n_components = next;
    return labels;
}

Mask largest_component(const Mask& m) {
    int n = 0;
    const auto labels = connected_components_6(m, &n);
    Mask out(m.geom);
    if (n == 0) return out;
    std::vector<std::size_t> sizes(n + 1, 0);
    for (auto l : labels)
        if (l) ++sizes[l];
    const std::int32_t best =
        static_cast<std::int32_t>(std::max_element(sizes.begin() + 1, sizes.end()) -
                                  sizes.begin());
    for (std::size_t i = 0; i < labels.size(); ++i) out.data[i] = labels[i] == best ? 1 : 0;
    return out;
}

Mask fill_holes_axial(const Mask& m) {
    const Geometry& g = m.geom;
    Mask out = m;
    const int nx = g.dims.x, ny = g.dims.y;
    std::vector<std::uint8_t> reached(static_cast<std::size_t>(nx) * ny);
    std::vector<int> stack;
    for (int k = 0; k < g.dims.z; ++k) {
        const std::size_t base = static_cast<std::size_t>(k) * nx * ny;
        std::fill(reached.begin(), reached.end(), 0);
        stack.clear();
        const auto push = [&](int i, int j) {
            const std::size_t p = static_cast<std::size_t>(j) * nx + i;
            if (!m.data[base + p] && !reached[p]) {
                reached[p] = 1;
                stack.push_back(static_cast<int>(p));
            }
        };
        for (int i = 0; i < nx; ++i) {
            push(i, 0);
            push(i, ny - 1);
        }
        for (int j = 0; j < ny; ++j) {
            push(0, j);
            push(nx - 1, j);
        }
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            const int i = p % nx, j = p / nx;
            if (i > 0) push(i - 1, j);
            if (i < nx - 1) push(i + 1, j);
            if (j > 0) push(i, j - 1);
            if (j < ny - 1) push(i, j + 1);
        }
        for (std::size_t p = 0; p < reached.size(); ++p)
            if (!m.data[base + p] && !reached[p]) out.data[base + p] = 1;
    }
    return out;
}

Mask segment_body(const Volume& hu) {
    Mask cand(hu.geom);
    for (std::size_t i = 0; i < hu.data.size(); ++i)
        cand.data[i] = (hu.valid[i] && hu.data[i] > -500.0f) ? 1 : 0;
    if (cand.count() == 0) throw DegenerateInputError("body segmentation: no tissue above -500 HU");
    Mask m = largest_component(cand);
    m = close_ball(m, 2.0);
    m = fill_holes_axial(m);
    return largest_component(m);
}

Mask segment_lung(const Volume& hu, const Mask& body) {
    const Geometry& g = hu.geom;
    Mask cand(g);
    for (std::size_t i = 0; i < hu.data.size(); ++i)
        cand.data[i] =
            (hu.valid[i] && body.data[i] && hu.data[i] >= -950.0f && hu.data[i] <= -400.0f) ? 1
                                                                                            : 0;
    int n = 0;
    const auto labels = connected_components_6(cand, &n);
    if (n == 0) throw DegenerateInputError("lung segmentation: no air-range voxels inside body");

    // A component is dropped when it meets non-body laterally: this is the
    // partial-volume shell along the skin line, never lung parenchyma.
    std::vector<std::uint8_t> touches(n + 1, 0);
    const int nx = g.dims.x, ny = g.dims.y;
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i < nx; ++i) {
                const std::int32_t l = labels[g.index(i, j, k)];
                if (!l || touches[l]) continue;
                const auto nonbody = [&](int ii, int jj) {
                    if (ii < 0 || ii >= nx || jj < 0 || jj >= ny) return true;
                    return body.data[g.index(ii, jj, k)] == 0;
                };
                if (nonbody(i - 1, j) || nonbody(i + 1, j) || nonbody(i, j - 1) ||
                    nonbody(i, j + 1))
                    touches[l] = 1;
            }

    std::vector<std::size_t> sizes(n + 1, 0);
    for (auto l : labels)
        if (l && !touches[l]) ++sizes[l];
    std::int32_t first = 0, second = 0;
    for (std::int32_t l = 1; l <= n; ++l) {
        if (sizes[l] > (first ? sizes[first] : 0)) {
            second = first;
            first = l;
        } else if (sizes[l] > (second ? sizes[second] : 0)) {
            second = l;
        }
    }
    Mask kept(g);
    if (!first || sizes[first] == 0)
        throw DegenerateInputError("lung segmentation: every candidate touches the skin line");
    const bool keep_second = second && sizes[second] * 10 >= sizes[first];
    for (std::size_t i = 0; i < labels.size(); ++i)
        kept.data[i] = (labels[i] == first || (keep_second && labels[i] == second)) ? 1 : 0;
    return close_ball(kept, 1.0);
}

Volume remove_ambient(const Volume& vol, const Mask& body) {
    if (!vol.geom.same_grid(body.geom))
        throw GeometryError("remove_ambient: volume and body grids differ");
    Volume out = vol;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        if (out.valid[i] && !body.data[i]) out.data[i] = kAirHU;
    return out;
}

PreprocessedScan preprocess_scan(const Volume& raw) {
    PreprocessedScan out;
    out.hu = raw;
    out.hu.impute_invalid();
    out.body = segment_body(out.hu);
    out.hu = remove_ambient(out.hu, out.body);
    out.lung = segment_lung(out.hu, out.body);
    return out;
}

} // namespace ctatlas
