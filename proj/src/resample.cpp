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

#include "ctatlas/resample.hpp"

#include <algorithm>
#include <cmath>

#include "ctatlas/errors.hpp"
#include "ctatlas/interp.hpp"
#include "ctatlas/parallel.hpp"

namespace ctatlas {

namespace {

void smooth_axis(std::vector<float>& data, int nx, int ny, int nz, int axis, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> w(radius + 1);
    for (int k = 0; k <= radius; ++k) w[k] = std::exp(-0.5 * (k * k) / (sigma * sigma));

    const int n = axis == 0 ? nx : (axis == 1 ? ny : nz);
    const std::size_t stride = axis == 0 ? 1
                             : (axis == 1 ? static_cast<std::size_t>(nx)
                                          : static_cast<std::size_t>(nx) * ny);
    const int nu = axis == 0 ? ny : nx;
    const int nv = axis == 2 ? ny : nz;
    std::vector<float> line(n);
    for (int v = 0; v < nv; ++v) {
        for (int u = 0; u < nu; ++u) {
            std::size_t base;
            if (axis == 0)
                base = (static_cast<std::size_t>(v) * ny + u) * nx;
            else if (axis == 1)
                base = static_cast<std::size_t>(v) * nx * ny + u;
            else
                base = static_cast<std::size_t>(v) * nx + u;
            for (int i = 0; i < n; ++i) line[i] = data[base + i * stride];
            for (int i = 0; i < n; ++i) {
                double acc = line[i] * w[0];
                double wsum = w[0];
                const int lo = std::max(0, i - radius);
                const int hi = std::min(n - 1, i + radius);
                for (int j = lo; j < i; ++j) {
                    acc += line[j] * w[i - j];
                    wsum += w[i - j];
                }
                for (int j = i + 1; j <= hi; ++j) {
                    acc += line[j] * w[j - i];
                    wsum += w[j - i];
                }
                data[base + i * stride] = static_cast<float>(acc / wsum);
            }
        }
    }
}

} // namespace

void gaussian_smooth_buffer(std::vector<float>& data, const Vec3i& dims, const Vec3& sigma_vox) {
    smooth_axis(data, dims.x, dims.y, dims.z, 0, sigma_vox.x);
    smooth_axis(data, dims.x, dims.y, dims.z, 1, sigma_vox.y);
    smooth_axis(data, dims.x, dims.y, dims.z, 2, sigma_vox.z);
}

Volume gaussian_smooth(const Volume& in, const Vec3& sigma_vox) {
    Volume out = in;
    smooth_axis(out.data, in.geom.dims.x, in.geom.dims.y, in.geom.dims.z, 0, sigma_vox.x);
    smooth_axis(out.data, in.geom.dims.x, in.geom.dims.y, in.geom.dims.z, 1, sigma_vox.y);
    smooth_axis(out.data, in.geom.dims.x, in.geom.dims.y, in.geom.dims.z, 2, sigma_vox.z);
    return out;
}

Geometry resampled_geometry(const Geometry& in, const Vec3& out_spacing) {
    if (out_spacing.x <= 0.0 || out_spacing.y <= 0.0 || out_spacing.z <= 0.0)
        throw GeometryError("resample: spacing must be positive");
    Geometry out;
    out.spacing = out_spacing;
    const auto out_dim = [](int n, double sin, double sout) {
        const double exact = n * sin / sout;
        return std::max(1, static_cast<int>(std::ceil(exact - 1e-9)));
    };
    out.dims = {out_dim(in.dims.x, in.spacing.x, out_spacing.x),
                out_dim(in.dims.y, in.spacing.y, out_spacing.y),
                out_dim(in.dims.z, in.spacing.z, out_spacing.z)};
    out.origin = {in.origin.x - in.spacing.x / 2 + out_spacing.x / 2,
                  in.origin.y - in.spacing.y / 2 + out_spacing.y / 2,
                  in.origin.z - in.spacing.z / 2 + out_spacing.z / 2};
    return out;
}

Volume resample_to_spacing(const Volume& in, const Vec3& out_spacing) {
    const Geometry out_geom = resampled_geometry(in.geom, out_spacing);

    const Vec3 sigma{0.5 * std::max(out_spacing.x / in.geom.spacing.x - 1.0, 0.0),
                     0.5 * std::max(out_spacing.y / in.geom.spacing.y - 1.0, 0.0),
                     0.5 * std::max(out_spacing.z / in.geom.spacing.z - 1.0, 0.0)};
    const bool needs_smooth = sigma.x > 0.0 || sigma.y > 0.0 || sigma.z > 0.0;
    Volume smoothed;
    const Volume& src = needs_smooth ? (smoothed = gaussian_smooth(in, sigma)) : in;

    Volume out(out_geom);
    parallel_for(0, out_geom.dims.z, [&](std::int64_t k0, std::int64_t k1) {
        for (int k = static_cast<int>(k0); k < k1; ++k)
            for (int j = 0; j < out_geom.dims.y; ++j)
                for (int i = 0; i < out_geom.dims.x; ++i) {
                    const Sample s = trilinear_sample(src, out_geom.world(i, j, k));
                    const std::size_t idx = out_geom.index(i, j, k);
                    out.data[idx] = s.value;
                    out.valid[idx] = s.valid ? 1 : 0;
                }
    });
    return out;
}

Mask resample_mask_nearest(const Mask& in, const Geometry& out_geom) {
    Mask out(out_geom);
    for (int k = 0; k < out_geom.dims.z; ++k)
        for (int j = 0; j < out_geom.dims.y; ++j)
            for (int i = 0; i < out_geom.dims.x; ++i)
                if (nearest_mask_sample(in, out_geom.world(i, j, k)))
                    out.data[out_geom.index(i, j, k)] = 1;
    return out;
}

} // namespace ctatlas
