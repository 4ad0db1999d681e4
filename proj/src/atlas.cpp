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

#include "ctatlas/atlas.hpp"

#include <algorithm>
#include <cmath>

#include "ctatlas/errors.hpp"
#include "ctatlas/field.hpp"
#include "ctatlas/parallel.hpp"

namespace ctatlas {

Mask standard_roi(const Mask& reference_valid, const Mask& reference_body) {
    if (!reference_valid.geom.same_grid(reference_body.geom))
        throw GeometryError("standard_roi: validity and body masks on different grids");
    Mask roi(reference_valid.geom, false);
    for (std::size_t i = 0; i < roi.data.size(); ++i)
        roi.data[i] = reference_valid.data[i] && reference_body.data[i];
    return roi;
}

Mask effective_region(const Mask& moving_valid, const DisplacementField& field, const Mask& roi) {
    if (!field.geom.same_grid(roi.geom))
        throw GeometryError("effective_region: field and ROI on different grids");
    Mask warped = warp_mask_nearest(moving_valid, field);
    for (std::size_t i = 0; i < warped.data.size(); ++i)
        warped.data[i] = warped.data[i] && roi.data[i];
    return warped;
}

namespace {

// One quantisation per scan; every later operation is exact integer
// arithmetic, so merge order cannot change a single bit.
constexpr long double kQ40 = 1099511627776.0L; // 2^40

inline std::int64_t quantise(float v) {
    double c = std::clamp(static_cast<double>(v), -kAtlasValueClamp, kAtlasValueClamp);
    return std::llround(c * static_cast<double>(kQ40));
}

} // namespace

void accumulate(AtlasAccumulator& acc, const Volume& map, const Mask& region) {
    if (!acc.geom.same_grid(map.geom) || !acc.geom.same_grid(region.geom))
        throw GeometryError("accumulate: map or region does not match the atlas grid");
    const std::int64_t n = static_cast<std::int64_t>(acc.count.size());
    parallel_for(0, n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            if (!region.data[i])
                continue;
            const std::int64_t q = quantise(map.data[i]);
            acc.sum[i] += q;
            acc.sumsq[i] += static_cast<__int128>(q) * q;
            acc.count[i] += 1;
        }
    });
}

void merge(AtlasAccumulator& acc, const AtlasAccumulator& other) {
    if (!acc.geom.same_grid(other.geom))
        throw GeometryError("merge: accumulators on different grids");
    const std::int64_t n = static_cast<std::int64_t>(acc.count.size());
    parallel_for(0, n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            acc.sum[i] += other.sum[i];
            acc.sumsq[i] += other.sumsq[i];
            acc.count[i] += other.count[i];
        }
    });
}

AtlasMoments finalize(const AtlasAccumulator& acc) {
    AtlasMoments m{Volume(acc.geom, kAirHU, false), Volume(acc.geom, kAirHU, false),
                   Volume(acc.geom, 0.0f, true)};
    const std::int64_t n = static_cast<std::int64_t>(acc.count.size());
    parallel_for(0, n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const std::uint32_t c = acc.count[i];
            m.count.data[i] = static_cast<float>(c);
            if (c == 0)
                continue;
            const long double s = static_cast<long double>(acc.sum[i]) / kQ40;
            m.mean.data[i] = static_cast<float>(s / c);
            m.mean.valid[i] = 1;
            if (c >= 2) {
                const long double ss = static_cast<long double>(acc.sumsq[i]) / (kQ40 * kQ40);
                long double var = (ss - s * s / c) / (c - 1);
                if (var < 0)
                    var = 0; // rounding can push an exact zero slightly negative
                m.variance.data[i] = static_cast<float>(var);
                m.variance.valid[i] = 1;
            }
        }
    });
    return m;
}

Volume atlas_diff(const Volume& a, const Volume& b) {
    if (!a.geom.same_grid(b.geom))
        throw GeometryError("atlas_diff: operands on different grids");
    Volume out(a.geom, kAirHU, false);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        if (a.valid[i] && b.valid[i]) {
            out.data[i] = a.data[i] - b.data[i];
            out.valid[i] = 1;
        }
    }
    return out;
}

} // namespace ctatlas
