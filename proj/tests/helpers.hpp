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

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "ctatlas/volume.hpp"

namespace ctatlas::testutil {

inline Geometry make_geometry(int nx, int ny, int nz, double sx = 1.0, double sy = 1.0,
                              double sz = 1.0, double ox = 0.0, double oy = 0.0, double oz = 0.0) {
    Geometry g;
    g.dims = {nx, ny, nz};
    g.spacing = {sx, sy, sz};
    g.origin = {ox, oy, oz};
    return g;
}

// Uniform random HU-like payload; invalid voxels keep the kAirHU invariant.
inline Volume random_volume(const Geometry& g, std::uint64_t seed, double lo = -1100.0,
                            double hi = 3000.0, double invalid_fraction = 0.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> val(lo, hi);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Volume v(g);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        if (invalid_fraction > 0.0 && unit(rng) < invalid_fraction) {
            v.invalidate(i);
        } else {
            v.data[i] = static_cast<float>(val(rng));
        }
    }
    return v;
}

// Unique per-process scratch directory, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        static const std::uint64_t run_id = std::random_device{}();
        const auto base = std::filesystem::temp_directory_path();
        path_ = base / ("ctatlas_test_" + tag + "_" + std::to_string(run_id) + "_" +
                        std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

} // namespace ctatlas::testutil
