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

#include <cmath>
#include <cstddef>
#include <cstdint>

namespace ctatlas {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm2() const { return dot(*this); }
    double norm() const { return std::sqrt(norm2()); }
    double operator[](int a) const { return a == 0 ? x : (a == 1 ? y : z); }
};

struct Vec3i {
    int x = 0, y = 0, z = 0;

    Vec3i operator+(const Vec3i& o) const { return {x + o.x, y + o.y, z + o.z}; }
    bool operator==(const Vec3i& o) const { return x == o.x && y == o.y && z == o.z; }
    int operator[](int a) const { return a == 0 ? x : (a == 1 ? y : z); }
};

// Axis-aligned voxel grid in world millimetres. Voxel (i,j,k) is centred at
// origin + (i,j,k) * spacing.
struct Geometry {
    Vec3i dims{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims.x) * static_cast<std::size_t>(dims.y) *
               static_cast<std::size_t>(dims.z);
    }

    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(k) * dims.y + j) * dims.x + i;
    }

    bool in_grid(int i, int j, int k) const {
        return i >= 0 && i < dims.x && j >= 0 && j < dims.y && k >= 0 && k < dims.z;
    }

    Vec3 world(int i, int j, int k) const {
        return {origin.x + i * spacing.x, origin.y + j * spacing.y, origin.z + k * spacing.z};
    }

    // Continuous voxel coordinate of a world point.
    Vec3 voxel(const Vec3& w) const {
        return {(w.x - origin.x) / spacing.x, (w.y - origin.y) / spacing.y,
                (w.z - origin.z) / spacing.z};
    }

    bool same_grid(const Geometry& o, double tol = 1e-5) const {
        return dims == o.dims && std::abs(spacing.x - o.spacing.x) <= tol &&
               std::abs(spacing.y - o.spacing.y) <= tol &&
               std::abs(spacing.z - o.spacing.z) <= tol && std::abs(origin.x - o.origin.x) <= tol &&
               std::abs(origin.y - o.origin.y) <= tol && std::abs(origin.z - o.origin.z) <= tol;
    }
};

} // namespace ctatlas
