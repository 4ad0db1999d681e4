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
#include <random>
#include <vector>

#include "ctatlas/kernels.hpp"

using namespace ctatlas;

namespace {

std::vector<float> random_floats(std::size_t n, std::uint64_t seed, float lo, float hi) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

double sad_clamped_oracle(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::min(std::fabs(double(a[i]) - double(b[i])), 1.0);
    return acc;
}

} // namespace

TEST_CASE("kernel registry exposes the scalar reference first") {
    const auto tables = kernels::available_tables();
    REQUIRE(!tables.empty());
    CHECK(std::string(tables[0]->name) == "scalar");
    CHECK(kernels::find_table("scalar") == &kernels::scalar_table());
    CHECK(kernels::find_table("definitely_not_a_kernel") == nullptr);
    // The active table must be one of the supported ones.
    bool found = false;
    for (const auto* t : tables) found |= (t == &kernels::active_table());
    CHECK(found);
}

TEST_CASE("clamped SAD matches the scalar oracle on every available table") {
    for (const auto* table : kernels::available_tables()) {
        CAPTURE(table->name);
        for (std::size_t n : {std::size_t(1), std::size_t(3), std::size_t(8), std::size_t(15),
                              std::size_t(16), std::size_t(17), std::size_t(63), std::size_t(64),
                              std::size_t(200)}) {
            // Values straddle the clamp so both branches are exercised.
            const auto a = random_floats(n, 1000 + n, -2.0f, 2.0f);
            const auto b = random_floats(n, 2000 + n, -2.0f, 2.0f);
            const double got = table->sad_clamped(a.data(), b.data(), n);
            const double want = sad_clamped_oracle(a.data(), b.data(), n);
            CHECK(std::fabs(got - want) <= 1e-5 * std::max(1.0, want));
        }
    }
}

TEST_CASE("clamped SAD saturates at one per element") {
    std::vector<float> a(37, 5.0f), b(37, -5.0f);
    for (const auto* table : kernels::available_tables()) {
        CAPTURE(table->name);
        CHECK(table->sad_clamped(a.data(), b.data(), a.size()) == doctest::Approx(37.0));
    }
}

TEST_CASE("lagged cross correlation matches the scalar oracle on every table") {
    const std::size_t n = 97, nlag = 7;
    const auto a = random_floats(n, 11, -1.0f, 1.0f);
    const auto b = random_floats(n + nlag - 1, 13, -1.0f, 1.0f);
    std::vector<double> want(nlag, 0.0);
    for (std::size_t l = 0; l < nlag; ++l)
        for (std::size_t i = 0; i < n; ++i) want[l] += double(a[i]) * double(b[i + l]);

    for (const auto* table : kernels::available_tables()) {
        CAPTURE(table->name);
        std::vector<float> acc(nlag, 0.0f);
        table->xcorr_lags(a.data(), n, b.data(), acc.data(), nlag);
        for (std::size_t l = 0; l < nlag; ++l)
            CHECK(std::fabs(acc[l] - want[l]) <= 1e-4 * std::max(1.0, std::fabs(want[l])));
    }
}

TEST_CASE("lagged cross correlation accumulates into the output") {
    const std::size_t n = 16, nlag = 3;
    const auto a = random_floats(n, 17, -1.0f, 1.0f);
    const auto b = random_floats(n + nlag - 1, 19, -1.0f, 1.0f);
    for (const auto* table : kernels::available_tables()) {
        CAPTURE(table->name);
        std::vector<float> once(nlag, 0.0f), twice(nlag, 0.0f);
        table->xcorr_lags(a.data(), n, b.data(), once.data(), nlag);
        table->xcorr_lags(a.data(), n, b.data(), twice.data(), nlag);
        table->xcorr_lags(a.data(), n, b.data(), twice.data(), nlag);
        for (std::size_t l = 0; l < nlag; ++l)
            CHECK(twice[l] == doctest::Approx(2.0f * once[l]).epsilon(1e-4));
    }
}
