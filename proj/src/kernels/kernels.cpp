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

#include "ctatlas/kernels.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace ctatlas::kernels {

namespace scalar {
float sad_clamped(const float*, const float*, std::size_t);
void xcorr_lags(const float*, std::size_t, const float*, float*, std::size_t);
} // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
float sad_clamped(const float*, const float*, std::size_t);
void xcorr_lags(const float*, std::size_t, const float*, float*, std::size_t);
} // namespace avx2
namespace avx512 {
float sad_clamped(const float*, const float*, std::size_t);
void xcorr_lags(const float*, std::size_t, const float*, float*, std::size_t);
} // namespace avx512
#elif defined(__aarch64__)
namespace neon {
float sad_clamped(const float*, const float*, std::size_t);
void xcorr_lags(const float*, std::size_t, const float*, float*, std::size_t);
} // namespace neon
#endif

namespace {

const KernelTable kScalar{"scalar", &scalar::sad_clamped, &scalar::xcorr_lags};
#if defined(__x86_64__) || defined(_M_X64)
const KernelTable kAvx2{"avx2", &avx2::sad_clamped, &avx2::xcorr_lags};
const KernelTable kAvx512{"avx512", &avx512::sad_clamped, &avx512::xcorr_lags};
#elif defined(__aarch64__)
const KernelTable kNeon{"neon", &neon::sad_clamped, &neon::xcorr_lags};
#endif

std::vector<const KernelTable*> detect_tables() {
    std::vector<const KernelTable*> tables{&kScalar};
#if defined(__x86_64__) || defined(_M_X64)
    __builtin_cpu_init();
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) tables.push_back(&kAvx2);
    if (__builtin_cpu_supports("avx512f")) tables.push_back(&kAvx512);
#elif defined(__aarch64__)
    tables.push_back(&kNeon);
#endif
    return tables;
}

const KernelTable* choose_active() {
    const auto tables = available_tables();
    if (const char* env = std::getenv("CTATLAS_KERNELS")) {
        for (const auto* t : tables)
            if (std::strcmp(t->name, env) == 0) return t;
        std::fprintf(stderr, "ctatlas: CTATLAS_KERNELS=%s not available, using %s\n", env,
                     tables.back()->name);
    }
    return tables.back();
}

} // namespace

const KernelTable& scalar_table() { return kScalar; }

std::vector<const KernelTable*> available_tables() {
    static const std::vector<const KernelTable*> tables = detect_tables();
    return tables;
}

const KernelTable& active_table() {
    static const KernelTable* active = choose_active();
    return *active;
}

const KernelTable* find_table(const std::string& name) {
    for (const auto* t : available_tables())
        if (name == t->name) return t;
    return nullptr;
}

} // namespace ctatlas::kernels
