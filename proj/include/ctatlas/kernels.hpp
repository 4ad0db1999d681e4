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

#include <cstddef>
#include <string>
#include <vector>

namespace ctatlas::kernels {

// Hot inner loops of descriptor matching and block matching. Each entry has a
// scalar reference implementation plus vectorised variants selected at
// runtime from CPU features (override with CTATLAS_KERNELS=<name>).
//
// Vector variants may reassociate sums; callers must tolerate relative
// differences of ~1e-6 against the scalar reference.
struct KernelTable {
    const char* name;

    // sum_i min(|a[i] - b[i]|, 1)
    float (*sad_clamped)(const float* a, const float* b, std::size_t n);

    // acc[l] += sum_i a[i] * b[i + l], for l in [0, nlag). b must be
    // readable over n + nlag - 1 elements.
    void (*xcorr_lags)(const float* a, std::size_t n, const float* b, float* acc,
                       std::size_t nlag);
};

const KernelTable& scalar_table();

// Variant chosen at startup; never null.
const KernelTable& active_table();

// Tables supported on this machine, scalar first.
std::vector<const KernelTable*> available_tables();

// Lookup by name among supported tables; nullptr when absent.
const KernelTable* find_table(const std::string& name);

} // namespace ctatlas::kernels
