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

#include <stdexcept>
#include <string>

namespace ctatlas {

// Process exit codes used by the command line tool. Library code throws the
// exception types below; main() maps them back to these codes.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    io = 2,
    config = 3,
    empty_selection = 4,
    geometry = 5,
    degenerate_input = 6,
};

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    ExitCode code() const { return code_; }

private:
    ExitCode code_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(ExitCode::io, msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(ExitCode::config, msg) {}
};

class EmptySelectionError : public Error {
public:
    explicit EmptySelectionError(const std::string& msg) : Error(ExitCode::empty_selection, msg) {}
};

class GeometryError : public Error {
public:
    explicit GeometryError(const std::string& msg) : Error(ExitCode::geometry, msg) {}
};

class DegenerateInputError : public Error {
public:
    explicit DegenerateInputError(const std::string& msg) : Error(ExitCode::degenerate_input, msg) {}
};

} // namespace ctatlas
