// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cllab {

/// Error categories. The CLI maps each category to a distinct exit code.
enum class ErrorKind {
  kDimension = 10,
  kParameter = 11,
  kInput = 12,
  kNumeric = 13,
  kUsage = 14,
  kParse = 20,
  kConfig = 21,
  kIo = 22,
  kIntegrity = 23,
  kFetch = 24,
};

const char* ErrorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error(ErrorKind::kDimension, w) {}
};
struct ParameterError : Error {
  explicit ParameterError(const std::string& w) : Error(ErrorKind::kParameter, w) {}
};
struct InputError : Error {
  explicit InputError(const std::string& w) : Error(ErrorKind::kInput, w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error(ErrorKind::kNumeric, w) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error(ErrorKind::kUsage, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::kConfig, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::kIo, w) {}
};
struct IntegrityError : Error {
  explicit IntegrityError(const std::string& w) : Error(ErrorKind::kIntegrity, w) {}
};
/// Network or transport failure; callers may retry.
struct FetchError : Error {
  explicit FetchError(const std::string& w) : Error(ErrorKind::kFetch, w) {}
};

/// Malformed binary input. `offset` is the byte position where decoding failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& w, std::size_t offset)
      : Error(ErrorKind::kParse, w + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace cllab
