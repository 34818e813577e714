/* Copyright 2026 The cxrnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef CXR_COMMON_HPP_
#define CXR_COMMON_HPP_

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cxr {

// Error hierarchy. Everything the library throws derives from cxr::Error so
// the CLI can map it onto a single-line diagnostic.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* code() const noexcept { return "runtime"; }
};

class ArgumentError : public Error {
 public:
  using Error::Error;
  const char* code() const noexcept override { return "argument"; }
};

class SchemaError : public Error {
 public:
  using Error::Error;
  const char* code() const noexcept override { return "schema"; }
};

class DataIntegrityError : public Error {
 public:
  using Error::Error;
  const char* code() const noexcept override { return "data_integrity"; }
};

class UnsatisfiableError : public Error {
 public:
  using Error::Error;
  const char* code() const noexcept override { return "unsatisfiable"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* code() const noexcept override { return "io"; }
};

/// create_directories with failures reported as IoError.
inline void ensure_directory(const std::filesystem::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

/// Seeded random source. Every draw is derived from the raw 64-bit
/// mt19937_64 stream with hand-written mappings, so results do not depend on
/// the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent stream for (seed, stream) built with a splitmix64 mix.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);
  static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      using std::swap;
      swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);
std::string to_hex(std::uint64_t value);

/// count/total as a percentage with one decimal, rounded half-up using exact
/// integer arithmetic, e.g. (1026, 16656) -> "6.2". total must be positive.
std::string percent_one_decimal(std::uint64_t count, std::uint64_t total);

/// "count (pct%)", e.g. "1026 (6.2%)".
std::string count_with_percent(std::uint64_t count, std::uint64_t total);

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);

}  // namespace cxr

#endif  // CXR_COMMON_HPP_
