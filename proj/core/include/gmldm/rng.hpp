// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gmldm {

// One root seed fans out into named substreams ("data", "init", "noise",
// "folds", ...) so experiment cells differ only in their declared factor.
// Derivation is a splitmix64 mix of the root seed, an FNV-1a hash of the
// stream name, and an integer index; it is stable across platforms.
uint64_t derive_seed(uint64_t root, std::string_view name, uint64_t index = 0);

// Deterministic random stream. Gaussian draws use an explicit Box-Muller
// transform instead of std::normal_distribution, whose output is
// implementation-defined.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : gen_(seed) {}
  RngStream(uint64_t root, std::string_view name, uint64_t index = 0)
      : gen_(derive_seed(root, name, index)) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi), hi > lo.
  int64_t uniform_int(int64_t lo, int64_t hi);

  // Standard normal via Box-Muller (no cached spare, state stays minimal).
  double normal();

  void fill_normal(std::span<float> out);
  void fill_normal(std::span<double> out);
  void fill_uniform(std::span<float> out, float lo, float hi);

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(0, i + 1);
      std::swap(v[i], v[static_cast<size_t>(j)]);
    }
  }

  // Engine state round-trip, used by training checkpoints.
  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 gen_;
};

}  // namespace gmldm
