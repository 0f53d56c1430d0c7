// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#include "gmldm/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "gmldm/errors.hpp"

namespace gmldm {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

uint64_t derive_seed(uint64_t root, std::string_view name, uint64_t index) {
  uint64_t h = splitmix64(root ^ fnv1a(name));
  return splitmix64(h ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
}

int64_t RngStream::uniform_int(int64_t lo, int64_t hi) {
  if (hi <= lo) throw ValidationError("uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo);
  // Rejection sampling keeps the distribution exactly uniform.
  uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t v;
  do {
    v = gen_();
  } while (v >= limit);
  return lo + static_cast<int64_t>(v % span);
}

double RngStream::normal() {
  // u1 in (0,1], u2 in [0,1).
  double u1 = (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

void RngStream::fill_normal(std::span<float> out) {
  for (float& v : out) v = static_cast<float>(normal());
}

void RngStream::fill_normal(std::span<double> out) {
  for (double& v : out) v = normal();
}

void RngStream::fill_uniform(std::span<float> out, float lo, float hi) {
  for (float& v : out) v = lo + static_cast<float>(uniform()) * (hi - lo);
}

std::string RngStream::state() const {
  std::ostringstream os;
  os << gen_;
  return os.str();
}

void RngStream::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> gen_;
  if (is.fail()) throw ValidationError("RngStream: malformed engine state");
}

}  // namespace gmldm
