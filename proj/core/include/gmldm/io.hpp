// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
//
// File plumbing shared by every module: JSON documents, the binary
// checkpoint container, deterministic CSV emission, and PGM images.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gmldm/tensor.hpp"

namespace gmldm::io {

using json = nlohmann::json;

std::string read_text(const std::filesystem::path& p);
void write_text(const std::filesystem::path& p, const std::string& s);
json read_json(const std::filesystem::path& p);
void write_json(const std::filesystem::path& p, const json& j);

// Shortest float formatting that round-trips doubles we care about; used for
// every CSV cell so reruns are byte-identical.
std::string fmt_g9(double v);

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& p,
            const std::vector<std::string>& header);
  void row(const std::vector<std::string>& cells);

 private:
  std::ofstream out_;
  size_t n_cols_;
};

// Minimal reader for our own CSVs (no quoting — we never emit commas in
// cells). Returns all rows including the header.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p);

// Checkpoint container: "GMLC" magic, u32 version, u64 JSON-header length,
// JSON header (meta + array directory), then raw f32le payloads in directory
// order. Round-trips bitwise.
struct Checkpoint {
  json meta;
  std::vector<std::pair<std::string, Tensor>> arrays;

  void add(const std::string& name, Tensor t);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;

  void save(const std::filesystem::path& p) const;
  static Checkpoint load(const std::filesystem::path& p);
};

void write_pgm(const std::filesystem::path& p, int width, int height,
               const std::vector<uint8_t>& pixels);

}  // namespace gmldm::io
