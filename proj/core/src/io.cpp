// Copyright (c) 2026 the gmldm authors
// SPDX-License-Identifier: Apache-2.0
#include "gmldm/io.hpp"

#include <cstdio>
#include <cstring>

#include "gmldm/errors.hpp"

namespace gmldm::io {

namespace fs = std::filesystem;

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + p.string());
  std::string s((std::istreambuf_iterator<char>(in)),
                std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + p.string());
  return s;
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + p.string());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!out) throw IoError("write failed: " + p.string());
}

json read_json(const fs::path& p) {
  json j = json::parse(read_text(p), nullptr, false);
  if (j.is_discarded()) throw IoError("malformed JSON: " + p.string());
  return j;
}

void write_json(const fs::path& p, const json& j) {
  write_text(p, j.dump(2) + "\n");
}

std::string fmt_g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

CsvWriter::CsvWriter(const fs::path& p,
                     const std::vector<std::string>& header)
    : n_cols_(header.size()) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  out_.open(p, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("cannot open for writing: " + p.string());
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != n_cols_)
    throw ValidationError("CSV row has " + std::to_string(cells.size()) +
                          " cells, expected " + std::to_string(n_cols_));
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) out_ << ',';
    out_ << cells[i];
  }
  out_ << '\n';
  if (!out_) throw IoError("CSV write failed");
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    size_t start = 0;
    while (true) {
      size_t comma = line.find(',', start);
      if (comma == std::string::npos) {
        cells.push_back(line.substr(start));
        break;
      }
      cells.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

// ----------------------------------------------------------------- GMLC

namespace {
constexpr char kMagic[4] = {'G', 'M', 'L', 'C'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_le(std::ofstream& out, T v) {
  // this codebase targets little-endian hosts only
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void Checkpoint::add(const std::string& name, Tensor t) {
  if (has(name))
    throw ValidationError("checkpoint already holds array '" + name + "'");
  arrays.emplace_back(name, std::move(t));
}

bool Checkpoint::has(const std::string& name) const {
  for (auto& [n, t] : arrays)
    if (n == name) return true;
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (auto& [n, t] : arrays)
    if (n == name) return t;
  throw MissingArtifactError("checkpoint array not found: " + name);
}

void Checkpoint::save(const fs::path& p) const {
  json dir = json::array();
  for (auto& [name, t] : arrays)
    dir.push_back({{"name", name}, {"shape", t.shape()}});
  json header = {{"format_version", kVersion}, {"meta", meta},
                 {"arrays", dir}};
  std::string hs = header.dump();

  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + p.string());
  out.write(kMagic, 4);
  write_le<uint32_t>(out, kVersion);
  write_le<uint64_t>(out, hs.size());
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (auto& [name, t] : arrays)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!out) throw IoError("checkpoint write failed: " + p.string());
}

Checkpoint Checkpoint::load(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + p.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not a checkpoint file: " + p.string());
  uint32_t ver = read_le<uint32_t>(in);
  if (ver != kVersion)
    throw IoError("unknown checkpoint version " + std::to_string(ver) +
                  " in " + p.string());
  uint64_t hlen = read_le<uint64_t>(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated checkpoint header: " + p.string());
  json header = json::parse(hs, nullptr, false);
  if (header.is_discarded())
    throw IoError("malformed checkpoint header: " + p.string());

  Checkpoint ck;
  ck.meta = header.value("meta", json::object());
  for (auto& e : header.at("arrays")) {
    Shape shape = e.at("shape").get<Shape>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in)
      throw IoError("truncated checkpoint payload at array '" +
                    e.at("name").get<std::string>() + "': " + p.string());
    ck.arrays.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

void write_pgm(const fs::path& p, int width, int height,
               const std::vector<uint8_t>& pixels) {
  if (width <= 0 || height <= 0 ||
      pixels.size() != static_cast<size_t>(width) * static_cast<size_t>(height))
    throw ValidationError("write_pgm: pixel buffer does not match dimensions");
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + p.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("PGM write failed: " + p.string());
}

}  // namespace gmldm::io
