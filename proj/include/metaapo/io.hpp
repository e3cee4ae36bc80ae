// Copyright 2026 The MetaAPO Toy Authors.
//
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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "metaapo/error.hpp"

namespace metaapo::io {

/// Decimal with 17 significant digits; parses back to the identical double.
inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

inline std::string json_array(const std::vector<double>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += fmt(v[i]);
  }
  return out + "]";
}

inline std::string json_array(const std::vector<int>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out + "]";
}

/// Row-per-line nested array, e.g. logits per prompt.
template <typename T>
std::string json_matrix(const std::vector<std::vector<T>>& rows,
                        const std::string& indent = "  ") {
  std::string out = "[\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out += indent + "  " + json_array(rows[i]);
    out += (i + 1 < rows.size()) ? ",\n" : "\n";
  }
  return out + indent + "]";
}

inline void write_file(const std::filesystem::path& path,
                       const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DomainError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw DomainError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DomainError("cannot open for reading: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace metaapo::io
