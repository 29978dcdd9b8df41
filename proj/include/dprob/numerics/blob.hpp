// SPDX-License-Identifier: Apache-2.0
//
// Tensor blob: a flat file of little-endian float32 tensors (row-major), each
// located by a manifest entry {name, shape, dtype, byte_offset, byte_length}.
#pragma once

#include "dprob/numerics/tape.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dprob {

struct BlobEntry {
  std::string name;
  std::vector<std::int64_t> shape;
  std::string dtype = "f32";
  std::uint64_t byte_offset = 0;
  std::uint64_t byte_length = 0;
};

void to_json(nlohmann::json& j, const BlobEntry& e);
void from_json(const nlohmann::json& j, BlobEntry& e);

class BlobWriter {
 public:
  template <typename T>
  void add(const std::string& name, const Matrix<T>& m) {
    add_f32(name, m.rows(), m.cols(), m.template cast<float>());
  }

  /// Writes the blob and returns its table of contents in insertion order.
  std::vector<BlobEntry> write(const std::filesystem::path& path) const;

 private:
  void add_f32(const std::string& name, Index rows, Index cols, const Matrix<float>& m);

  std::vector<BlobEntry> entries_;
  std::vector<unsigned char> bytes_;
};

/// Random access to a blob written by BlobWriter.
class BlobReader {
 public:
  BlobReader(const std::filesystem::path& path, const std::vector<BlobEntry>& entries);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const BlobEntry& entry(const std::string& name) const;
  Matrix<float> read(const std::string& name) const;

 private:
  std::vector<unsigned char> bytes_;
  std::map<std::string, BlobEntry> index_;
};

}  // namespace dprob
