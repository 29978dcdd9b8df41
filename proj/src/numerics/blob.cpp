// SPDX-License-Identifier: Apache-2.0
#include "dprob/numerics/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace dprob {

namespace {

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

}  // namespace

void to_json(nlohmann::json& j, const BlobEntry& e) {
  j = nlohmann::json{{"name", e.name},
                     {"shape", e.shape},
                     {"dtype", e.dtype},
                     {"byte_offset", e.byte_offset},
                     {"byte_length", e.byte_length}};
}

void from_json(const nlohmann::json& j, BlobEntry& e) {
  j.at("name").get_to(e.name);
  j.at("shape").get_to(e.shape);
  j.at("dtype").get_to(e.dtype);
  j.at("byte_offset").get_to(e.byte_offset);
  j.at("byte_length").get_to(e.byte_length);
}

void BlobWriter::add_f32(const std::string& name, Index rows, Index cols, const Matrix<float>& m) {
  BlobEntry e;
  e.name = name;
  e.shape = {static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols)};
  e.byte_offset = bytes_.size();
  e.byte_length = static_cast<std::uint64_t>(m.size()) * 4u;
  bytes_.resize(bytes_.size() + e.byte_length);
  unsigned char* dst = bytes_.data() + e.byte_offset;
  for (Index i = 0; i < m.size(); ++i) {
    const std::uint32_t le = to_little(std::bit_cast<std::uint32_t>(m.data()[i]));
    std::memcpy(dst + 4 * i, &le, 4);
  }
  entries_.push_back(std::move(e));
}

std::vector<BlobEntry> BlobWriter::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
  return entries_;
}

BlobReader::BlobReader(const std::filesystem::path& path, const std::vector<BlobEntry>& entries) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open blob " + path.string());
  bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  for (const auto& e : entries) {
    if (e.dtype != "f32") throw std::runtime_error("blob entry " + e.name + ": unsupported dtype " + e.dtype);
    if (e.shape.size() != 2) throw std::runtime_error("blob entry " + e.name + ": expected a 2-d shape");
    if (e.byte_length != static_cast<std::uint64_t>(e.shape[0] * e.shape[1]) * 4u)
      throw std::runtime_error("blob entry " + e.name + ": byte_length disagrees with shape");
    if (e.byte_offset + e.byte_length > bytes_.size())
      throw std::runtime_error("blob entry " + e.name + ": extends past end of blob");
    index_[e.name] = e;
  }
}

const BlobEntry& BlobReader::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::runtime_error("blob has no tensor named " + name);
  return it->second;
}

Matrix<float> BlobReader::read(const std::string& name) const {
  const BlobEntry& e = entry(name);
  Matrix<float> m(e.shape[0], e.shape[1]);
  const unsigned char* src = bytes_.data() + e.byte_offset;
  for (Index i = 0; i < m.size(); ++i) {
    std::uint32_t le;
    std::memcpy(&le, src + 4 * i, 4);
    m.data()[i] = std::bit_cast<float>(to_little(le));
  }
  return m;
}

}  // namespace dprob
