// SPDX-License-Identifier: Apache-2.0

#include "seqlora/persistence.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

namespace seqlora {

namespace {

constexpr char kMagic[4] = {'S', 'Q', 'L', '1'};
constexpr std::size_t kHeaderBytes = 4 + 3 * 8;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_doubles(std::vector<std::uint8_t>& out, const Matrix& m) {
  for (double d : m.data()) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

Matrix get_doubles(const std::uint8_t* p, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  auto data = m.data();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<double>(get_u64(p + 8 * i));
  return m;
}

}  // namespace

std::vector<std::uint8_t> encode_factors(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError(fmt::format("encode_factors: rank mismatch A {} B {}", a.shape(), b.shape()));
  }
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + 8 * (a.size() + b.size()));
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u64(out, a.rows());
  put_u64(out, b.rows());
  put_u64(out, a.cols());
  put_doubles(out, a);
  put_doubles(out, b);
  return out;
}

LoRAFactorPair decode_factors(const std::vector<std::uint8_t>& bytes, std::size_t layer) {
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a factor file (bad magic or truncated header)");
  }
  const std::uint64_t n = get_u64(bytes.data() + 4);
  const std::uint64_t m = get_u64(bytes.data() + 12);
  const std::uint64_t r = get_u64(bytes.data() + 20);
  // Guard the size arithmetic against absurd headers before multiplying.
  constexpr std::uint64_t kMaxDim = 1u << 20;
  if (n > kMaxDim || m > kMaxDim || r > kMaxDim) throw FormatError("factor file header dimensions too large");
  const std::uint64_t expected = kHeaderBytes + 8 * (n * r + m * r);
  if (bytes.size() != expected) {
    throw FormatError(fmt::format("factor file size {} does not match header (n={}, m={}, r={} needs {})",
                                  bytes.size(), n, m, r, expected));
  }
  const std::uint8_t* p = bytes.data() + kHeaderBytes;
  Matrix a = get_doubles(p, n, r);
  Matrix b = get_doubles(p + 8 * n * r, m, r);
  return LoRAFactorPair(layer, std::move(a), std::move(b));
}

void save_factors(const std::filesystem::path& path, const LoRAFactorPair& pair) {
  write_file_bytes(path, encode_factors(pair.a, pair.b));
}

LoRAFactorPair load_factors(const std::filesystem::path& path, std::size_t layer) {
  return decode_factors(read_file_bytes(path), layer);
}

std::filesystem::path factor_file_name(std::size_t concept_index, std::size_t layer) {
  return std::filesystem::path("factors") / fmt::format("concept_{}_layer_{}.bin", concept_index, layer);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(fmt::format("short write to {}", path.string()));
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

}  // namespace seqlora
