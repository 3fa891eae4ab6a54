// SPDX-License-Identifier: Apache-2.0
//
// Binary factor files. Layout, little-endian throughout:
//   "SQL1" | u64 n | u64 m | u64 r | A (n·r doubles, row-major) | B (m·r doubles, row-major)

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "seqlora/registry.hpp"

namespace seqlora {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_factors(const Matrix& a, const Matrix& b);
/// Inverse of encode_factors; `layer` is attached to the returned pair.
LoRAFactorPair decode_factors(const std::vector<std::uint8_t>& bytes, std::size_t layer = 0);

void save_factors(const std::filesystem::path& path, const LoRAFactorPair& pair);
LoRAFactorPair load_factors(const std::filesystem::path& path, std::size_t layer = 0);

/// factors/concept_<j>_layer_<l>.bin relative to a run directory.
std::filesystem::path factor_file_name(std::size_t concept_index, std::size_t layer);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace seqlora
