// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>
#include <unistd.h>

#include "seqlora/persistence.hpp"
#include "seqlora/rng.hpp"

using namespace seqlora;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const char* name) {
  const fs::path d = fs::temp_directory_path() / ("seqlora_persist_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d / name;
}

}  // namespace

TEST(Persistence, HeaderLayout) {
  const Matrix a{{1.5}, {2.5}}, b{{-1.0}, {0.25}, {4.0}};
  const auto bytes = encode_factors(a, b);
  ASSERT_EQ(bytes.size(), 28u + 8u * 5u);
  EXPECT_EQ(std::memcmp(bytes.data(), "SQL1", 4), 0);
  EXPECT_EQ(bytes[4], 2u);   // n
  EXPECT_EQ(bytes[12], 3u);  // m
  EXPECT_EQ(bytes[20], 1u);  // r
  double first = 0.0;
  std::memcpy(&first, bytes.data() + 28, 8);
  EXPECT_EQ(first, 1.5);
}

TEST(Persistence, RoundTripExact) {
  Rng rng(12);
  const LoRAFactorPair p(2, gaussian_matrix(7, 3, rng), gaussian_matrix(9, 3, rng));
  const fs::path f = scratch("rt.bin");
  save_factors(f, p);
  const LoRAFactorPair q = load_factors(f, 2);
  EXPECT_EQ(q.a, p.a);
  EXPECT_EQ(q.b, p.b);
  EXPECT_EQ(q.layer, 2u);
  EXPECT_EQ(read_file_bytes(f), encode_factors(p.a, p.b));
  fs::remove_all(f.parent_path());
}

TEST(Persistence, RejectsCorruptFiles) {
  auto bytes = encode_factors(Matrix{{1.0}}, Matrix{{2.0}});
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_factors(truncated), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_factors(bad_magic), FormatError);
  auto huge = bytes;
  huge[11] = 0xff;
  EXPECT_THROW(decode_factors(huge), FormatError);
  EXPECT_THROW(decode_factors({}), FormatError);
  EXPECT_THROW(encode_factors(Matrix(2, 2), Matrix(2, 1)), DimensionError);
}

TEST(Persistence, FactorFileName) {
  EXPECT_EQ(factor_file_name(3, 1).generic_string(), "factors/concept_3_layer_1.bin");
}

TEST(Persistence, MissingFileThrows) {
  EXPECT_THROW(load_factors("/nonexistent/seqlora/x.bin"), std::runtime_error);
}
