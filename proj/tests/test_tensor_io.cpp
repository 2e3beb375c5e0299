// SPDX-License-Identifier: Apache-2.0
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "milpath/tensor.hpp"

using namespace milpath;

TEST_CASE("encoded layout is magic, version, then name/rank/dims/values") {
  Tensor t({2, 1});
  t[0] = 1.5;
  t[1] = -2.0;
  const std::vector<NamedTensor> in{{"V", t}};
  const auto bytes = encode_tensors(in);
  // 4 + 4 + (4 + 1) + 4 + 2*8 + 2*8
  REQUIRE(bytes.size() == 49);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MILW");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  CHECK(version == kTensorFormatVersion);
  std::uint32_t name_len, rank;
  std::memcpy(&name_len, bytes.data() + 8, 4);
  std::memcpy(&rank, bytes.data() + 13, 4);
  CHECK(name_len == 1);
  CHECK(bytes[12] == 'V');
  CHECK(rank == 2);
  std::uint64_t d0;
  std::memcpy(&d0, bytes.data() + 17, 8);
  CHECK(d0 == 2);
  double v1;
  std::memcpy(&v1, bytes.data() + 41, 8);
  CHECK(v1 == -2.0);
}

TEST_CASE("file round trip keeps names, shapes and bits") {
  Tensor a({3, 2, 2});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.1 * static_cast<double>(i) - 0.37;
  Tensor scalar({1}, 3.25);
  const std::vector<NamedTensor> in{{"alpha.weight", a}, {"b", scalar}};
  const auto path = std::filesystem::temp_directory_path() / "milpath_test.milw";
  write_tensors(path, in);
  const auto out = read_tensors(path);
  REQUIRE(out.size() == 2);
  CHECK(out[0].name == "alpha.weight");
  CHECK(out[0].tensor == a);
  CHECK(out[1].tensor == scalar);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt files are rejected") {
  std::vector<std::uint8_t> bad{'N', 'O', 'P', 'E', 1, 0, 0, 0};
  CHECK_THROWS(decode_tensors(bad));
  auto bytes = encode_tensors(std::vector<NamedTensor>{{"x", Tensor({4}, 1.0)}});
  bytes.pop_back();
  CHECK_THROWS_WITH(decode_tensors(bytes), "truncated tensor file");
}
