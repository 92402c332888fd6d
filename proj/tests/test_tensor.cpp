// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <array>
#include <cmath>

#include "cptlab/error.hpp"
#include "cptlab/rng.hpp"
#include "cptlab/tensor.hpp"
#include "cptlab/text.hpp"

using namespace cptlab;

namespace {

// Reference xoshiro256** seeded through splitmix64, written from the
// published algorithm descriptions.
struct RefRng {
  std::array<std::uint64_t, 4> s{};
  explicit RefRng(std::uint64_t seed) {
    for (auto& w : s) {
      seed += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = seed;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      w = z ^ (z >> 31);
    }
  }
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t next() {
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }
};

}  // namespace

TEST_CASE("tensor shape must match data") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 0}, {}), DimensionError);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.row_width() == 3);
  CHECK(t.at(1, 2) == 6);
}

TEST_CASE("bitwise equality distinguishes signed zeros") {
  Tensor a({1}, {0.0});
  Tensor b({1}, {-0.0});
  CHECK(a.data[0] == b.data[0]);
  CHECK_FALSE(bitwise_equal(a, b));
  CHECK(tensor_hash(a) != tensor_hash(b));
  CHECK(bitwise_equal(a, Tensor({1}, {0.0})));
}

TEST_CASE("rng matches the reference generator") {
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xdeadbeefULL}) {
    Rng rng(seed);
    RefRng ref(seed);
    for (int i = 0; i < 1000; ++i) REQUIRE(rng.next_u64() == ref.next());
  }
}

TEST_CASE("rng streams are reproducible and bounded") {
  Rng a(7);
  Rng b(7);
  for (int i = 0; i < 100; ++i) {
    const double u = a.uniform();
    CHECK(u == b.uniform());
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  Rng c(9);
  for (int i = 0; i < 1000; ++i) CHECK(c.below(7) < 7);
  CHECK(derive_seed(1, "init") != derive_seed(1, "stream"));
  CHECK(derive_seed(1, "init") == derive_seed(1, "init"));
}

TEST_CASE("normal draws have roughly unit variance") {
  Rng rng(3);
  double sum = 0.0;
  double sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("fnv1a64 known vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("byte escaping round-trips every byte") {
  std::string all;
  for (int c = 0; c < 256; ++c) all.push_back(static_cast<char>(c));
  const auto escaped = escape_bytes(all);
  CHECK(escaped.find(' ') == std::string::npos);
  CHECK(unescape_bytes(escaped) == all);
  CHECK_THROWS_AS(unescape_bytes("\\x4"), FormatError);
}

TEST_CASE("utf8 validation") {
  CHECK(is_valid_utf8("Grüß Gott"));
  CHECK_FALSE(is_valid_utf8("\xc3"));
  CHECK_FALSE(is_valid_utf8("\xff"));
  CHECK(split_words("  a bb\tc\n").size() == 3);
}
