#include <doctest.h>

#include "asyncfm/rng.hpp"

using namespace asyncfm;

TEST_CASE("identical seed and stream reproduce the sequence bit-exactly") {
  RandomSource a(42, "noise"), b(42, "noise");
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
}

TEST_CASE("different streams with the same seed are distinct") {
  RandomSource a(42, "noise"), b(42, "mask");
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64();
  CHECK(same == 0);
}

TEST_CASE("counter restore resumes the sequence") {
  RandomSource a(7, "data");
  for (int i = 0; i < 17; ++i) a.next_u64();
  const uint64_t mark = a.counter();
  std::vector<uint64_t> tail;
  for (int i = 0; i < 10; ++i) tail.push_back(a.next_u64());
  RandomSource b(7, "data");
  b.set_counter(mark);
  for (uint64_t v : tail) CHECK(b.next_u64() == v);
}

TEST_CASE("uniform lies strictly inside (0,1)") {
  RandomSource rng(1, "u");
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    CHECK(u > 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("uniform and normal have the right first moments") {
  RandomSource rng(3, "m");
  double su = 0, sn = 0, sn2 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) su += rng.uniform();
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sn += x;
    sn2 += x * x;
  }
  CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(sn / n == doctest::Approx(0.0).epsilon(0.02));
  CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("uniform_index is in range and roughly uniform") {
  RandomSource rng(9, "idx");
  std::vector<int> counts(8, 0);
  for (int i = 0; i < 80000; ++i) ++counts[rng.uniform_index(8)];
  for (int c : counts) CHECK(c == doctest::Approx(10000).epsilon(0.05));
}
