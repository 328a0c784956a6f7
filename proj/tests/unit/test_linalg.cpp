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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "cllab/error.hpp"
#include "cllab/linalg.hpp"
#include "cllab/rng.hpp"
#include "support/eigen_oracle.hpp"

using namespace cllab;

namespace {

Matrix RandomMatrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (auto& v : m.values) v = rng.uniform(-1, 1);
  return m;
}

}  // namespace

TEST_CASE("singular values of simple matrices") {
  for (std::size_t n : {1u, 3u, 8u}) {
    auto s = SingularValues(Matrix::Identity(n));
    CHECK(s.values.size() == n);
    for (double v : s.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));
  }
  std::vector<double> d{1, 3};
  auto s = SingularValues(Matrix::Diagonal(d));
  CHECK(s.values[0] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(s.values[1] == doctest::Approx(1.0).epsilon(1e-14));

  Matrix wide(2, 5);
  CHECK(SingularValues(wide).values.size() == 2);
  CHECK(SingularValues(Matrix(7, 3)).values.size() == 3);

  Matrix bad(2, 2);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(SingularValues(bad), NumericError);
}

TEST_CASE("squared singular values match a power-iteration oracle on a 5x4 matrix") {
  Rng rng(21);
  Matrix m = RandomMatrix(rng, 5, 4);
  auto oracle = testing::PowerIterationEigenvalues(testing::GramOf(m));
  auto s = SingularValues(m);
  REQUIRE(s.values.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(s.values[i] * s.values[i] - oracle[i]) < 1e-8);
  }
}

TEST_CASE("spectrum is sorted, nonnegative and preserves the Frobenius norm") {
  Rng rng(22);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t r = 1 + rng.below(20), c = 1 + rng.below(20);
    Matrix m = RandomMatrix(rng, r, c);
    auto s = SingularValues(m);
    CHECK(s.values.size() == std::min(r, c));
    CHECK(std::is_sorted(s.values.rbegin(), s.values.rend()));
    double fro = 0, sum_sq = 0;
    for (double v : m.values) fro += v * v;
    for (double v : s.values) {
      CHECK(v >= 0);
      sum_sq += v * v;
    }
    CHECK(std::abs(fro - sum_sq) < 1e-8);
  }
}

TEST_CASE("effective rank examples") {
  std::vector<double> uniform(6, 2.5);
  CHECK(EffectiveRank(uniform) == doctest::Approx(6.0).epsilon(1e-14));
  std::vector<double> rank1{4.0, 0, 0, 0};
  CHECK(std::abs(EffectiveRank(rank1) - 1.0) < 1e-10);
  std::vector<double> s211{2, 1, 1};
  CHECK(std::abs(EffectiveRank(s211) - 2 * std::sqrt(2.0)) < 1e-9);
  std::vector<double> zeros(3, 0.0);
  CHECK(EffectiveRank(zeros) == 0.0);
  std::vector<double> empty;
  CHECK_THROWS_AS(EffectiveRank(empty), InputError);
  std::vector<double> negative{1, -1};
  CHECK_THROWS_AS(EffectiveRank(negative), InputError);
}

TEST_CASE("effective rank bounds and invariances") {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(1 + rng.below(12));
    std::size_t nonzero = 0;
    for (auto& v : s) {
      v = rng.uniform() < 0.2 ? 0.0 : rng.uniform(0, 10);
      nonzero += v > 0;
    }
    const double e = EffectiveRank(s);
    CHECK(e >= 0);
    CHECK(e <= static_cast<double>(nonzero) + 1e-12);
    const double c = rng.uniform(1e-3, 1e3);
    std::vector<double> scaled = s;
    for (auto& v : scaled) v *= c;
    CHECK(std::abs(EffectiveRank(scaled) - e) < 1e-10);
    std::vector<double> perm = s;
    rng.shuffle(perm);
    CHECK(std::abs(EffectiveRank(perm) - e) < 1e-10);
  }
}

TEST_CASE("peak normalization") {
  std::vector<double> up{1, 2, 2, 5};
  for (double v : PeakNormalize(up)) CHECK(v == 1.0);
  std::vector<double> series{10, 8, 12, 6};
  auto out = PeakNormalize(series);
  CHECK(out == std::vector<double>{1.0, 0.8, 1.0, 0.5});
  std::vector<double> single{3};
  CHECK(PeakNormalize(single) == std::vector<double>{1.0});
  std::vector<double> bad{0, 1};
  CHECK_THROWS_AS(PeakNormalize(bad), InputError);

  Rng rng(24);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(1 + rng.below(10));
    for (auto& x : v) x = rng.uniform(0.01, 5);
    auto n = PeakNormalize(v);
    for (double x : n) {
      CHECK(x > 0);
      CHECK(x <= 1);
    }
    // Already-normalized series whose running max is 1 normalise to themselves.
    CHECK(PeakNormalize(n) == n);
  }
}

TEST_CASE("conv kernel matricization") {
  Matrix m = MatricizeConvKernel(Tensor::FromData({2, 1, 1, 1}, {3, -4}));
  CHECK(m.rows == 2);
  CHECK(m.cols == 1);
  CHECK(m(0, 0) == 3);
  CHECK(m(1, 0) == -4);
  Matrix m2 = MatricizeConvKernel(Tensor::FromData({1, 1, 2, 2}, {1, 2, 3, 4}));
  CHECK(m2.rows == 1);
  CHECK(m2.values == std::vector<double>{1, 2, 3, 4});
  CHECK_THROWS_AS(MatricizeConvKernel(Tensor::Zeros({2, 2})), DimensionError);

  // Independent index arithmetic: entry (o, c*kH*kW + i*kW + j) = k[o][c][i][j].
  Rng rng(25);
  std::vector<Scalar> vals(8 * 3 * 3 * 3);
  for (auto& v : vals) v = static_cast<Scalar>(rng.uniform(-1, 1));
  Tensor k = Tensor::FromData({8, 3, 3, 3}, vals);
  Matrix oracle(8, 27);
  for (std::size_t o = 0; o < 8; ++o)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) oracle(o, c * 9 + i * 3 + j) = k.at({o, c, i, j});
  Matrix mk = MatricizeConvKernel(k);
  CHECK(mk.values == oracle.values);
  CHECK(EffectiveRank(SingularValues(mk)) ==
        doctest::Approx(EffectiveRank(SingularValues(oracle))).epsilon(1e-12));
}

TEST_CASE("group effective rank") {
  Rng rng(26);
  Matrix a = RandomMatrix(rng, 6, 4);
  std::vector<Matrix> one{a};
  const double ea = EffectiveRank(SingularValues(a));
  CHECK(GroupErank(one) == doctest::Approx(ea).epsilon(1e-14));
  std::vector<Matrix> ids{Matrix::Identity(4), Matrix::Identity(6)};
  CHECK(GroupErank(ids) == doctest::Approx(5.0).epsilon(1e-12));
  std::vector<Matrix> copies(3, a);
  CHECK(GroupErank(copies) == doctest::Approx(ea).epsilon(1e-12));
  std::vector<Matrix> none;
  CHECK_THROWS_AS(GroupErank(none), InputError);
}

TEST_CASE("activation effective rank variants") {
  // Rank-1 activations: every row a multiple of one vector.
  Matrix h(10, 6);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 6; ++c) h(r, c) = static_cast<double>(r + 1) * static_cast<double>(c % 3 + 1);
  CHECK(ActivationErank(h) == doctest::Approx(1.0).epsilon(1e-6));
  // Covariance variant squares the spectrum: smaller eRank for a spread spectrum.
  std::vector<double> d{3, 2, 1};
  Matrix diag = Matrix::Diagonal(d);
  const double plain = ActivationErank(diag);
  const double cov = ActivationErank(diag, {.center = false, .covariance = true});
  CHECK(plain == doctest::Approx(EffectiveRank(d)));
  std::vector<double> d2{9, 4, 1};
  CHECK(cov == doctest::Approx(EffectiveRank(d2)));
  // Centering removes a constant offset column pattern.
  Matrix shifted(5, 3);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) shifted(r, c) = 7.0;
  CHECK(ActivationErank(shifted, {.center = true, .covariance = false}) == 0.0);
}

TEST_CASE("erank trace ordering") {
  ERankTrace t(ProbeKind::kWeight, LayerGroup::kEarly);
  t.Append(1, 4.0);
  t.Append(2, 2.0);
  CHECK_THROWS_AS(t.Append(2, 1.0), InputError);
  CHECK_THROWS_AS(t.Append(3, -1.0), InputError);
  CHECK(t.PeakNormalized() == std::vector<double>{1.0, 0.5});
  CHECK(ParseLayerGroup("penultimate") == LayerGroup::kPenultimate);
  CHECK(ProbeKindName(ParseProbeKind("activation")) == "activation");
}
