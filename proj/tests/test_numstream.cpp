#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "camel/numstream.hpp"
#include "oracle_helpers.hpp"

using camel::Matrix;
using camel::Vector;

namespace {

Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

Matrix random_spd(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix a(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) a(r, c) = gauss(rng);
  return a * a.transpose() + 0.1 * Matrix::Identity(d, d);
}

}  // namespace

TEST_CASE("welford single and two-sample updates", "[numstream]") {
  camel::RunningMean rm(2);
  rm = camel::welford_update(rm, vec2(1, 2));
  REQUIRE(rm.count == 1);
  REQUIRE(rm.mean.isApprox(vec2(1, 2)));
  rm = camel::welford_update(rm, vec2(3, 4));
  REQUIRE(rm.count == 2);
  REQUIRE(rm.mean.isApprox(vec2(2, 3)));
}

TEST_CASE("welford stream matches brute-force batch mean", "[numstream]") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vector> xs;
  camel::RunningMean rm(16);
  for (int i = 0; i < 50; ++i) {
    Vector x(16);
    for (int j = 0; j < 16; ++j) x[j] = gauss(rng);
    xs.push_back(x);
    rm = camel::welford_update(rm, x);
  }
  Vector expect = oracle::batch_mean(xs);
  REQUIRE((rm.mean - expect).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE((camel::batch_mean(xs) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("welford rejects dimension mismatch and non-finite input", "[numstream]") {
  camel::RunningMean rm(2);
  Vector bad(3);
  bad << 1, 2, 3;
  REQUIRE_THROWS_AS(camel::welford_update(rm, bad), camel::error);
  Vector nan = vec2(1, std::nan(""));
  REQUIRE_THROWS_AS(camel::welford_update(rm, nan), camel::error);
}

TEST_CASE("batch mean basics and empty rejection", "[numstream]") {
  REQUIRE(camel::batch_mean({vec2(2, 2)}).isApprox(vec2(2, 2)));
  REQUIRE(camel::batch_mean({vec2(0, 0), vec2(2, 0)}).isApprox(vec2(1, 0)));
  REQUIRE_THROWS_AS(camel::batch_mean({}), camel::error);
}

TEST_CASE("mean of many standard normal samples concentrates", "[numstream]") {
  std::normal_distribution<double> gauss(0.0, 1.0);
  int ok = 0;
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(static_cast<unsigned long long>(seed) + 1000);
    std::vector<Vector> xs;
    for (int i = 0; i < 1000; ++i) {
      Vector x(8);
      for (int j = 0; j < 8; ++j) x[j] = gauss(rng);
      xs.push_back(x);
    }
    if (camel::batch_mean(xs).cwiseAbs().maxCoeff() < 0.15) ++ok;
  }
  REQUIRE(ok >= 49);
}

TEST_CASE("scatter accumulate basics", "[numstream]") {
  camel::ScatterMatrix sm(2);
  sm = camel::scatter_accumulate(sm, vec2(1, 0), 1.0);
  Matrix e1(2, 2);
  e1 << 1, 0, 0, 0;
  REQUIRE(sm.sum_outer.isApprox(e1));
  camel::ScatterMatrix sm2(2);
  sm2 = camel::scatter_accumulate(sm2, vec2(1, 1), 2.0);
  Matrix e2(2, 2);
  e2 << 2, 2, 2, 2;
  REQUIRE(sm2.sum_outer.isApprox(e2));
  REQUIRE(sm2.weight == 2.0);
  REQUIRE_THROWS_AS(camel::scatter_accumulate(sm2, vec2(1, 1), -0.5), camel::error);
}

TEST_CASE("scatter stream matches dense batch", "[numstream]") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 3.0);
  std::vector<Vector> xs;
  std::vector<double> ws;
  camel::ScatterMatrix sm(5);
  for (int i = 0; i < 30; ++i) {
    Vector x(5);
    for (int j = 0; j < 5; ++j) x[j] = gauss(rng);
    double w = unif(rng);
    xs.push_back(x);
    ws.push_back(w);
    sm = camel::scatter_accumulate(sm, x, w);
  }
  REQUIRE((sm.sum_outer - oracle::batch_scatter(xs, ws)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("generalized eigensolve on diagonal case", "[numstream]") {
  camel::ScatterMatrix sw(2);
  sw.sum_outer = Matrix::Identity(2, 2);
  camel::ScatterMatrix sb(2);
  sb.sum_outer << 3, 0, 0, 1;
  auto res = camel::solve_generalized_eig(sb, sw, 1e-12);
  REQUIRE(res.eigenvalues[0] == Catch::Approx(3.0).epsilon(1e-9));
  REQUIRE(res.eigenvalues[1] == Catch::Approx(1.0).epsilon(1e-9));
  REQUIRE(std::fabs(res.eigenvectors[0].dot(vec2(1, 0))) == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(std::fabs(res.eigenvectors[1].dot(vec2(0, 1))) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("generalized eigensolve with zero between-scatter", "[numstream]") {
  camel::ScatterMatrix sw(3);
  sw.sum_outer = Matrix::Identity(3, 3);
  camel::ScatterMatrix sb(3);
  auto res = camel::solve_generalized_eig(sb, sw, 1e-10);
  for (double lam : res.eigenvalues) REQUIRE(std::fabs(lam) < 1e-12);
}

TEST_CASE("generalized eigensolve matches square-root whitening", "[numstream]") {
  std::mt19937_64 rng(23);
  for (int rep = 0; rep < 5; ++rep) {
    const int d = 6;
    camel::ScatterMatrix sw(d), sb(d);
    sw.sum_outer = random_spd(d, rng);
    sb.sum_outer = random_spd(d, rng);
    const double ridge = 1e-8 * sw.sum_outer.trace() / d;
    auto res = camel::solve_generalized_eig(sb, sw, ridge);
    auto ref = oracle::generalized_eig(sb.sum_outer, sw.sum_outer, ridge);
    for (int i = 0; i < d; ++i) {
      REQUIRE(res.eigenvalues[static_cast<std::size_t>(i)] ==
              Catch::Approx(ref.eigenvalues[static_cast<std::size_t>(i)]).epsilon(1e-8));
      REQUIRE(std::fabs(res.eigenvectors[static_cast<std::size_t>(i)].dot(
                  ref.eigenvectors[static_cast<std::size_t>(i)])) == Catch::Approx(1.0).margin(1e-6));
    }
  }
}

TEST_CASE("generalized eigensolve residual bound over random pairs", "[numstream]") {
  std::mt19937_64 rng(31);
  for (int d : {2, 8, 32}) {
    for (int rep = 0; rep < 100; ++rep) {
      camel::ScatterMatrix sw(d), sb(d);
      sw.sum_outer = random_spd(d, rng);
      sb.sum_outer = random_spd(d, rng);
      const double ridge = 1e-8 * sw.sum_outer.trace() / d;
      auto res = camel::solve_generalized_eig(sb, sw, ridge);
      Matrix W = sw.sum_outer;
      W.diagonal().array() += ridge;
      const double bound = 1e-8 * (sb.sum_outer.norm() + sw.sum_outer.norm());
      for (int i = 0; i < d; ++i) {
        const auto& v = res.eigenvectors[static_cast<std::size_t>(i)];
        double resid = (sb.sum_outer * v - res.eigenvalues[static_cast<std::size_t>(i)] * (W * v)).norm();
        REQUIRE(resid <= bound);
      }
    }
  }
}

TEST_CASE("generalized eigensolve rejects nonpositive ridge", "[numstream]") {
  camel::ScatterMatrix sw(2), sb(2);
  sw.sum_outer = Matrix::Identity(2, 2);
  REQUIRE_THROWS_AS(camel::solve_generalized_eig(sb, sw, 0.0), camel::error);
}

TEST_CASE("elbow picks the sharpest spectral drop", "[numstream]") {
  REQUIRE(camel::elbow_select({9.0, 8.5, 0.1, 0.09}, 16) == 2);
  REQUIRE(camel::elbow_select({9.0, 8.5, 0.1, 0.09}, 16) == oracle::elbow({9.0, 8.5, 0.1, 0.09}, 16));
  REQUIRE(camel::elbow_select({0.0, 0.0, 0.0}, 16) == 0);
  // Gradual spectrum: the largest adjacent ratio is 3/2 at index 3.
  REQUIRE(camel::elbow_select({5.0, 4.0, 3.0, 2.0}, 16) == 3);
  REQUIRE(camel::elbow_select({5.0, 4.0, 3.0, 2.0}, 16) == oracle::elbow({5.0, 4.0, 3.0, 2.0}, 16));
}

TEST_CASE("elbow respects cap and zero floor", "[numstream]") {
  REQUIRE(camel::elbow_select({9.0, 8.5, 0.1, 0.09}, 1) == 1);
  REQUIRE(camel::elbow_select({1e-13, 1e-14}, 16, 1e-12) == 0);
  REQUIRE(camel::elbow_select({-1e-15, -1e-16}, 16) == 0);
}

TEST_CASE("orthonormalize basics", "[numstream]") {
  Vector a = vec2(2, 0);
  auto basis = camel::orthonormalize({a});
  REQUIRE(basis.size() == 1);
  REQUIRE(basis[0].isApprox(vec2(1, 0)));
  auto basis2 = camel::orthonormalize({vec2(1, 0), vec2(1, 1)});
  REQUIRE(basis2.size() == 2);
  REQUIRE(basis2[0].isApprox(vec2(1, 0)));
  REQUIRE(basis2[1].isApprox(vec2(0, 1)));
}

TEST_CASE("orthonormalize drops dependent vectors and reports them", "[numstream]") {
  std::vector<int> dropped;
  auto basis = camel::orthonormalize({vec2(1, 0), vec2(2, 0), vec2(0, 1)}, &dropped);
  REQUIRE(basis.size() == 2);
  REQUIRE(dropped == std::vector<int>{1});
}

TEST_CASE("orthonormalize yields identity Gram matrix and is idempotent", "[numstream]") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vector> vs;
  for (int i = 0; i < 5; ++i) {
    Vector v(8);
    for (int j = 0; j < 8; ++j) v[j] = gauss(rng);
    vs.push_back(v);
  }
  auto basis = camel::orthonormalize(vs);
  REQUIRE(basis.size() == 5);
  Matrix g = oracle::gram(basis);
  REQUIRE((g - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-10);
  auto twice = camel::orthonormalize(basis);
  REQUIRE(twice.size() == basis.size());
  for (std::size_t i = 0; i < basis.size(); ++i)
    REQUIRE((twice[i] - basis[i]).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("median of absolute values", "[numstream]") {
  REQUIRE(camel::median_abs({0.3}) == Catch::Approx(0.3));
  REQUIRE(camel::median_abs({0.1, -0.4, 0.2}) == Catch::Approx(0.2));
  // Upper median on even length: required so that appending one dominant
  // value to a four-element list leaves the median unchanged.
  REQUIRE(camel::median_abs({0.1, 0.4, 0.2, 0.3}) == Catch::Approx(0.3));
  REQUIRE(camel::median_abs({0.1, 0.4, 0.2, 0.3, 10.0}) == Catch::Approx(0.3));
  REQUIRE(camel::median_abs({0.1, 0.4, 0.2, 0.3}) ==
          Catch::Approx(oracle::median_abs_sorted({0.1, 0.4, 0.2, 0.3})));
  REQUIRE_THROWS_AS(camel::median_abs({}), camel::error);
}

TEST_CASE("median is permutation-invariant and scale-equivariant", "[numstream]") {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> xs(11);
  for (auto& v : xs) v = gauss(rng);
  double base = camel::median_abs(xs);
  auto shuffled = xs;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  REQUIRE(camel::median_abs(shuffled) == Catch::Approx(base));
  std::vector<double> scaled = xs;
  for (auto& v : scaled) v *= -2.5;
  REQUIRE(camel::median_abs(scaled) == Catch::Approx(2.5 * base));
}
