#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "camel/store.hpp"
#include "oracle_helpers.hpp"

using camel::Kind;
using camel::MemoryEntry;
using camel::Matrix;
using camel::Novelty;
using camel::StoreState;
using camel::Vector;

namespace {

Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

Vector random_vec(int d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> gauss(0.0, scale);
  Vector v(d);
  for (int i = 0; i < d; ++i) v[i] = gauss(rng);
  return v;
}

// Pooled scatter of each step's stored vectors about that step's mean,
// computed with plain loops from a finished store.
Matrix pooled_within_oracle(const StoreState& s) {
  std::map<std::int64_t, std::vector<Vector>> by_step;
  for (const auto& e : s.entries) by_step[e.step_id].push_back(e.calibrated);
  const int d = s.calib.dim;
  Matrix acc = Matrix::Zero(d, d);
  for (const auto& [sid, vecs] : by_step) {
    (void)sid;
    Vector m = Vector::Zero(d);
    for (const auto& v : vecs) m += v;
    m /= static_cast<double>(vecs.size());
    for (const auto& v : vecs) acc += (v - m) * (v - m).transpose();
  }
  return acc;
}

}  // namespace

TEST_CASE("step lifecycle: open, double-open, reuse, close", "[store]") {
  StoreState s;
  camel::open_step(s, 1);
  REQUIRE(s.calib.current.has_value());
  CHECK(s.calib.current->step_id == 1);
  CHECK(s.calib.current->mu.count == 0);

  CHECK_THROWS_AS(camel::open_step(s, 2), camel::error);

  camel::close_step(s);
  CHECK_FALSE(s.calib.current.has_value());
  CHECK_THROWS_AS(camel::close_step(s), camel::error);

  CHECK_THROWS_AS(camel::open_step(s, 1), camel::error);  // id reuse
  camel::open_step(s, 2);
  camel::close_step(s);
}

TEST_CASE("closing steps logs one mean record per nonempty step", "[store]") {
  StoreState s;
  std::mt19937_64 rng(11);
  for (int t = 0; t < 10; ++t) {
    camel::open_step(s, t);
    camel::write(s, random_vec(3, rng), 0, Kind::genuine);
    camel::close_step(s);
  }
  CHECK(s.calib.step_means_log.size() == 10);

  camel::open_step(s, 100);
  camel::close_step(s);  // zero writes: nothing logged
  CHECK(s.calib.step_means_log.size() == 10);
}

TEST_CASE("residualize subtracts the pre-update running mean", "[store]") {
  camel::RunningMean mu;
  Vector h = vec2(1, 2);
  CHECK(camel::residualize(h, mu) == h);  // count 0 acts as zero mean

  mu = camel::welford_update(std::move(mu), vec2(1, 2));
  Vector r = camel::residualize(vec2(1, 2), mu);
  CHECK(r.norm() == 0.0);

  Vector h3(3);
  h3 << 1, 2, 3;
  CHECK_THROWS_AS(camel::residualize(h3, mu), camel::error);
}

TEST_CASE("shared component decays as O(1/sqrt(n)) in the step mean of stored vectors",
          "[store]") {
  std::mt19937_64 rng(17);
  const int d = 8;
  const Vector b = random_vec(d, rng, 2.0);

  // First two residuals of an a+b, -a+b sequence with a shared b.
  {
    StoreState s;
    const Vector a = random_vec(d, rng);
    camel::open_step(s, 0);
    camel::write(s, Vector(a + b), 0, Kind::genuine);
    camel::write(s, Vector(-a + b), 0, Kind::genuine);
    camel::close_step(s);
    CHECK((s.entries[0].calibrated - (a + b)).norm() < 1e-12);
    CHECK((s.entries[1].calibrated - (-2.0 * a)).norm() < 1e-12);
  }

  // Alternating +/- a around a shared b (small i.i.d. jitter keeps the
  // residual directions distinct, as in the i.i.d. statement of the
  // property): after 100 writes the mean of the stored vectors is small
  // relative to ||a||.
  {
    StoreState s;
    const Vector a = random_vec(d, rng);
    camel::open_step(s, 0);
    for (int i = 0; i < 100; ++i) {
      const Vector sign_a = (i % 2 == 0 ? Vector(a) : Vector(-a));
      const Vector raw = sign_a + b + random_vec(d, rng, 0.05);
      camel::write(s, raw, 0, Kind::genuine);
    }
    camel::close_step(s);
    REQUIRE(s.entries.size() == 100);
    Vector mean_cal = Vector::Zero(d);
    for (const auto& e : s.entries) mean_cal += e.calibrated;
    mean_cal /= static_cast<double>(s.entries.size());
    CHECK(mean_cal.norm() < 3.0 / std::sqrt(100.0) * a.norm());
  }

  // Log-log slope of ||mean stored vector|| vs n for i.i.d. content noise.
  const std::vector<int> ns = {10, 100, 1000};
  std::vector<double> log_norm(ns.size(), 0.0);
  const int repeats = 20;
  for (int rep = 0; rep < repeats; ++rep) {
    for (std::size_t j = 0; j < ns.size(); ++j) {
      StoreState s;
      camel::open_step(s, 0);
      for (int i = 0; i < ns[j]; ++i)
        camel::write(s, Vector(random_vec(d, rng) + b), 0, Kind::genuine);
      camel::close_step(s);
      Vector mean_cal = Vector::Zero(d);
      for (const auto& e : s.entries) mean_cal += e.calibrated;
      mean_cal /= static_cast<double>(s.entries.size());
      log_norm[j] += std::log(mean_cal.norm()) / repeats;
    }
  }
  // Least-squares slope of log||mean|| against log n.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t j = 0; j < ns.size(); ++j) {
    const double x = std::log(static_cast<double>(ns[j]));
    sx += x;
    sy += log_norm[j];
    sxx += x * x;
    sxy += x * log_norm[j];
  }
  const double n3 = static_cast<double>(ns.size());
  const double slope = (n3 * sxy - sx * sy) / (n3 * sxx - sx * sx);
  CHECK(slope > -0.65);
  CHECK(slope < -0.35);
}

TEST_CASE("novelty check flags duplicates and zero residuals", "[store]") {
  StoreState s;
  CHECK(camel::novelty_check(vec2(1, 0), s) == Novelty::novel);  // empty store

  camel::open_step(s, 0);
  camel::write(s, vec2(1, 0), 0, Kind::genuine);
  CHECK(camel::novelty_check(s.entries[0].calibrated, s) == Novelty::duplicate);
  CHECK(camel::novelty_check(vec2(0, 1), s) == Novelty::novel);  // orthogonal
  CHECK(camel::novelty_check(vec2(0, 0), s) == Novelty::duplicate);  // zero
}

TEST_CASE("exact repeat is rejected without touching the step mean", "[store]") {
  StoreState s;
  camel::open_step(s, 0);
  auto first = camel::write(s, vec2(1, 0), 0, Kind::genuine);
  REQUIRE(first.stored);
  CHECK(first.entry_id == 0);

  auto second = camel::write(s, vec2(1, 0), 0, Kind::genuine);
  CHECK_FALSE(second.stored);
  CHECK(second.entry_id == -1);
  CHECK(s.calib.current->mu.count == 1);
  CHECK(s.entries.size() == 1);
  CHECK(s.calib.write_counter == 1);

  auto third = camel::write(s, vec2(1, 0), 0, Kind::genuine);
  CHECK_FALSE(third.stored);
  CHECK(s.calib.current->mu.count == 1);
}

TEST_CASE("write sequence example and logged step mean", "[store]") {
  StoreState s;
  camel::open_step(s, 0);
  CHECK(camel::write(s, vec2(1, 0), 0, Kind::genuine).stored);
  CHECK(camel::write(s, vec2(0, 1), 1, Kind::genuine).stored);
  CHECK(camel::write(s, vec2(1, 1), 2, Kind::genuine).stored);
  CHECK(s.calib.write_counter == 3);

  CHECK((s.entries[0].calibrated - vec2(1, 0)).norm() < 1e-15);
  CHECK((s.entries[1].calibrated - vec2(-1, 1)).norm() < 1e-15);
  CHECK((s.entries[2].calibrated - vec2(0.5, 0.5)).norm() < 1e-15);

  camel::close_step(s);
  REQUIRE(s.calib.step_means_log.size() == 1);
  CHECK((s.calib.step_means_log[0].mean - vec2(2.0 / 3, 2.0 / 3)).norm() <
        1e-12);
  CHECK(s.calib.step_means_log[0].count == 3);
}

TEST_CASE("write requires an open step, matching dimension, finite values",
          "[store]") {
  StoreState s;
  CHECK_THROWS_AS(camel::write(s, vec2(1, 0), 0, Kind::genuine), camel::error);

  camel::open_step(s, 0);
  camel::write(s, vec2(1, 0), 0, Kind::genuine);
  Vector h3(3);
  h3 << 1, 2, 3;
  CHECK_THROWS_AS(camel::write(s, h3, 0, Kind::genuine), camel::error);
  Vector bad = vec2(1, std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(camel::write(s, bad, 0, Kind::genuine), camel::error);
}

TEST_CASE("batch residuals of a completed step equal the centering projector",
          "[store]") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 7);  // n <= 8
    const int d = 2 + static_cast<int>(rng() % 3);  // 2 <= d <= 4 (d=1 would
                                                    // make same-sign writes
                                                    // exact-cosine duplicates)
    std::vector<Vector> raws;
    for (int i = 0; i < n; ++i) raws.push_back(random_vec(d, rng));

    StoreState s;
    camel::open_step(s, 0);
    for (const auto& r : raws) camel::write(s, r, 0, Kind::genuine);
    camel::close_step(s);
    REQUIRE(s.calib.step_means_log.size() == 1);
    const Vector mu = s.calib.step_means_log[0].mean;

    // Stack raws as rows; centering projector acts on the sample index.
    Matrix H(n, d);
    for (int i = 0; i < n; ++i) H.row(i) = raws[static_cast<std::size_t>(i)];
    const Matrix P =
        Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / n);
    const Matrix centered = P * H;
    for (int i = 0; i < n; ++i) {
      const Vector direct = raws[static_cast<std::size_t>(i)] - mu;
      CHECK((centered.row(i).transpose() - direct).norm() < 1e-12);
    }
  }
}

TEST_CASE("write decisions are label-blind", "[store]") {
  std::mt19937_64 rng(31);
  std::vector<Vector> raws;
  for (int i = 0; i < 120; ++i) raws.push_back(random_vec(6, rng));
  // Force a few duplicates.
  raws[40] = raws[7];
  raws[90] = raws[55];

  auto build = [&](const std::vector<int>& labels) {
    StoreState s;
    std::vector<bool> accepted;
    for (std::size_t i = 0; i < raws.size(); ++i) {
      if (i % 20 == 0) {
        if (i > 0) camel::close_step(s);
        camel::open_step(s, static_cast<std::int64_t>(i / 20));
      }
      accepted.push_back(
          camel::write(s, raws[i], labels[i], Kind::genuine).stored);
    }
    camel::close_step(s);
    return std::pair{std::move(s), accepted};
  };

  std::vector<int> labels(raws.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<int>(i % 4);
  std::vector<int> permuted(labels.rbegin(), labels.rend());

  auto [s1, acc1] = build(labels);
  auto [s2, acc2] = build(permuted);

  CHECK(acc1 == acc2);
  REQUIRE(s1.entries.size() == s2.entries.size());
  for (std::size_t i = 0; i < s1.entries.size(); ++i) {
    CHECK(s1.entries[i].id == s2.entries[i].id);
    CHECK((s1.entries[i].calibrated - s2.entries[i].calibrated).norm() == 0.0);
  }
  CHECK((s1.calib.scatter_within.sum_outer - s2.calib.scatter_within.sum_outer)
            .norm() == 0.0);
}

TEST_CASE("retrieval: scores, tie-break, bounds, and errors", "[store]") {
  StoreState s;
  camel::open_step(s, 0);
  camel::write(s, vec2(1, 0), 0, Kind::genuine);  // id 0
  camel::write(s, vec2(0, 1), 1, Kind::genuine);  // id 1, calibrated (-1,1)
  camel::close_step(s);

  auto top = camel::retrieve_topk(s, vec2(1, 0), 1);
  REQUIRE(top.size() == 1);
  CHECK(top[0].entry_id == 0);
  CHECK(top[0].base_score == Catch::Approx(1.0));

  // Symmetric entries tie under q = (1,1): lower id first.
  StoreState t;
  camel::open_step(t, 0);
  camel::write(t, vec2(1, 0), 0, Kind::genuine);
  camel::close_step(t);
  camel::open_step(t, 1);
  camel::write(t, vec2(0, 1), 0, Kind::genuine);
  camel::close_step(t);
  auto tie = camel::retrieve_topk(t, vec2(1, 1) / std::sqrt(2.0), 2);
  REQUIRE(tie.size() == 2);
  CHECK(tie[0].entry_id == 0);
  CHECK(tie[1].entry_id == 1);

  CHECK_THROWS_AS(camel::retrieve_topk(s, vec2(1, 0), 0), camel::error);
  Vector q3(3);
  q3 << 1, 0, 0;
  CHECK_THROWS_AS(camel::retrieve_topk(s, q3, 1), camel::error);

  StoreState empty;
  CHECK(camel::retrieve_topk(empty, vec2(1, 0), 3).empty());
}

TEST_CASE("top-k agrees with a full-sort oracle on 200 random entries",
          "[store]") {
  std::mt19937_64 rng(41);
  const int d = 16;
  StoreState s;
  for (int step = 0; step < 10; ++step) {
    camel::open_step(s, step);
    for (int i = 0; i < 20; ++i)
      camel::write(s, random_vec(d, rng), i % 4, Kind::genuine);
    camel::close_step(s);
  }
  REQUIRE(s.entries.size() == 200);

  for (int trial = 0; trial < 20; ++trial) {
    const Vector q = random_vec(d, rng);
    auto got = camel::retrieve_topk(s, q, 10);

    std::vector<std::pair<double, std::int64_t>> oracle;
    for (const auto& e : s.entries)
      oracle.emplace_back(q.dot(e.calibrated), e.id);
    std::sort(oracle.begin(), oracle.end(), [](auto a, auto b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    REQUIRE(got.size() == 10);
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].entry_id == oracle[i].second);
      CHECK(got[i].base_score == Catch::Approx(oracle[i].first));
    }
  }
}

TEST_CASE("retrieval predicate restricts the scanned population", "[store]") {
  StoreState s;
  camel::open_step(s, 0);
  camel::write(s, vec2(1, 0), 0, Kind::genuine);
  camel::write(s, vec2(0.9, 0.1), 1, Kind::injected);
  camel::close_step(s);

  auto only_genuine = camel::retrieve_topk(
      s, vec2(1, 0), 5,
      [](const MemoryEntry& e) { return e.kind == Kind::genuine; });
  REQUIRE(only_genuine.size() == 1);
  CHECK(only_genuine[0].entry_id == 0);
}

TEST_CASE("streaming within-step scatter equals the batch pooled oracle",
          "[store]") {
  std::mt19937_64 rng(53);
  StoreState s;
  for (int step = 0; step < 7; ++step) {
    camel::open_step(s, step);
    const int n = 3 + static_cast<int>(rng() % 30);
    for (int i = 0; i < n; ++i)
      camel::write(s, random_vec(5, rng), 0, Kind::genuine);
    camel::close_step(s);
  }
  const Matrix oracle = pooled_within_oracle(s);
  CHECK((s.calib.scatter_within.sum_outer - oracle).norm() <
        1e-10 * (1.0 + oracle.norm()));
}

TEST_CASE("logged step means match the batch mean of raw writes", "[store]") {
  std::mt19937_64 rng(59);
  StoreState s;
  std::vector<std::vector<Vector>> raws_by_step;
  for (int step = 0; step < 50; ++step) {
    camel::open_step(s, step);
    std::vector<Vector> raws;
    const int n = 1 + static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) {
      Vector r = random_vec(4, rng);
      if (camel::write(s, r, 0, Kind::genuine).stored) raws.push_back(r);
    }
    raws_by_step.push_back(std::move(raws));
    camel::close_step(s);
  }
  REQUIRE(s.calib.step_means_log.size() == raws_by_step.size());
  for (std::size_t i = 0; i < raws_by_step.size(); ++i) {
    const Vector m = oracle::batch_mean(raws_by_step[i]);
    CHECK((s.calib.step_means_log[i].mean - m).norm() < 1e-12);
  }
}

TEST_CASE("calibration state size is independent of entry count", "[store]") {
  std::mt19937_64 rng(61);
  auto build = [&](int steps, int per_step) {
    StoreState s;
    for (int t = 0; t < steps; ++t) {
      camel::open_step(s, t);
      for (int i = 0; i < per_step; ++i)
        camel::write(s, random_vec(12, rng), 0, Kind::genuine);
      camel::close_step(s);
    }
    return s;
  };
  StoreState small = build(5, 20);
  StoreState large = build(50, 20);
  CHECK(camel::calibration_state_bytes(small) ==
        camel::calibration_state_bytes(large));
  CHECK(large.entries.size() == 10 * small.entries.size());
}

TEST_CASE("raw payloads can be dropped at write time", "[store]") {
  StoreState s;
  s.keep_raw = false;
  camel::open_step(s, 0);
  camel::write(s, vec2(1, 0), 0, Kind::genuine);
  camel::write(s, vec2(0, 1), 0, Kind::genuine);
  camel::close_step(s);
  CHECK(s.entries[0].raw.size() == 0);
  CHECK(s.entries[0].calibrated.size() == 2);
  // Step means still reflect the raw stream.
  CHECK((s.calib.step_means_log[0].mean - vec2(0.5, 0.5)).norm() < 1e-15);
}

TEST_CASE("vanilla mode stores raw vectors and still logs raw step means",
          "[store]") {
  StoreState s;
  s.calib.residualize_writes = false;
  camel::open_step(s, 0);
  CHECK(camel::write(s, vec2(1, 0), 0, Kind::genuine).stored);
  CHECK(camel::write(s, vec2(0, 1), 1, Kind::genuine).stored);
  CHECK((s.entries[1].calibrated - vec2(0, 1)).norm() == 0.0);  // no residual
  CHECK_FALSE(camel::write(s, vec2(1, 0), 2, Kind::genuine).stored);  // dup
  camel::close_step(s);
  CHECK((s.calib.step_means_log[0].mean - vec2(0.5, 0.5)).norm() < 1e-15);
}

TEST_CASE("store round-trips through line-delimited JSON", "[store]") {
  std::mt19937_64 rng(67);
  StoreState s;
  for (int step = 0; step < 6; ++step) {
    camel::open_step(s, step * 3);
    for (int i = 0; i < 15; ++i)
      camel::write(s, random_vec(9, rng), i % 4,
                   i % 5 == 0 ? Kind::injected : Kind::genuine);
    camel::close_step(s);
  }

  std::stringstream buf;
  camel::dump_store(s, buf);
  StoreState r = camel::load_store(buf);

  REQUIRE(r.entries.size() == s.entries.size());
  for (std::size_t i = 0; i < s.entries.size(); ++i) {
    CHECK(r.entries[i].id == s.entries[i].id);
    CHECK(r.entries[i].step_id == s.entries[i].step_id);
    CHECK(r.entries[i].label == s.entries[i].label);
    CHECK(r.entries[i].kind == s.entries[i].kind);
    CHECK((r.entries[i].raw - s.entries[i].raw).norm() == 0.0);
    CHECK((r.entries[i].calibrated - s.entries[i].calibrated).norm() == 0.0);
  }
  REQUIRE(r.calib.step_means_log.size() == s.calib.step_means_log.size());
  for (std::size_t i = 0; i < s.calib.step_means_log.size(); ++i) {
    CHECK((r.calib.step_means_log[i].mean - s.calib.step_means_log[i].mean)
              .norm() == 0.0);
    CHECK(r.calib.step_means_log[i].count == s.calib.step_means_log[i].count);
  }
  CHECK(r.next_id == s.next_id);
  CHECK(r.calib.write_counter == s.calib.write_counter);
  CHECK((r.calib.scatter_within.sum_outer - s.calib.scatter_within.sum_outer)
            .norm() < 1e-9 * (1.0 + s.calib.scatter_within.sum_outer.norm()));
  CHECK((r.calib.between_mm - s.calib.between_mm).norm() <
        1e-12 * (1.0 + s.calib.between_mm.norm()));

  // Retrieval agrees on the reloaded store.
  for (int trial = 0; trial < 5; ++trial) {
    const Vector q = random_vec(9, rng);
    auto a = camel::retrieve_topk(s, q, 7);
    auto b = camel::retrieve_topk(r, q, 7);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(a[i].entry_id == b[i].entry_id);
  }

  // Reloaded store continues numbering and refuses reused step ids.
  CHECK_THROWS_AS(camel::open_step(r, 0), camel::error);
  camel::open_step(r, 999);
  auto out = camel::write(r, random_vec(9, rng), 0, Kind::genuine);
  CHECK(out.entry_id == s.next_id);
  camel::close_step(r);
}

TEST_CASE("dump with an open step and malformed input are errors", "[store]") {
  StoreState s;
  camel::open_step(s, 0);
  camel::write(s, vec2(1, 0), 0, Kind::genuine);
  std::stringstream buf;
  CHECK_THROWS_AS(camel::dump_store(s, buf), camel::error);

  std::stringstream bad("{\"record\":\"entry\"}\n");
  CHECK_THROWS_AS(camel::load_store(bad), camel::error);
  std::stringstream empty("");
  CHECK_THROWS_AS(camel::load_store(empty), camel::error);
}

TEST_CASE("zero first write is rejected and does not pin dimension", "[store]") {
  StoreState s;
  camel::open_step(s, 0);
  CHECK_FALSE(camel::write(s, vec2(0, 0), 0, Kind::genuine).stored);
  CHECK(s.calib.dim == 0);
  CHECK(camel::write(s, vec2(2, 0), 0, Kind::genuine).stored);
  CHECK(s.calib.dim == 2);
}
