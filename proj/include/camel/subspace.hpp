#pragma once

// Identification of the non-causal direction basis from between-step vs
// within-step variance, per-direction counterfactual perturbation scales,
// and amortized recompute scheduling with a drift trigger.
//
// Concurrency contract: a built basis is immutable; share freely across
// concurrent retrievals. Recomputation produces a fresh value the caller
// publishes atomically.

#include <atomic>
#include <cstdint>
#include <utility>
#include <vector>

#include <json.hpp>

#include <camel/error.hpp>
#include <camel/numstream.hpp>
#include <camel/store.hpp>

namespace camel {

struct NonCausalBasis {
  std::vector<Vector> directions;   // v_1..v_L, Euclidean-orthonormal
  std::vector<double> deltas;       // per-direction counterfactual scales, > 0
  std::vector<double> eigenvalues;  // full descending generalized spectrum
  int version = 0;
  std::int64_t built_at_write = 0;
  bool built = false;       // false only for the never-built initial value
  double built_norm = 0.0;  // drift reference: norm of the weight-normalized
                            // combined scatter at build time
};

struct SubspaceConfig {
  std::int64_t recompute_interval = 256;  // writes between scheduled rebuilds
  double drift_threshold = 0.10;          // relative change that forces one
  int l_max = 16;
  double ridge_scale = 1e-8;  // effective ridge = ridge_scale * tr(Sw)/d
};

inline void validate(const SubspaceConfig& cfg) {
  if (cfg.recompute_interval < 1)
    fail(errc::config, "recompute_interval must be >= 1");
  if (!(cfg.drift_threshold > 0.0 && cfg.drift_threshold < 1.0))
    fail(errc::config, "drift_threshold must lie in (0, 1)");
  if (cfg.l_max < 1) fail(errc::config, "l_max must be >= 1");
  if (cfg.ridge_scale <= 0.0) fail(errc::config, "ridge_scale must be > 0");
}

// Instrumentation: total eigensolve invocations (amortization assertions).
inline std::atomic<std::int64_t>& eigensolve_count() {
  static std::atomic<std::int64_t> count{0};
  return count;
}

// Pooled within-step scatter plus the between-step scatter of logged raw
// step means, size-weighted and centered at the size-weighted grand mean.
// Fewer than two logged steps yield a zero between matrix (insufficient
// data is not an error here; the basis simply stays empty).
inline std::pair<ScatterMatrix, ScatterMatrix> build_scatters(
    const WriteCalibrator& calib) {
  const int d = calib.dim;
  ScatterMatrix sw = calib.scatter_within;
  if (sw.sum_outer.size() == 0 && d > 0) sw.sum_outer = Matrix::Zero(d, d);

  ScatterMatrix sb;
  if (d > 0) sb.sum_outer = Matrix::Zero(d, d);
  if (calib.step_means_log.size() >= 2 && calib.between_weight > 0.0) {
    sb.sum_outer = calib.between_mm -
                   (calib.between_m * calib.between_m.transpose()) /
                       calib.between_weight;
    sb.weight = calib.between_weight;
  }
  return {std::move(sw), std::move(sb)};
}

inline std::pair<ScatterMatrix, ScatterMatrix> build_scatters(
    const StoreState& s) {
  return build_scatters(s.calib);
}

// Scalar tracked for drift detection: Frobenius norm of the combined scatter
// with each part normalized by its accumulated weight, so the statistic
// converges under a stationary stream instead of growing with write count.
inline double normalized_scatter_norm(const WriteCalibrator& calib) {
  auto [sw, sb] = build_scatters(calib);
  if (calib.dim == 0) return 0.0;
  const double ww = std::max<double>(1.0, static_cast<double>(calib.write_counter));
  const double wb = std::max(1.0, sb.weight);
  return (sw.sum_outer / ww + sb.sum_outer / wb).norm();
}

// RMS projection of the stored vectors onto each direction, floored at 1e-12
// so a direction never silently loses its counterfactual probe.
inline std::vector<double> delta_scales(const std::vector<Vector>& stored,
                                        const std::vector<Vector>& directions) {
  if (stored.empty()) fail(errc::empty_input, "delta_scales: empty memory");
  std::vector<double> out;
  out.reserve(directions.size());
  for (const auto& v : directions) {
    double acc = 0.0;
    for (const auto& h : stored) {
      const double p = v.dot(h);
      acc += p * p;
    }
    const double rms = std::sqrt(acc / static_cast<double>(stored.size()));
    out.push_back(std::max(rms, 1e-12));
  }
  return out;
}

namespace detail {
inline std::vector<Vector> stored_vectors(const StoreState& s) {
  std::vector<Vector> vecs;
  vecs.reserve(s.entries.size());
  for (const auto& e : s.entries) vecs.push_back(e.calibrated);
  return vecs;
}
}  // namespace detail

// Generalized eigensolve of (Sb, Sw + ridge I), elbow cut, Euclidean
// re-orthonormalization of the retained eigenvectors, and delta scales over
// the supplied stored vectors (unit scales when none are supplied, e.g. in
// synthetic-matrix tests that only probe direction recovery).
inline NonCausalBasis compute_basis(const ScatterMatrix& sw,
                                    const ScatterMatrix& sb,
                                    const SubspaceConfig& cfg,
                                    const std::vector<Vector>* stored = nullptr,
                                    int prev_version = 0) {
  validate(cfg);
  if (sw.sum_outer.size() == 0 || sb.sum_outer.size() == 0)
    fail(errc::rejected_input, "compute_basis: empty scatter matrices");
  if (sw.sum_outer.rows() != sb.sum_outer.rows())
    fail(errc::rejected_input, "compute_basis: dimension mismatch");

  NonCausalBasis basis;
  basis.version = prev_version + 1;
  basis.built = true;

  const auto d = sw.sum_outer.rows();
  if (sb.sum_outer.norm() == 0.0) return basis;  // no between-step structure

  const double tr = sw.sum_outer.trace();
  const double ridge =
      tr > 0.0 ? cfg.ridge_scale * tr / static_cast<double>(d) : cfg.ridge_scale;

  eigensolve_count().fetch_add(1, std::memory_order_relaxed);
  const EigResult eig = solve_generalized_eig(sb, sw, ridge);
  basis.eigenvalues = eig.eigenvalues;

  const int L = elbow_select(eig.eigenvalues, cfg.l_max, 1e-10);
  if (L == 0) return basis;

  std::vector<Vector> top(eig.eigenvectors.begin(),
                          eig.eigenvectors.begin() + L);
  basis.directions = orthonormalize(top);
  if (stored != nullptr && !stored->empty())
    basis.deltas = delta_scales(*stored, basis.directions);
  else
    basis.deltas.assign(basis.directions.size(), 1.0);
  return basis;
}

// Rebuilds when the scheduled write interval has elapsed, when the
// weight-normalized combined scatter has drifted beyond the threshold since
// the last build, or on first use; otherwise returns the basis unchanged.
inline NonCausalBasis maybe_recompute(const StoreState& s,
                                      const NonCausalBasis& basis,
                                      const SubspaceConfig& cfg) {
  validate(cfg);
  if (s.calib.write_counter == 0) return basis;

  bool rebuild = !basis.built;
  if (!rebuild &&
      s.calib.write_counter - basis.built_at_write >= cfg.recompute_interval)
    rebuild = true;
  double now_norm = 0.0;
  if (!rebuild) {
    now_norm = normalized_scatter_norm(s.calib);
    if (basis.built_norm > 0.0 &&
        std::abs(now_norm - basis.built_norm) / basis.built_norm >
            cfg.drift_threshold)
      rebuild = true;
  }
  if (!rebuild) return basis;

  auto [sw, sb] = build_scatters(s.calib);
  const auto stored = detail::stored_vectors(s);
  NonCausalBasis next = compute_basis(sw, sb, cfg, &stored, basis.version);
  next.built_at_write = s.calib.write_counter;
  next.built_norm = normalized_scatter_norm(s.calib);
  return next;
}

inline nlohmann::json basis_to_json(const NonCausalBasis& b) {
  nlohmann::json j;
  j["version"] = b.version;
  j["L"] = b.directions.size();
  j["directions"] = nlohmann::json::array();
  for (const auto& v : b.directions) j["directions"].push_back(vector_to_json(v));
  j["deltas"] = b.deltas;
  j["eigenvalues"] = b.eigenvalues;
  return j;
}

inline NonCausalBasis basis_from_json(const nlohmann::json& j) {
  NonCausalBasis b;
  b.version = j.at("version").get<int>();
  for (const auto& v : j.at("directions")) b.directions.push_back(vector_from_json(v));
  b.deltas = j.at("deltas").get<std::vector<double>>();
  b.eigenvalues = j.at("eigenvalues").get<std::vector<double>>();
  if (b.directions.size() != b.deltas.size())
    fail(errc::io, "basis import: directions/deltas length mismatch");
  b.built = true;
  return b;
}

}  // namespace camel
