#pragma once

// Ground-truth synthetic causal world. Linear-Gaussian structural equations
// drive scalar variables (true cause X0, cue X1, neutral content X3, outcome
// Y, plus an optional confounder / latent confounder / collider); an
// orthogonal encoder embeds per-entry content and per-step context into
// vectors: raw = A * content + J * context + noise. Because A and J have
// mutually orthogonal columns, projections onto span(J) recover context
// energy exactly, giving oracle checks for what calibration must remove.
//
// Three spurious patterns can be planted:
//   T1 observed confounding: step-level C drives the recorded cue, the step
//      context channel, the outcome, and (with prob = strength) the label.
//   T2 unmeasured confounding: step-level U drives the cue and the outcome
//      but is never serialized; the label's spurious branch follows the
//      entry's own cue value, so per-entry cue jitter carries the bias.
//   T3 collider: the cue is independent of the outcome, but a write/visibility
//      gate admits an entry when its cue clears a threshold OR its outcome
//      does, inducing a cue-outcome association inside the visible sample.
//
// Concurrency contract: generators are pure functions of (config, seed) and
// may run in parallel across seeds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include <camel/error.hpp>
#include <camel/numstream.hpp>
#include <camel/rerank.hpp>
#include <camel/store.hpp>

namespace camel {

// ---------------------------------------------------------------------------
// Scalar class machinery: answers are quantile bins of a standard normal.
// ---------------------------------------------------------------------------

// Inverse standard-normal CDF (Acklam's rational approximation, |relative
// error| < 1.2e-9 over (0,1)).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    fail(errc::rejected_input, "normal_quantile: p must be in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1.0 - plow;
  double q, r;
  if (p < plow) {
    q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q +
            c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > phigh) {
    q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q +
             c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  q = p - 0.5;
  r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r +
          a[5]) *
         q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

// Quantile bin of value/sd under the standard normal, over `classes` equal-
// probability bins.
inline int class_of(double value, double sd, int classes) {
  if (classes < 2) fail(errc::rejected_input, "class_of: need >= 2 classes");
  if (!(sd > 0.0)) fail(errc::rejected_input, "class_of: sd must be positive");
  const double z = value / sd;
  int k = 0;
  for (int j = 1; j < classes; ++j) {
    if (z >= normal_quantile(static_cast<double>(j) / classes)) k = j;
  }
  return k;
}

// Representative value (bin-median quantile) for a class.
inline double class_center(int k, int classes) {
  if (k < 0 || k >= classes)
    fail(errc::rejected_input, "class_center: class out of range");
  return normal_quantile((2.0 * k + 1.0) / (2.0 * classes));
}

// ---------------------------------------------------------------------------
// World configuration.
// ---------------------------------------------------------------------------

enum class SpurType { T1, T2, T3 };
enum class Scope { within_step, cross_step };

inline std::string to_string(SpurType t) {
  switch (t) {
    case SpurType::T1: return "T1";
    case SpurType::T2: return "T2";
    default: return "T3";
  }
}

inline SpurType spur_type_from_string(const std::string& s) {
  if (s == "T1") return SpurType::T1;
  if (s == "T2") return SpurType::T2;
  if (s == "T3") return SpurType::T3;
  fail(errc::config, "unknown spurious type: " + s);
}

inline std::string to_string(Scope s) {
  return s == Scope::within_step ? "within_step" : "cross_step";
}

inline Scope scope_from_string(const std::string& s) {
  if (s == "within_step") return Scope::within_step;
  if (s == "cross_step") return Scope::cross_step;
  fail(errc::config, "unknown scope: " + s);
}

// Visibility gate over (cue value, outcome value): an entry is admitted when
// its cue clears cue_threshold OR its outcome clears outcome_threshold. The
// defaults admit everything.
struct WriteGateSpec {
  double cue_threshold = std::numeric_limits<double>::infinity();
  double outcome_threshold = -std::numeric_limits<double>::infinity();

  bool admits(double cue, double outcome) const {
    return cue >= cue_threshold || outcome >= outcome_threshold;
  }
};

struct SpuriousConfig {
  SpurType stype = SpurType::T1;
  double strength = 0.7;  // in [0,1]
  Scope scope = Scope::within_step;
  WriteGateSpec write_gate;  // meaningful for T3 only
};

// Canonical scope for each pattern: observed confounding is planted at step
// granularity; unmeasured confounding carries per-entry jitter across steps.
inline SpuriousConfig make_spurious(SpurType t, double strength = 0.7) {
  SpuriousConfig sc;
  sc.stype = t;
  sc.strength = strength;
  sc.scope = (t == SpurType::T2) ? Scope::cross_step : Scope::within_step;
  if (t == SpurType::T3) {
    sc.write_gate.cue_threshold = 0.0;
    // outcome_threshold is resolved against strength at build time.
  }
  return sc;
}

struct WorldConfig {
  int d = 64;       // embedding dimension
  int p = 8;        // content slots (X0, X1, X3, fillers)
  int c_dim = 6;    // context slots; benign slots outnumber confounders so
                    // the stability median is blind to a step-constant
                    // confounder unless the write stage removes it first
  int classes = 4;  // answer classes
  int context_confounders = 1;  // leading context slots carrying confounders
  double s_eps = 0.1;           // encoder noise scale
  double content_gain = 2.0;    // gain on the true-cause content slot
  double confounder_gain = 2.0;  // kappa: confounder coupling amplitude
  double context_sigma = 0.5;    // benign step-context scale
  double outcome_coeff = 1.0;    // X0 -> Y coefficient
  double outcome_noise = 0.3;    // Y noise scale
  std::optional<SpuriousConfig> spurious;
};

inline void validate(const WorldConfig& cfg) {
  if (cfg.d < 1 || cfg.p < 3 || cfg.c_dim < 1)
    fail(errc::config, "world: need d >= 1, p >= 3, c_dim >= 1");
  if (cfg.p + cfg.c_dim > cfg.d)
    fail(errc::config, "world: p + c_dim must not exceed d");
  if (cfg.classes < 2) fail(errc::config, "world: need >= 2 classes");
  if (cfg.context_confounders < 0 || cfg.context_confounders > cfg.c_dim)
    fail(errc::config, "world: context_confounders out of range");
  if (cfg.spurious) {
    const auto& sp = *cfg.spurious;
    if (!(sp.strength >= 0.0 && sp.strength <= 1.0))
      fail(errc::config, "world: strength must be in [0,1]");
  }
  if (!(cfg.s_eps >= 0.0)) fail(errc::config, "world: s_eps must be >= 0");
}

// ---------------------------------------------------------------------------
// DAG over named variables.
// ---------------------------------------------------------------------------

struct WorldDag {
  std::vector<std::string> variables;
  std::vector<std::pair<std::string, std::string>> edges;

  bool has_edge(const std::string& u, const std::string& v) const {
    for (const auto& e : edges)
      if (e.first == u && e.second == v) return true;
    return false;
  }

  bool has_directed_path(const std::string& u, const std::string& v) const {
    if (u == v) return true;
    std::vector<std::string> frontier{u};
    std::vector<std::string> seen{u};
    while (!frontier.empty()) {
      const std::string cur = frontier.back();
      frontier.pop_back();
      for (const auto& e : edges) {
        if (e.first != cur) continue;
        if (e.second == v) return true;
        if (std::find(seen.begin(), seen.end(), e.second) == seen.end()) {
          seen.push_back(e.second);
          frontier.push_back(e.second);
        }
      }
    }
    return false;
  }
};

struct CausalWorld {
  WorldConfig config;
  std::uint64_t seed = 0;
  WorldDag dag;
  std::map<std::string, double> structural_coeffs;  // "U->V" -> weight
  std::map<std::string, double> noise_scales;       // variable -> scale
  Matrix content_loading;  // A: d x p, orthonormal columns
  Matrix context_loading;  // J: d x c, orthonormal, orthogonal to span(A)

  double coupling() const {  // kappa * strength
    return config.spurious
               ? config.confounder_gain * config.spurious->strength
               : 0.0;
  }
  // Marginal sd of the cue X1 (used for class binning of cue values).
  double cue_sd() const {
    if (config.spurious && (config.spurious->stype == SpurType::T1 ||
                            config.spurious->stype == SpurType::T2))
      return std::sqrt(coupling() * coupling() + 1.0);
    return 1.0;
  }
  bool context_channel_on() const {
    return config.spurious && config.spurious->scope == Scope::within_step &&
           (config.spurious->stype == SpurType::T1 ||
            config.spurious->stype == SpurType::T2);
  }
  bool cue_coupled() const {
    return config.spurious && (config.spurious->stype == SpurType::T1 ||
                               config.spurious->stype == SpurType::T2);
  }
  // Benign context is silenced for cross-step (T2-style) worlds so the
  // non-causal basis concentrates on the cue direction.
  double benign_sigma() const {
    if (config.spurious && config.spurious->scope == Scope::cross_step)
      return 0.0;
    return cfg_sigma();
  }
  double cfg_sigma() const { return config.context_sigma; }
};

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq sseq{static_cast<std::uint32_t>(seed),
                     static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(stream),
                     static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(sseq);
}

inline CausalWorld build_world(const WorldConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  CausalWorld w;
  w.config = cfg;
  w.seed = seed;

  // Random orthonormal frame: QR of a Gaussian d x (p + c) matrix; the first
  // p columns load content, the next c load context, guaranteeing
  // span(A) _|_ span(J).
  auto rng = make_rng(seed, 0xA11CE);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix G(cfg.d, cfg.p + cfg.c_dim);
  for (Eigen::Index i = 0; i < G.rows(); ++i)
    for (Eigen::Index j = 0; j < G.cols(); ++j) G(i, j) = gauss(rng);
  const Matrix Q = Eigen::HouseholderQR<Matrix>(G)
                       .householderQ() *
                   Matrix::Identity(cfg.d, cfg.p + cfg.c_dim);
  w.content_loading = Q.leftCols(cfg.p);
  w.context_loading = Q.rightCols(cfg.c_dim);

  w.dag.variables = {"X0", "X1", "X3", "Y"};
  w.dag.edges.push_back({"X0", "Y"});
  w.structural_coeffs["X0->Y"] = cfg.outcome_coeff;
  w.noise_scales["X0"] = 1.0;
  w.noise_scales["X1"] = 1.0;
  w.noise_scales["X3"] = 1.0;
  w.noise_scales["Y"] = cfg.outcome_noise;

  if (cfg.spurious) {
    const auto& sp = *cfg.spurious;
    const double k = cfg.confounder_gain * sp.strength;
    switch (sp.stype) {
      case SpurType::T1:
        w.dag.variables.push_back("C");
        w.dag.edges.push_back({"C", "X1"});
        w.dag.edges.push_back({"C", "Y"});
        w.structural_coeffs["C->X1"] = k;
        w.structural_coeffs["C->Y"] = k;
        w.noise_scales["C"] = 1.0;
        break;
      case SpurType::T2:
        // U exists structurally but is never listed as a recorded variable.
        w.dag.edges.push_back({"U", "X1"});
        w.dag.edges.push_back({"U", "Y"});
        w.structural_coeffs["U->X1"] = k;
        w.structural_coeffs["U->Y"] = k;
        w.noise_scales["U"] = 1.0;
        break;
      case SpurType::T3:
        w.dag.variables.push_back("Cstar");
        w.dag.edges.push_back({"X1", "Cstar"});
        w.dag.edges.push_back({"Y", "Cstar"});
        w.structural_coeffs["X1->Cstar"] = 1.0;
        w.structural_coeffs["Y->Cstar"] = 1.0;
        break;
    }
  }
  return w;
}

// Resolves the T3 gate's outcome threshold so that strength is the quantile
// of Y a cue-failing entry must beat: higher strength = harsher gate.
inline WriteGateSpec resolved_gate(const CausalWorld& w) {
  if (!w.config.spurious || w.config.spurious->stype != SpurType::T3)
    fail(errc::config, "write gate requested on a non-collider world");
  WriteGateSpec g = w.config.spurious->write_gate;
  if (g.outcome_threshold == -std::numeric_limits<double>::infinity()) {
    const double b0 = w.config.outcome_coeff;
    const double sy = std::hypot(b0, w.config.outcome_noise);
    g.outcome_threshold =
        sy * normal_quantile(std::min(0.999, std::max(1e-3,
                                 w.config.spurious->strength)));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Trajectories.
// ---------------------------------------------------------------------------

struct TrajEntry {
  Vector raw;  // empty in scalar-only sampling mode
  int label = 0;
  std::map<std::string, double> assigns;
  bool visible = true;         // set by apply_write_gate on collider worlds
  Kind kind = Kind::genuine;   // adversarial injections are marked, so paired
                               // attacked/unattacked replays stay auditable
};

struct QueryEvent {
  Vector q;  // empty in scalar-only sampling mode
  int causal_answer = -1;
  std::optional<int> spurious_answer;
};

struct TrajStep {
  std::int64_t step_id = 0;
  Vector context;                      // constant within the step
  std::map<std::string, double> row;   // step-level variable assignments
  bool row_visible = true;
  double latent = 0.0;  // unrecorded confounder value; never serialized
  std::vector<TrajEntry> entries;
  std::vector<QueryEvent> queries;
};

struct Trajectory {
  WorldConfig config;
  std::uint64_t seed = 0;
  std::vector<TrajStep> steps;
};

namespace detail {

inline Vector encode(const CausalWorld& w, const Vector& content,
                     const Vector& context) {
  return w.content_loading * content + w.context_loading * context;
}

// Content vector layout: slot 0 = gain * X0, slot 1 = X1, slot 2 = X3,
// slots 3.. = fillers.
inline Vector content_vec(const CausalWorld& w, double x0, double x1,
                          double x3, const std::vector<double>& fillers) {
  Vector x = Vector::Zero(w.config.p);
  x[0] = w.config.content_gain * x0;
  x[1] = x1;
  x[2] = x3;
  for (std::size_t j = 0; j < fillers.size(); ++j)
    x[3 + static_cast<Eigen::Index>(j)] = fillers[j];
  return x;
}

}  // namespace detail

// Samples a trajectory: per step draw context and step-level variables, then
// per entry draw content from the structural equations and encode. Queries:
// one organic probe per step (causal answer only) and, on spurious worlds,
// one conflict probe whose planted cue implies a different class than its
// causal content. With emit_vectors = false only scalar assignments are
// produced (fast path for causal-discovery sampling).
//
// `clamp` supports interventional replay: rerunning with the same seed draws
// the identical noise sequence, with the named variable overridden after its
// draw so every downstream quantity (context slot, step row, entry couplings,
// labels) reflects the intervention. Only the confounder is clampable: key
// "C" on observed-confounder worlds, "U" on unmeasured-confounder worlds; any
// other key is a config error.
inline Trajectory sample_trajectory(
    const CausalWorld& w, int n_steps, int n_per_step, std::uint64_t seed,
    bool emit_vectors = true,
    const std::map<std::string, double>& clamp = {}) {
  if (n_steps < 1 || n_per_step < 1)
    fail(errc::rejected_input, "sample_trajectory: need n_steps, n_per_step >= 1");
  const auto& cfg = w.config;
  std::optional<double> conf_clamp;
  for (const auto& [key, value] : clamp) {
    const bool t1 = cfg.spurious && cfg.spurious->stype == SpurType::T1;
    const bool t2 = cfg.spurious && cfg.spurious->stype == SpurType::T2;
    if ((key == "C" && t1) || (key == "U" && t2)) {
      conf_clamp = value;
    } else {
      fail(errc::config, "sample_trajectory: clamping unsupported variable: " + key);
    }
  }
  Trajectory traj;
  traj.config = cfg;
  traj.seed = seed;
  traj.steps.reserve(static_cast<std::size_t>(n_steps));

  auto rng = make_rng(seed, 0x57EB5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const bool spurious = cfg.spurious.has_value();
  const SpurType stype = spurious ? cfg.spurious->stype : SpurType::T1;
  const double strength = spurious ? cfg.spurious->strength : 0.0;
  const double k = w.coupling();
  const double b0 = cfg.outcome_coeff;
  const double sy = cfg.outcome_noise;
  const double cue_sd = w.cue_sd();
  const bool coupled = w.cue_coupled();
  const bool ctx_on = w.context_channel_on();
  const double benign_sd = w.benign_sigma();

  // Cross-step worlds let entries inherit the previous step's confounder:
  // an agent re-citing earlier material carries its influence forward, so
  // the contamination is spread across adjacent steps rather than being a
  // step constant that a running step mean could absorb.
  const bool cross = spurious && cfg.spurious->scope == Scope::cross_step;
  double conf_prev = 0.0;

  for (int s = 0; s < n_steps; ++s) {
    TrajStep step;
    step.step_id = s;

    // Step-level confounders occupy the leading context slots; the first one
    // also drives cue/outcome/label couplings.
    std::vector<double> confs(static_cast<std::size_t>(cfg.context_confounders));
    for (auto& v : confs) v = gauss(rng);
    if (conf_clamp && !confs.empty()) confs[0] = *conf_clamp;
    const double conf = confs.empty() ? 0.0 : confs[0];
    step.latent = (spurious && stype == SpurType::T2) ? conf : 0.0;

    Vector ctx = Vector::Zero(cfg.c_dim);
    for (int j = 0; j < cfg.context_confounders; ++j)
      ctx[j] = ctx_on ? k * confs[static_cast<std::size_t>(j)] : 0.0;
    for (int j = cfg.context_confounders; j < cfg.c_dim; ++j)
      ctx[j] = benign_sd > 0.0 ? benign_sd * gauss(rng) : 0.0;
    step.context = ctx;

    // Step-level variable row (used by discovery and the step's outcome).
    const double x0_s = gauss(rng);
    const double x1_s = (coupled ? k * conf : 0.0) + gauss(rng);
    const double x3_s = gauss(rng);
    const double y_s = b0 * x0_s + (coupled ? k * conf : 0.0) + sy * gauss(rng);
    step.row["X0"] = x0_s;
    step.row["X1"] = x1_s;
    step.row["X3"] = x3_s;
    step.row["Y"] = y_s;
    if (spurious && stype == SpurType::T1) step.row["C"] = conf;
    if (spurious && stype == SpurType::T3) {
      const WriteGateSpec gate = resolved_gate(w);
      step.row_visible = gate.admits(x1_s, y_s);
      step.row["Cstar"] = step.row_visible ? 1.0 : 0.0;
    }

    // Entries: per-entry content sharing the step's confounder. Under the
    // cross-step scope each entry flips between the current and the previous
    // step's confounder value, so the coupling survives step-mean removal.
    step.entries.reserve(static_cast<std::size_t>(n_per_step));
    for (int e = 0; e < n_per_step; ++e) {
      TrajEntry entry;
      const double u_src =
          (cross && s > 0 && unif(rng) < 0.5) ? conf_prev : conf;
      const double x0 = gauss(rng);
      const double x1 = (coupled ? k * u_src : 0.0) + gauss(rng);
      const double x3 = gauss(rng);
      const double y = b0 * x0 + (coupled ? k * u_src : 0.0) + sy * gauss(rng);
      entry.assigns["X0"] = x0;
      entry.assigns["X1"] = x1;
      entry.assigns["X3"] = x3;
      entry.assigns["Y"] = y;

      if (!spurious) {
        entry.label = class_of(x0, 1.0, cfg.classes);
      } else if (stype == SpurType::T1) {
        entry.label = unif(rng) < strength ? class_of(conf, 1.0, cfg.classes)
                                           : class_of(x0, 1.0, cfg.classes);
      } else if (stype == SpurType::T2) {
        entry.label = unif(rng) < strength
                          ? class_of(x1, cue_sd, cfg.classes)
                          : class_of(x0, 1.0, cfg.classes);
      } else {
        entry.label = class_of(x0, 1.0, cfg.classes);
      }

      if (emit_vectors) {
        std::vector<double> fillers(static_cast<std::size_t>(cfg.p - 3));
        for (std::size_t j = 0; j < fillers.size(); ++j) {
          fillers[j] = gauss(rng);
          entry.assigns["F" + std::to_string(3 + j)] = fillers[j];
        }
        Vector h = detail::encode(w, detail::content_vec(w, x0, x1, x3, fillers),
                                  ctx);
        if (cfg.s_eps > 0.0)
          for (Eigen::Index i = 0; i < h.size(); ++i)
            h[i] += cfg.s_eps * gauss(rng);
        entry.raw = std::move(h);
      }
      step.entries.push_back(std::move(entry));
    }

    // Organic probe: asks about the step's own content.
    {
      QueryEvent qe;
      qe.causal_answer = class_of(x0_s, 1.0, cfg.classes);
      if (emit_vectors)
        qe.q = detail::encode(
            w, detail::content_vec(w, x0_s, x1_s, x3_s, {}), ctx);
      step.queries.push_back(std::move(qe));
    }
    // Conflict probe. Confounded worlds plant a cue implying the extreme
    // class opposite the probe's causal content. Collider worlds instead
    // plant a strongly negative cue: under the admit-on-cue-OR-outcome gate,
    // cue-failing entries are visible only with high outcomes, so the gated
    // neighborhood votes for the top class; the probe's own causal content
    // stays moderate (and enters at unit gain) so the cue dominates matching.
    if (spurious) {
      QueryEvent qe;
      if (stype == SpurType::T3) {
        double u = 0.25 + 0.5 * unif(rng);
        int causal = class_of(normal_quantile(u), 1.0, cfg.classes);
        if (causal == cfg.classes - 1) {  // only reachable for tiny class counts
          u = 0.25 + 0.25 * unif(rng);
          causal = class_of(normal_quantile(u), 1.0, cfg.classes);
        }
        const double x0_p = normal_quantile(u);
        qe.causal_answer = causal;
        qe.spurious_answer = cfg.classes - 1;
        const double cue_val = cue_sd * class_center(0, cfg.classes);
        if (emit_vectors) {
          Vector content = detail::content_vec(w, x0_p, cue_val, 0.0, {});
          content[0] = x0_p;  // unit gain: the cue leads, content is incidental
          qe.q = detail::encode(w, content, ctx);
        }
      } else {
        // Within-step worlds attack through the context channel, which is
        // strong enough to face full-gain content; cross-step worlds attack
        // through the cue alone, so their probes draw middle-band causal
        // content to keep the content term bounded. The spurious class is
        // the opposite-side extreme in both cases.
        const bool cross = cfg.spurious->scope == Scope::cross_step;
        const double x0_p = cross ? normal_quantile(0.25 + 0.5 * unif(rng))
                                  : gauss(rng);
        qe.causal_answer = class_of(x0_p, 1.0, cfg.classes);
        int k_sp = x0_p >= 0.0 ? 0 : cfg.classes - 1;
        if (k_sp == qe.causal_answer) k_sp = cfg.classes - 1 - k_sp;
        qe.spurious_answer = k_sp;
        const double cue_val = cue_sd * class_center(k_sp, cfg.classes);
        if (emit_vectors) {
          Vector probe_ctx = ctx;
          if (ctx_on && cfg.context_confounders > 0)
            probe_ctx[0] = k * class_center(k_sp, cfg.classes);
          qe.q = detail::encode(
              w, detail::content_vec(w, x0_p, cue_val, 0.0, {}), probe_ctx);
        }
      }
      step.queries.push_back(std::move(qe));
    }
    traj.steps.push_back(std::move(step));
    conf_prev = conf;
  }
  return traj;
}

// Marks entries (and step rows) excluded by the gate. The marked trajectory
// retains every entry: gating is a visibility predicate, so the unrestricted
// counterfactual sample stays available for boundary expansion and
// interventional re-tests.
inline Trajectory apply_write_gate(Trajectory traj, const WriteGateSpec& gate) {
  if (!traj.config.spurious || traj.config.spurious->stype != SpurType::T3)
    fail(errc::config, "write gate applied to a non-collider world");
  for (auto& step : traj.steps) {
    for (auto& e : step.entries)
      e.visible = gate.admits(e.assigns.at("X1"), e.assigns.at("Y"));
    step.row_visible = gate.admits(step.row.at("X1"), step.row.at("Y"));
    step.row["Cstar"] = step.row_visible ? 1.0 : 0.0;
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Decision readout.
// ---------------------------------------------------------------------------

inline constexpr int kAbstain = -1;

struct DecisionRule {
  enum class Weighting { by_rank_position, by_score };
  Weighting weighting = Weighting::by_rank_position;
};

// Weighted vote over candidate labels in list order. Rank weighting uses
// 1/(1+rank); score weighting uses the base score clipped at zero (uniform
// fallback when every score clips away). Ties break to the smallest class.
inline int decide(const std::vector<Candidate>& candidates,
                  const std::function<int(std::int64_t)>& label_of,
                  const DecisionRule& rule = {}) {
  if (candidates.empty()) return kAbstain;
  std::map<int, double> votes;
  bool any_weight = false;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double wgt = 1.0 / (1.0 + static_cast<double>(i));
    if (rule.weighting == DecisionRule::Weighting::by_score) {
      wgt = std::max(candidates[i].base_score, 0.0);
    }
    if (wgt > 0.0) any_weight = true;
    votes[label_of(candidates[i].entry_id)] += wgt;
  }
  if (!any_weight) {  // all scores clipped: fall back to a uniform vote
    for (const auto& c : candidates) votes[label_of(c.entry_id)] += 1.0;
  }
  int best = kAbstain;
  double best_w = -1.0;
  for (const auto& [label, wgt] : votes) {
    if (wgt > best_w) {
      best_w = wgt;
      best = label;
    }
  }
  return best;
}

inline int decide(const RerankedList& list,
                  const std::function<int(std::int64_t)>& label_of,
                  const DecisionRule& rule = {}) {
  return decide(list.candidates, label_of, rule);
}

// Fraction of conflict probes whose decision equals the spurious answer.
// Every probe must carry both answers and they must differ.
inline double spurious_ratio(const std::vector<int>& decisions,
                             const std::vector<QueryEvent>& probes) {
  if (probes.empty()) fail(errc::empty_input, "spurious_ratio: no probes");
  if (decisions.size() != probes.size())
    fail(errc::rejected_input, "spurious_ratio: decisions/probes mismatch");
  int hits = 0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (!probes[i].spurious_answer ||
        *probes[i].spurious_answer == probes[i].causal_answer)
      fail(errc::malformed_probe,
           "spurious_ratio: probe lacks distinct causal/spurious answers");
    if (decisions[i] == *probes[i].spurious_answer) hits += 1;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

// ---------------------------------------------------------------------------
// Serialization (line-delimited JSON). The unrecorded confounder is held only
// in memory: no record carries it, matching its "never measured" role.
// ---------------------------------------------------------------------------

inline nlohmann::json spurious_to_json(const SpuriousConfig& sp) {
  nlohmann::json j;
  j["stype"] = to_string(sp.stype);
  j["strength"] = sp.strength;
  j["scope"] = to_string(sp.scope);
  nlohmann::json g;
  const auto inf = std::numeric_limits<double>::infinity();
  g["cue_threshold"] = sp.write_gate.cue_threshold == inf
                           ? nlohmann::json()
                           : nlohmann::json(sp.write_gate.cue_threshold);
  g["outcome_threshold"] = sp.write_gate.outcome_threshold == -inf
                               ? nlohmann::json()
                               : nlohmann::json(sp.write_gate.outcome_threshold);
  j["write_gate"] = std::move(g);
  return j;
}

inline SpuriousConfig spurious_from_json(const nlohmann::json& j) {
  SpuriousConfig sp;
  sp.stype = spur_type_from_string(j.at("stype").get<std::string>());
  sp.strength = j.at("strength").get<double>();
  sp.scope = scope_from_string(j.at("scope").get<std::string>());
  if (j.contains("write_gate")) {
    const auto& g = j.at("write_gate");
    if (!g.at("cue_threshold").is_null())
      sp.write_gate.cue_threshold = g.at("cue_threshold").get<double>();
    if (!g.at("outcome_threshold").is_null())
      sp.write_gate.outcome_threshold = g.at("outcome_threshold").get<double>();
  }
  return sp;
}

inline nlohmann::json world_config_to_json(const WorldConfig& cfg) {
  nlohmann::json j;
  j["d"] = cfg.d;
  j["p"] = cfg.p;
  j["c_dim"] = cfg.c_dim;
  j["classes"] = cfg.classes;
  j["context_confounders"] = cfg.context_confounders;
  j["s_eps"] = cfg.s_eps;
  j["content_gain"] = cfg.content_gain;
  j["confounder_gain"] = cfg.confounder_gain;
  j["context_sigma"] = cfg.context_sigma;
  j["outcome_coeff"] = cfg.outcome_coeff;
  j["outcome_noise"] = cfg.outcome_noise;
  if (cfg.spurious) j["spurious"] = spurious_to_json(*cfg.spurious);
  return j;
}

inline WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig cfg;
  cfg.d = j.value("d", cfg.d);
  cfg.p = j.value("p", cfg.p);
  cfg.c_dim = j.value("c_dim", cfg.c_dim);
  cfg.classes = j.value("classes", cfg.classes);
  cfg.context_confounders =
      j.value("context_confounders", cfg.context_confounders);
  cfg.s_eps = j.value("s_eps", cfg.s_eps);
  cfg.content_gain = j.value("content_gain", cfg.content_gain);
  cfg.confounder_gain = j.value("confounder_gain", cfg.confounder_gain);
  cfg.context_sigma = j.value("context_sigma", cfg.context_sigma);
  cfg.outcome_coeff = j.value("outcome_coeff", cfg.outcome_coeff);
  cfg.outcome_noise = j.value("outcome_noise", cfg.outcome_noise);
  if (j.contains("spurious") && !j.at("spurious").is_null())
    cfg.spurious = spurious_from_json(j.at("spurious"));
  return cfg;
}

inline void dump_trajectory(const Trajectory& traj, std::ostream& out) {
  nlohmann::json header;
  header["record"] = "header";
  header["config"] = world_config_to_json(traj.config);
  header["seed"] = traj.seed;
  out << header.dump() << "\n";
  for (const auto& step : traj.steps) {
    nlohmann::json js;
    js["record"] = "step";
    js["step_id"] = step.step_id;
    js["context"] = vector_to_json(step.context);
    js["row"] = step.row;
    js["row_visible"] = step.row_visible;
    out << js.dump() << "\n";
    for (const auto& e : step.entries) {
      nlohmann::json je;
      je["record"] = "entry";
      je["step_id"] = step.step_id;
      je["raw"] = e.raw.size() > 0 ? vector_to_json(e.raw) : nlohmann::json();
      je["label"] = e.label;
      je["assigns"] = e.assigns;
      je["visible"] = e.visible;
      je["kind"] = to_string(e.kind);
      out << je.dump() << "\n";
    }
    for (const auto& q : step.queries) {
      nlohmann::json jq;
      jq["record"] = "query";
      jq["step_id"] = step.step_id;
      jq["q"] = q.q.size() > 0 ? vector_to_json(q.q) : nlohmann::json();
      jq["causal_answer"] = q.causal_answer;
      jq["spurious_answer"] = q.spurious_answer
                                  ? nlohmann::json(*q.spurious_answer)
                                  : nlohmann::json();
      out << jq.dump() << "\n";
    }
  }
  if (!out) fail(errc::io, "trajectory dump failed while writing");
}

inline Trajectory load_trajectory(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) fail(errc::io, "trajectory load: empty input");
  line_no += 1;
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("record", "") != "header")
    fail(errc::ingestion, "trajectory load: missing header (line 1)");
  Trajectory traj;
  traj.config = world_config_from_json(header.at("config"));
  traj.seed = header.at("seed").get<std::uint64_t>();

  while (std::getline(in, line)) {
    line_no += 1;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      fail(errc::ingestion,
           "trajectory load: malformed record at line " + std::to_string(line_no));
    const std::string rec = j.value("record", "");
    if (rec == "step") {
      TrajStep step;
      step.step_id = j.at("step_id").get<std::int64_t>();
      step.context = vector_from_json(j.at("context"));
      step.row = j.at("row").get<std::map<std::string, double>>();
      step.row_visible = j.at("row_visible").get<bool>();
      traj.steps.push_back(std::move(step));
    } else if (rec == "entry") {
      if (traj.steps.empty() ||
          traj.steps.back().step_id != j.at("step_id").get<std::int64_t>())
        fail(errc::ingestion,
             "trajectory load: entry before its step at line " +
                 std::to_string(line_no));
      TrajEntry e;
      if (!j.at("raw").is_null()) e.raw = vector_from_json(j.at("raw"));
      e.label = j.at("label").get<int>();
      e.assigns = j.at("assigns").get<std::map<std::string, double>>();
      e.visible = j.at("visible").get<bool>();
      e.kind = kind_from_string(j.value("kind", "genuine"));
      traj.steps.back().entries.push_back(std::move(e));
    } else if (rec == "query") {
      if (traj.steps.empty() ||
          traj.steps.back().step_id != j.at("step_id").get<std::int64_t>())
        fail(errc::ingestion,
             "trajectory load: query before its step at line " +
                 std::to_string(line_no));
      QueryEvent q;
      if (!j.at("q").is_null()) q.q = vector_from_json(j.at("q"));
      q.causal_answer = j.at("causal_answer").get<int>();
      if (!j.at("spurious_answer").is_null())
        q.spurious_answer = j.at("spurious_answer").get<int>();
      traj.steps.back().queries.push_back(std::move(q));
    } else {
      fail(errc::ingestion, "trajectory load: unknown record at line " +
                                std::to_string(line_no));
    }
  }
  return traj;
}

}  // namespace camel
