#pragma once

// Adaptive attacks against the calibrated memory engine, built to probe its
// two defenses from the outside.
//
//   crossstep_attack   targets embedding memory: M noised variants of one
//                      spurious direction, placed one per step, so that the
//                      step mean never absorbs the direction (write-stage
//                      evasion) and the variant spread lands in within-step
//                      variance (retrieve-stage evasion).
//   graphmimic_attack  targets graph memory: a parallel chain C' -> M' -> Y
//                      copying the genuine chain's shape, with K repeated
//                      edge insertions inflating its traversal weight.
//   attack_report      paired-seed metric deltas between an unattacked and
//                      an attacked batch of runs.
//
// Threat model boundary: attack construction sees the world (its config and
// encoder) and the trajectory or graph under attack -- never the engine's
// runtime state (running means, scatter, non-causal basis). The interfaces
// below cannot express such access.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <camel/error.hpp>
#include <camel/graphmem.hpp>
#include <camel/synthworld.hpp>

#include <json.hpp>

namespace camel {

enum class AttackKind { crossstep, graphmimic };

inline std::string to_string(AttackKind k) {
  return k == AttackKind::crossstep ? "crossstep" : "graphmimic";
}

inline AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "crossstep") return AttackKind::crossstep;
  if (s == "graphmimic") return AttackKind::graphmimic;
  fail(errc::config, "unknown attack kind: " + s);
}

// A fully specified attack. `M` and `variant_noise` left empty take their
// documented defaults at attack time (one variant per trajectory step;
// noise at 0.3x the direction's content-space component).
struct AttackPlan {
  AttackKind kind = AttackKind::crossstep;
  QueryEvent target_query;              // must carry a spurious answer
  Vector spurious_direction;            // unit norm, content-space realization
  std::optional<int> M;                 // crossstep variant count, >= 1
  int K = 3;                            // graphmimic repeat factor, >= 1
  std::optional<double> variant_noise;  // >= 0
};

struct InjectedPlacement {
  std::int64_t step_id = 0;
  std::size_t step_index = 0;   // position in Trajectory::steps
  std::size_t entry_index = 0;  // position in that step's entry list
};

// The injected parallel chain: node ids plus every edge insertion event
// (2 per repeat), in injection order.
struct MimicChain {
  std::int64_t cprime = -1;
  std::int64_t mprime = -1;
  std::int64_t outcome = -1;
  std::vector<std::array<std::int64_t, 2>> edge_events;
};

struct InjectionRecord {
  AttackKind kind = AttackKind::crossstep;
  std::vector<InjectedPlacement> placements;  // crossstep: one per variant
  std::optional<MimicChain> chain;            // graphmimic only
  std::uint64_t noise_seed = 0;               // stream the noise came from
};

// A genuine cause -> mediator -> outcome chain, by node id.
struct CausalChain {
  std::int64_t cause = -1;
  std::int64_t mediator = -1;
  std::int64_t outcome = -1;
};

namespace detail {

inline void check_direction(const CausalWorld& w, const Vector& dir) {
  if (dir.size() != static_cast<Eigen::Index>(w.config.d))
    fail(errc::config, "attack: spurious_direction dimension mismatch");
  if (std::abs(dir.norm() - 1.0) > 1e-9)
    fail(errc::config, "attack: spurious_direction must be unit norm");
}

inline int require_spurious_answer(const QueryEvent& q) {
  if (!q.spurious_answer)
    fail(errc::config, "attack: target query carries no spurious answer");
  return *q.spurious_answer;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CrossStep distribution attack (embedding memory).
// ---------------------------------------------------------------------------

// Plan factory: targets the trajectory's first conflict query and realizes
// the spurious feature as the planted cue channel's content-space direction,
// signed toward the spurious class. Reads world config and trajectory only.
inline AttackPlan make_crossstep_plan(const CausalWorld& w,
                                      const Trajectory& traj) {
  AttackPlan plan;
  plan.kind = AttackKind::crossstep;
  const QueryEvent* target = nullptr;
  for (const auto& step : traj.steps) {
    for (const auto& q : step.queries)
      if (q.spurious_answer) {
        target = &q;
        break;
      }
    if (target) break;
  }
  if (!target) fail(errc::config, "attack: trajectory has no conflict query");
  plan.target_query = *target;
  const double sign =
      class_center(*target->spurious_answer, w.config.classes) < 0.0 ? -1.0
                                                                     : 1.0;
  Vector dir = w.content_loading.col(1) * sign;  // cue channel, slot 1
  plan.spurious_direction = dir / dir.norm();
  return plan;
}

// Injects M spurious-direction variants, exactly one per step, each paired
// with the target query's spurious answer. Returns the modified trajectory
// and a placement record. Noise is drawn from a stream derived from the
// trajectory seed, so replays reproduce the identical injection.
inline std::pair<Trajectory, InjectionRecord> crossstep_attack(
    const CausalWorld& w, const AttackPlan& plan, const Trajectory& traj) {
  if (plan.kind != AttackKind::crossstep)
    fail(errc::config, "crossstep_attack: plan kind mismatch");
  detail::check_direction(w, plan.spurious_direction);
  const int label = detail::require_spurious_answer(plan.target_query);
  if (plan.M && *plan.M < 1)
    fail(errc::config, "crossstep_attack: M must be >= 1");
  const int steps = static_cast<int>(traj.steps.size());
  const int M = plan.M ? *plan.M : steps;  // default: one per write step
  if (M < 1) fail(errc::config, "crossstep_attack: trajectory has no steps");
  if (M > steps)
    fail(errc::config, "crossstep_attack: M exceeds the trajectory's " +
                           std::to_string(steps) + " steps");
  if (plan.variant_noise && !(*plan.variant_noise >= 0.0))
    fail(errc::config, "crossstep_attack: variant_noise must be >= 0");
  const double content_component =
      (w.content_loading.transpose() * plan.spurious_direction).norm();
  const double noise_scale =
      plan.variant_noise ? *plan.variant_noise : 0.3 * content_component;

  Trajectory out = traj;
  InjectionRecord rec;
  rec.kind = AttackKind::crossstep;
  rec.noise_seed = traj.seed;
  auto rng = make_rng(traj.seed, 0xA77AC);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < M; ++i) {
    Vector g = Vector::Zero(w.config.p);
    for (Eigen::Index j = 0; j < g.size(); ++j) g[j] = gauss(rng);
    TrajEntry e;
    e.raw = plan.spurious_direction + noise_scale * (w.content_loading * g);
    e.label = label;
    e.kind = Kind::injected;
    auto& step = out.steps[static_cast<std::size_t>(i)];
    step.entries.push_back(std::move(e));
    rec.placements.push_back({step.step_id, static_cast<std::size_t>(i),
                              step.entries.size() - 1});
  }
  return {std::move(out), std::move(rec)};
}

// ---------------------------------------------------------------------------
// GraphMimic causal-pattern attack (graph memory).
// ---------------------------------------------------------------------------

// Plan factory: same target selection as the crossstep factory, graph flavor.
inline AttackPlan make_graphmimic_plan(const CausalWorld& w,
                                       const Trajectory& traj, int K = 3) {
  AttackPlan plan = make_crossstep_plan(w, traj);
  plan.kind = AttackKind::graphmimic;
  plan.K = K;
  return plan;
}

// Builds the parallel chain C' -> M' -> Y beside the genuine chain:
//   C'  carries the spurious direction at the genuine cause's feature norm;
//   M'  carries random content orthogonal to the genuine mediator's
//       features, at the mediator's norm, so feature-space calibration
//       cannot separate the chains;
//   K repeats of the edge pair (C',M'), (M',Y) accumulate weight.
// Existing nodes and edges are never modified. The two injected nodes are
// written through the normal pipeline in fresh attacker sessions whose
// proposed edges cross sessions, so the structural novelty rule admits them
// -- the attacker knows the algorithm, not the engine state.
inline std::pair<GraphState, InjectionRecord> graphmimic_attack(
    const AttackPlan& plan, const GraphState& graph, const CausalChain& chain,
    std::uint64_t noise_seed = 0) {
  if (plan.kind != AttackKind::graphmimic)
    fail(errc::config, "graphmimic_attack: plan kind mismatch");
  if (plan.K < 1) fail(errc::config, "graphmimic_attack: K must be >= 1");
  const int label = detail::require_spurious_answer(plan.target_query);
  const auto find_node = [&](std::int64_t id, const char* role) {
    for (const auto& n : graph.nodes)
      if (n.id == id) return &n;
    fail(errc::config, std::string("graphmimic_attack: ") + role +
                           " node absent from graph");
  };
  const GraphNode* cause = find_node(chain.cause, "cause");
  const GraphNode* mediator = find_node(chain.mediator, "mediator");
  const GraphNode* outcome = find_node(chain.outcome, "outcome");
  if (std::abs(plan.spurious_direction.norm() - 1.0) > 1e-9)
    fail(errc::config, "attack: spurious_direction must be unit norm");
  if (plan.spurious_direction.size() != cause->features.size())
    fail(errc::config, "attack: spurious_direction dimension mismatch");

  // Fabricated mediator content: random, then orthogonalized against the
  // genuine mediator and rescaled to its norm.
  auto rng = make_rng(noise_seed, 0x6A11C);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector m_content(mediator->features.size());
  for (Eigen::Index j = 0; j < m_content.size(); ++j) m_content[j] = gauss(rng);
  const double m_norm2 = mediator->features.squaredNorm();
  if (m_norm2 > 0.0)
    m_content -= (m_content.dot(mediator->features) / m_norm2) *
                 mediator->features;
  if (m_content.norm() <= 1e-12)
    fail(errc::degeneracy, "graphmimic_attack: degenerate mediator draw");
  m_content *= mediator->features.norm() > 0.0
                   ? mediator->features.norm() / m_content.norm()
                   : 1.0 / m_content.norm();

  GraphState out = graph;
  std::int64_t max_step = 0;
  std::int64_t max_session = 0;
  for (const auto& n : out.nodes) {
    max_step = std::max(max_step, n.step_id);
    max_session = std::max(max_session, n.session_id);
  }

  // M' first (edge into the genuine outcome crosses sessions), then C'
  // (edge into M' crosses the two attacker sessions).
  graph_open_step(out, max_step + 1);
  const GraphWriteOutcome m_out =
      graph_write(out, m_content, max_step + 1, max_session + 1,
                  {{outcome->id, 1.0, EdgeType::semantic}}, label,
                  Kind::injected);
  graph_close_step(out);
  if (!m_out.stored)
    fail(errc::integrity, "graphmimic_attack: mediator write rejected");

  const Vector c_features =
      plan.spurious_direction *
      (cause->features.norm() > 0.0 ? cause->features.norm() : 1.0);
  graph_open_step(out, max_step + 2);
  const GraphWriteOutcome c_out =
      graph_write(out, c_features, max_step + 2, max_session + 2,
                  {{m_out.node_id, 1.0, EdgeType::semantic}}, label,
                  Kind::injected);
  graph_close_step(out);
  if (!c_out.stored)
    fail(errc::integrity, "graphmimic_attack: cause write rejected");

  InjectionRecord rec;
  rec.kind = AttackKind::graphmimic;
  rec.noise_seed = noise_seed;
  MimicChain mc;
  mc.cprime = c_out.node_id;
  mc.mprime = m_out.node_id;
  mc.outcome = outcome->id;
  mc.edge_events.push_back({c_out.node_id, m_out.node_id});
  mc.edge_events.push_back({m_out.node_id, outcome->id});
  for (int k = 1; k < plan.K; ++k) {
    graph_add_edge(out, c_out.node_id, m_out.node_id, 1.0,
                   EdgeType::semantic);
    graph_add_edge(out, m_out.node_id, outcome->id, 1.0, EdgeType::semantic);
    mc.edge_events.push_back({c_out.node_id, m_out.node_id});
    mc.edge_events.push_back({m_out.node_id, outcome->id});
  }
  rec.chain = std::move(mc);
  return {std::move(out), std::move(rec)};
}

// ---------------------------------------------------------------------------
// Paired-run reporting.
// ---------------------------------------------------------------------------

// Per-seed metric series from one batch of runs (one value per seed, keyed
// by metric name). Produced by the experiment harness; consumed here.
struct RunSummary {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> metrics;
};

struct ReportDeltas {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> per_seed;  // after - before
  std::map<std::string, double> mean;
};

// after-minus-before deltas over paired seeds. Both summaries must cover the
// identical seed list in the same order and the identical metric set.
inline ReportDeltas attack_report(const RunSummary& before,
                                  const RunSummary& after) {
  if (before.seeds.empty())
    fail(errc::empty_input, "attack_report: no seeds");
  if (before.seeds != after.seeds)
    fail(errc::pairing, "attack_report: runs are not seed-paired");
  const auto check_shape = [&](const RunSummary& s, const char* which) {
    for (const auto& [name, values] : s.metrics)
      if (values.size() != s.seeds.size())
        fail(errc::pairing, std::string("attack_report: metric '") + name +
                                "' in " + which +
                                " does not cover every seed");
  };
  check_shape(before, "before");
  check_shape(after, "after");
  for (const auto& [name, values] : before.metrics) {
    (void)values;
    if (!after.metrics.count(name))
      fail(errc::pairing, "attack_report: metric '" + name +
                              "' missing from the after batch");
  }
  if (after.metrics.size() != before.metrics.size())
    fail(errc::pairing, "attack_report: metric sets differ");

  ReportDeltas d;
  d.seeds = before.seeds;
  for (const auto& [name, b] : before.metrics) {
    const auto& a = after.metrics.at(name);
    std::vector<double> diff(b.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      diff[i] = a[i] - b[i];
      acc += diff[i];
    }
    d.mean[name] = acc / static_cast<double>(b.size());
    d.per_seed[name] = std::move(diff);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Serialization (replay).
// ---------------------------------------------------------------------------

inline nlohmann::json plan_to_json(const AttackPlan& p) {
  nlohmann::json j;
  j["kind"] = to_string(p.kind);
  nlohmann::json q;
  q["q"] = p.target_query.q.size() > 0 ? vector_to_json(p.target_query.q)
                                       : nlohmann::json();
  q["causal_answer"] = p.target_query.causal_answer;
  q["spurious_answer"] = p.target_query.spurious_answer
                             ? nlohmann::json(*p.target_query.spurious_answer)
                             : nlohmann::json();
  j["target_query"] = std::move(q);
  j["spurious_direction"] = vector_to_json(p.spurious_direction);
  j["M"] = p.M ? nlohmann::json(*p.M) : nlohmann::json();
  j["K"] = p.K;
  j["variant_noise"] =
      p.variant_noise ? nlohmann::json(*p.variant_noise) : nlohmann::json();
  return j;
}

inline AttackPlan plan_from_json(const nlohmann::json& j) {
  AttackPlan p;
  p.kind = attack_kind_from_string(j.at("kind").get<std::string>());
  const auto& q = j.at("target_query");
  if (!q.at("q").is_null()) p.target_query.q = vector_from_json(q.at("q"));
  p.target_query.causal_answer = q.at("causal_answer").get<int>();
  if (!q.at("spurious_answer").is_null())
    p.target_query.spurious_answer = q.at("spurious_answer").get<int>();
  p.spurious_direction = vector_from_json(j.at("spurious_direction"));
  if (!j.at("M").is_null()) p.M = j.at("M").get<int>();
  p.K = j.at("K").get<int>();
  if (!j.at("variant_noise").is_null())
    p.variant_noise = j.at("variant_noise").get<double>();
  return p;
}

inline nlohmann::json injection_to_json(const InjectionRecord& r) {
  nlohmann::json j;
  j["kind"] = to_string(r.kind);
  j["noise_seed"] = r.noise_seed;
  nlohmann::json pl = nlohmann::json::array();
  for (const auto& p : r.placements)
    pl.push_back({{"step_id", p.step_id},
                  {"step_index", p.step_index},
                  {"entry_index", p.entry_index}});
  j["placements"] = std::move(pl);
  if (r.chain) {
    nlohmann::json c;
    c["cprime"] = r.chain->cprime;
    c["mprime"] = r.chain->mprime;
    c["outcome"] = r.chain->outcome;
    nlohmann::json ev = nlohmann::json::array();
    for (const auto& e : r.chain->edge_events)
      ev.push_back({{"src", e[0]}, {"dst", e[1]}});
    c["edge_events"] = std::move(ev);
    j["chain"] = std::move(c);
  } else {
    j["chain"] = nlohmann::json();
  }
  return j;
}

inline InjectionRecord injection_from_json(const nlohmann::json& j) {
  InjectionRecord r;
  r.kind = attack_kind_from_string(j.at("kind").get<std::string>());
  r.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  for (const auto& p : j.at("placements"))
    r.placements.push_back({p.at("step_id").get<std::int64_t>(),
                            p.at("step_index").get<std::size_t>(),
                            p.at("entry_index").get<std::size_t>()});
  if (!j.at("chain").is_null()) {
    const auto& c = j.at("chain");
    MimicChain mc;
    mc.cprime = c.at("cprime").get<std::int64_t>();
    mc.mprime = c.at("mprime").get<std::int64_t>();
    mc.outcome = c.at("outcome").get<std::int64_t>();
    for (const auto& e : c.at("edge_events"))
      mc.edge_events.push_back(
          {e.at("src").get<std::int64_t>(), e.at("dst").get<std::int64_t>()});
    r.chain = std::move(mc);
  }
  return r;
}

}  // namespace camel
