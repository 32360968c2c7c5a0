#pragma once

// Graph-backed memory adapter: nodes carry the same calibrated vectors as the
// embedding store (identical write pipeline), edges carry weighted topology,
// and retrieval mixes query similarity with a bounded-hop max-product
// structural score. Write novelty is the structural rule -- a node must
// connect to some other session -- replacing the embedding-side cosine check.
//
// Concurrency contract: single-writer graph; traversal and rerank are const
// over a snapshot that is not being mutated, same contract as the store.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include <camel/error.hpp>
#include <camel/numstream.hpp>
#include <camel/rerank.hpp>
#include <camel/store.hpp>
#include <camel/subspace.hpp>

namespace camel {

enum class EdgeType { semantic, episodic };

inline std::string to_string(EdgeType t) {
  return t == EdgeType::semantic ? "semantic" : "episodic";
}

inline EdgeType edge_type_from_string(const std::string& s) {
  if (s == "semantic") return EdgeType::semantic;
  if (s == "episodic") return EdgeType::episodic;
  fail(errc::io, "unknown edge type: " + s);
}

struct GraphNode {
  std::int64_t id = 0;
  Vector features;    // host-supplied embedding, never mutated
  Vector calibrated;  // produced by the shared write pipeline
  std::int64_t step_id = 0;
  std::int64_t session_id = 0;
  int label = 0;
  Kind kind = Kind::genuine;
};

struct GraphEdge {
  std::int64_t src = 0;
  std::int64_t dst = 0;
  double weight = 0.0;  // accumulates when the same (src, dst, type) edge
                        // is inserted again
  EdgeType etype = EdgeType::semantic;
};

// An edge proposed alongside a new node; `peer` is an existing node id and
// the stored edge runs new-node -> peer.
struct ProposedEdge {
  std::int64_t peer = 0;
  double weight = 1.0;
  EdgeType etype = EdgeType::semantic;
};

struct TraversalPolicy {
  double beta = 0.5;  // 1 = pure similarity, 0 = pure structure
  int hops = 2;
};

struct GraphWriteOutcome {
  bool stored = false;
  std::int64_t node_id = -1;  // -1 when rejected as structurally redundant
};

struct GraphState {
  std::vector<GraphNode> nodes;  // append-only
  std::vector<GraphEdge> edges;
  WriteCalibrator calib;
  std::int64_t next_node_id = 0;
  std::set<std::int64_t> sessions_seen;
};

inline void graph_open_step(GraphState& g, std::int64_t step_id) {
  calibrator_open_step(g.calib, step_id);
}

inline void graph_close_step(GraphState& g) { calibrator_close_step(g.calib); }

inline const GraphNode& node_by_id(const GraphState& g, std::int64_t id) {
  if (id >= 0 && id < static_cast<std::int64_t>(g.nodes.size())) {
    const auto& n = g.nodes[static_cast<std::size_t>(id)];
    if (n.id == id) return n;  // fast path: ids are assigned sequentially
  }
  for (const auto& n : g.nodes)
    if (n.id == id) return n;
  fail(errc::integrity, "dangling node id: " + std::to_string(id));
}

namespace detail {

inline void validate_edge_shape(const GraphState& g, std::int64_t src,
                                std::int64_t dst, double weight,
                                EdgeType etype, std::int64_t src_step) {
  if (!(weight > 0.0) || !std::isfinite(weight))
    fail(errc::rejected_input, "edge weight must be positive and finite");
  if (etype == EdgeType::episodic) {
    const std::int64_t dst_step = node_by_id(g, dst).step_id;
    if (std::llabs(src_step - dst_step) != 1)
      fail(errc::rejected_input,
           "episodic edges connect consecutive-step nodes only");
  }
  (void)src;
}

}  // namespace detail

// Inserts an edge between existing nodes; re-inserting the same
// (src, dst, type) accumulates weight onto the existing edge.
inline void graph_add_edge(GraphState& g, std::int64_t src, std::int64_t dst,
                           double weight, EdgeType etype) {
  const GraphNode& s = node_by_id(g, src);  // integrity-checks endpoints
  node_by_id(g, dst);
  detail::validate_edge_shape(g, src, dst, weight, etype, s.step_id);
  for (auto& e : g.edges) {
    if (e.src == src && e.dst == dst && e.etype == etype) {
      e.weight += weight;
      return;
    }
  }
  g.edges.push_back(GraphEdge{src, dst, weight, etype});
}

// Adds a node through the shared write pipeline. The features are
// residualized against the open step's running mean; the write is rejected
// as structurally redundant when every proposed edge stays inside the node's
// own session while other sessions already exist (a node's novelty signal is
// a connection outside its session). A graph that has never seen another
// session accepts unconditionally (bootstrap). Rejected writes leave the
// graph and all calibration state untouched. The rule reads edges and
// session ids only -- never labels.
inline GraphWriteOutcome graph_write(GraphState& g, const Vector& features,
                                     std::int64_t step_id,
                                     std::int64_t session_id,
                                     const std::vector<ProposedEdge>& proposed,
                                     int label = 0,
                                     Kind kind = Kind::genuine) {
  if (!calibrator_step_open(g.calib)) fail(errc::lifecycle, "no step is open");
  if (g.calib.current->step_id != step_id)
    fail(errc::lifecycle, "graph_write step_id does not match the open step");
  if (features.size() == 0 || !features.allFinite())
    fail(errc::rejected_input, "graph_write: non-finite or empty vector");
  if (g.calib.dim != 0 &&
      features.size() != static_cast<Eigen::Index>(g.calib.dim))
    fail(errc::rejected_input, "graph_write: dimension mismatch");

  bool crosses_session = false;
  for (const auto& pe : proposed) {
    const GraphNode& peer = node_by_id(g, pe.peer);  // dangling -> integrity
    detail::validate_edge_shape(g, -1, pe.peer, pe.weight, pe.etype, step_id);
    if (peer.session_id != session_id) crosses_session = true;
  }
  const bool other_sessions_exist =
      g.sessions_seen.size() >= 2 ||
      (g.sessions_seen.size() == 1 && !g.sessions_seen.count(session_id));
  if (other_sessions_exist && !crosses_session)
    return GraphWriteOutcome{false, -1};

  const Vector stored_vec = g.calib.residualize_writes
                                ? residualize(features, g.calib.current->mu)
                                : features;
  GraphNode n;
  n.id = g.next_node_id++;
  n.features = features;
  n.calibrated = stored_vec;
  n.step_id = step_id;
  n.session_id = session_id;
  n.label = label;
  n.kind = kind;
  g.nodes.push_back(std::move(n));
  g.sessions_seen.insert(session_id);
  for (const auto& pe : proposed)
    graph_add_edge(g, g.nodes.back().id, pe.peer, pe.weight, pe.etype);
  calibrator_accept(g.calib, features, stored_vec);
  return GraphWriteOutcome{true, g.nodes.back().id};
}

namespace detail {

// Max product of edge weights over walks of at most `hops` edges starting at
// any seed; seeds themselves score 1 (the empty product). Edges are traversed
// regardless of stored direction. Unreached nodes score 0.
inline std::vector<double> structural_raw(const GraphState& g,
                                          const std::vector<std::size_t>& seeds,
                                          int hops) {
  const std::size_t n = g.nodes.size();
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < n; ++i) index[g.nodes[i].id] = i;
  std::vector<std::vector<std::pair<std::size_t, double>>> adj(n);
  for (const auto& e : g.edges) {
    const std::size_t a = index.at(e.src);  // endpoints validated on insert
    const std::size_t b = index.at(e.dst);
    adj[a].push_back({b, e.weight});
    adj[b].push_back({a, e.weight});
  }
  std::vector<double> best(n, 0.0);
  for (std::size_t s : seeds) best[s] = 1.0;
  for (int t = 0; t < hops; ++t) {
    std::vector<double> next = best;
    for (std::size_t v = 0; v < n; ++v) {
      if (best[v] <= 0.0) continue;
      for (const auto& [u, w] : adj[v])
        next[u] = std::max(next[u], best[v] * w);
    }
    best = std::move(next);
  }
  return best;
}

}  // namespace detail

// Combined-score retrieval: beta * <q, calibrated> + (1 - beta) * structural,
// where the structural score is the bounded-hop max-product from the seed
// nodes (the top-ceil(k/2) by similarity), min-max normalized over all nodes
// for this query. Ties break by ascending node id. beta = 1 reproduces the
// embedding store's retrieval ordering exactly.
inline std::vector<Candidate> traverse_retrieve(const GraphState& g,
                                                const Vector& q, int k,
                                                const TraversalPolicy& policy) {
  if (k < 1) fail(errc::rejected_input, "traverse_retrieve: k must be >= 1");
  if (!(policy.beta >= 0.0 && policy.beta <= 1.0))
    fail(errc::rejected_input, "traverse_retrieve: beta must be in [0,1]");
  if (policy.hops < 1)
    fail(errc::rejected_input, "traverse_retrieve: hops must be >= 1");
  if (g.nodes.empty()) return {};
  if (q.size() != g.nodes.front().calibrated.size())
    fail(errc::rejected_input, "traverse_retrieve: query dimension mismatch");

  const std::size_t n = g.nodes.size();
  std::vector<double> sim(n);
  for (std::size_t i = 0; i < n; ++i) sim[i] = q.dot(g.nodes[i].calibrated);

  std::vector<double> structural(n, 0.0);
  if (policy.beta < 1.0) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    const auto by_sim = [&](std::size_t a, std::size_t b) {
      if (sim[a] != sim[b]) return sim[a] > sim[b];
      return g.nodes[a].id < g.nodes[b].id;
    };
    const std::size_t n_seeds = std::min<std::size_t>(
        static_cast<std::size_t>((k + 1) / 2), n);
    std::partial_sort(order.begin(), order.begin() + n_seeds, order.end(),
                      by_sim);
    order.resize(n_seeds);
    structural = detail::structural_raw(g, order, policy.hops);
    const auto [lo_it, hi_it] = std::minmax_element(structural.begin(),
                                                    structural.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi > lo) {
      for (auto& x : structural) x = (x - lo) / (hi - lo);
    } else {
      std::fill(structural.begin(), structural.end(), 0.0);
    }
  }

  std::vector<Candidate> scored;
  scored.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = policy.beta * sim[i] + (1.0 - policy.beta) * structural[i];
    scored.push_back(Candidate{g.nodes[i].id, s, std::nullopt});
  }
  const auto cmp = [](const Candidate& a, const Candidate& b) {
    if (a.base_score != b.base_score) return a.base_score > b.base_score;
    return a.entry_id < b.entry_id;
  };
  const std::size_t kk = std::min<std::size_t>(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + kk, scored.end(), cmp);
  scored.resize(kk);
  return scored;
}

// Stability rerank over node calibrated vectors; identical ordering contract
// to the store-side rerank, and the graph topology is never touched.
inline RerankedList graph_rerank(const GraphState& g,
                                 std::vector<Candidate> candidates,
                                 const NonCausalBasis& basis) {
  for (auto& c : candidates)
    c.stability = stability(node_by_id(g, c.entry_id).calibrated, basis);
  detail::sort_reranked(candidates);
  RerankedList out;
  out.candidates = std::move(candidates);
  out.basis_version = basis.version;
  return out;
}

// Maps generator event ids to step ids (identity). Events for one step must
// be contiguous; a missing id or an id that reappears after another id has
// intervened is rejected.
inline std::vector<std::int64_t> infer_steps(
    const std::vector<std::optional<std::int64_t>>& event_ids) {
  std::vector<std::int64_t> steps;
  steps.reserve(event_ids.size());
  std::set<std::int64_t> finished;
  std::optional<std::int64_t> current;
  for (std::size_t i = 0; i < event_ids.size(); ++i) {
    if (!event_ids[i])
      fail(errc::rejected_input,
           "infer_steps: missing event id at position " + std::to_string(i));
    const std::int64_t id = *event_ids[i];
    if (!current || *current != id) {
      if (finished.count(id))
        fail(errc::rejected_input,
             "infer_steps: interleaved event id " + std::to_string(id));
      if (current) finished.insert(*current);
      current = id;
    }
    steps.push_back(id);
  }
  return steps;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON persistence: header record, node records, then edge
// records. Same calibration-state conventions as the embedding store: the
// between accumulators are rebuilt exactly from the logged step means, the
// within scatter batch-wise from the stored node vectors.
// ---------------------------------------------------------------------------

inline void dump_graph(const GraphState& g, std::ostream& out) {
  if (calibrator_step_open(g.calib))
    fail(errc::lifecycle, "dump with an open step; close it first");
  nlohmann::json header = calibrator_header_json(g.calib);
  header["record"] = "header";
  out << header.dump() << "\n";
  for (const auto& n : g.nodes) {
    nlohmann::json j;
    j["record"] = "node";
    j["id"] = n.id;
    j["features"] = vector_to_json(n.features);
    j["calibrated"] = vector_to_json(n.calibrated);
    j["step_id"] = n.step_id;
    j["session_id"] = n.session_id;
    j["label"] = n.label;
    j["kind"] = to_string(n.kind);
    out << j.dump() << "\n";
  }
  for (const auto& e : g.edges) {
    nlohmann::json j;
    j["record"] = "edge";
    j["src"] = e.src;
    j["dst"] = e.dst;
    j["weight"] = e.weight;
    j["etype"] = to_string(e.etype);
    out << j.dump() << "\n";
  }
  if (!out) fail(errc::io, "graph dump failed while writing");
}

inline GraphState load_graph(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(errc::io, "graph load: empty input");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("record", "") != "header")
    fail(errc::io, "graph load: missing header record");

  GraphState g;
  calibrator_load_header(g.calib, header);

  std::int64_t max_id = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) fail(errc::io, "graph load: malformed record");
    const std::string rec = j.value("record", "");
    if (rec == "node") {
      GraphNode n;
      n.id = j.at("id").get<std::int64_t>();
      n.features = vector_from_json(j.at("features"));
      n.calibrated = vector_from_json(j.at("calibrated"));
      n.step_id = j.at("step_id").get<std::int64_t>();
      n.session_id = j.at("session_id").get<std::int64_t>();
      n.label = j.at("label").get<int>();
      n.kind = kind_from_string(j.at("kind").get<std::string>());
      max_id = std::max(max_id, n.id);
      g.calib.used_step_ids.insert(n.step_id);
      g.sessions_seen.insert(n.session_id);
      g.nodes.push_back(std::move(n));
    } else if (rec == "edge") {
      GraphEdge e;
      e.src = j.at("src").get<std::int64_t>();
      e.dst = j.at("dst").get<std::int64_t>();
      e.weight = j.at("weight").get<double>();
      e.etype = edge_type_from_string(j.at("etype").get<std::string>());
      node_by_id(g, e.src);  // integrity: endpoints must already be loaded
      node_by_id(g, e.dst);
      g.edges.push_back(std::move(e));
    } else {
      fail(errc::io, "graph load: unknown record type");
    }
  }
  g.next_node_id = max_id + 1;
  rebuild_within_scatter(
      g.calib, g.nodes,
      [](const GraphNode& n) -> const Vector& { return n.calibrated; },
      [](const GraphNode& n) { return n.step_id; });
  return g;
}

}  // namespace camel
