#pragma once

// Retrieve-stage calibration: closed-form counterfactually perturbed scores,
// the per-entry stability statistic, stability reranking of a retrieved
// candidate list, and boundary-expanded retrieval for gated memories.
//
// Concurrency contract: pure functions over an immutable store snapshot and
// an immutable basis value; unrestricted concurrent use.

#include <algorithm>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include <camel/error.hpp>
#include <camel/numstream.hpp>
#include <camel/store.hpp>
#include <camel/subspace.hpp>

namespace camel {

struct RerankedList {
  std::vector<Candidate> candidates;  // ascending stability; ties broken by
                                      // descending base score, then id
  std::vector<bool> gate_pass;        // per-candidate gate status; filled by
                                      // boundary expansion, empty otherwise
  int basis_version = 0;
};

enum class GateUniformity { uniform, nonuniform };

struct GateSpec {
  EntryPredicate predicate;  // pure predicate; must not carry side effects
  GateUniformity uniformity = GateUniformity::uniform;
};

// Score of the perturbed query q + delta*v against a fixed entry, folded to
// closed form: linearity of the inner product gives base + delta*projection.
inline double perturbed_score(double base, double delta, double projection) {
  return base + delta * projection;
}

// Median absolute projection of the stored vector onto the basis directions.
// An empty basis reports 0 (clean-memory fast path).
inline double stability(const Vector& h_tilde, const NonCausalBasis& basis) {
  if (basis.directions.empty()) return 0.0;
  std::vector<double> projections;
  projections.reserve(basis.directions.size());
  for (const auto& v : basis.directions) projections.push_back(v.dot(h_tilde));
  return median_abs(std::move(projections));
}

namespace detail {
inline void sort_reranked(std::vector<Candidate>& cs) {
  std::stable_sort(cs.begin(), cs.end(), [](const Candidate& a,
                                            const Candidate& b) {
    const double sa = a.stability.value();
    const double sb = b.stability.value();
    if (sa != sb) return sa < sb;
    if (a.base_score != b.base_score) return a.base_score > b.base_score;
    return a.entry_id < b.entry_id;
  });
}
}  // namespace detail

// Fills each candidate's stability from its stored vector and orders the
// list ascending by stability. Never adds or drops candidates.
inline RerankedList rerank(const StoreState& store,
                           std::vector<Candidate> candidates,
                           const NonCausalBasis& basis) {
  for (auto& c : candidates)
    c.stability = stability(entry_by_id(store, c.entry_id).calibrated, basis);
  detail::sort_reranked(candidates);
  RerankedList out;
  out.candidates = std::move(candidates);
  out.basis_version = basis.version;
  return out;
}

// Retrieves top-(k + k_prime) from the unfiltered memory (bypassing the
// gate), reranks the expanded set by stability, and returns the leading k
// annotated with each survivor's gate status. Only uniform (query-
// independent) gates may be bypassed this way.
inline RerankedList boundary_expand_retrieve(const StoreState& store,
                                             const Vector& q, int k,
                                             int k_prime, const GateSpec& gate,
                                             const NonCausalBasis& basis) {
  if (gate.uniformity != GateUniformity::uniform)
    fail(errc::rejected_input,
         "boundary expansion requires a uniform gate");
  if (k < 1) fail(errc::rejected_input, "boundary expansion: k must be >= 1");
  if (k_prime < 1)
    fail(errc::rejected_input, "boundary expansion: k_prime must be >= 1");

  auto expanded = retrieve_topk(store, q, k + k_prime);
  RerankedList out = rerank(store, std::move(expanded), basis);
  if (out.candidates.size() > static_cast<std::size_t>(k))
    out.candidates.resize(static_cast<std::size_t>(k));
  out.gate_pass.reserve(out.candidates.size());
  for (const auto& c : out.candidates) {
    const MemoryEntry& e = entry_by_id(store, c.entry_id);
    out.gate_pass.push_back(gate.predicate ? gate.predicate(e) : true);
  }
  return out;
}

// Per-query trace for inspection and replay.
inline nlohmann::json rerank_trace_json(const StoreState& store,
                                        const Vector& q,
                                        const RerankedList& list,
                                        const NonCausalBasis& basis) {
  nlohmann::json j;
  j["query"] = vector_to_json(q);
  j["basis_version"] = list.basis_version;
  j["candidates"] = nlohmann::json::array();
  for (const auto& c : list.candidates) {
    const MemoryEntry& e = entry_by_id(store, c.entry_id);
    nlohmann::json cj;
    cj["id"] = c.entry_id;
    cj["phi"] = c.base_score;
    cj["sigma"] = c.stability.value_or(0.0);
    nlohmann::json projections = nlohmann::json::array();
    for (const auto& v : basis.directions) projections.push_back(v.dot(e.calibrated));
    cj["projections"] = std::move(projections);
    j["candidates"].push_back(std::move(cj));
  }
  return j;
}

}  // namespace camel
