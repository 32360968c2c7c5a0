#pragma once

// Calibrated embedding memory: step lifecycle, write-stage residualization
// against the running step mean, content-novelty write criterion, and exact
// top-k inner-product retrieval.
//
// Concurrency contract: the store is single-writer. open_step / write /
// close_step must be externally serialized. retrieve_topk is const and may
// run concurrently against a snapshot that is not being mutated.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include <camel/error.hpp>
#include <camel/numstream.hpp>

namespace camel {

enum class Kind { genuine, injected };

inline std::string to_string(Kind k) {
  return k == Kind::genuine ? "genuine" : "injected";
}

inline Kind kind_from_string(const std::string& s) {
  if (s == "genuine") return Kind::genuine;
  if (s == "injected") return Kind::injected;
  fail(errc::io, "unknown entry kind: " + s);
}

enum class StepStatus { open, closed };

struct MemoryEntry {
  std::int64_t id = 0;
  std::int64_t step_id = 0;
  Vector raw;         // as written (empty when the store drops raw payloads)
  Vector calibrated;  // as stored: residualized when write calibration is on
  int label = 0;
  Kind kind = Kind::genuine;
};

struct StepState {
  std::int64_t step_id = 0;
  RunningMean mu;  // running mean of raw writes in this step
  StepStatus status = StepStatus::open;
};

struct StepMeanRecord {
  Vector mean;
  std::int64_t count = 0;
};

struct Candidate {
  std::int64_t entry_id = 0;
  double base_score = 0.0;
  std::optional<double> stability;
};

struct WriteOutcome {
  bool stored = false;
  std::int64_t entry_id = -1;  // -1 when rejected as duplicate
};

enum class Novelty { novel, duplicate };

inline constexpr double kDuplicateCosine = 1.0 - 1e-6;
inline constexpr double kZeroResidualNorm = 1e-12;

// Write-stage calibration bookkeeping shared by the embedding store and the
// graph adapter. Live per-step state (mu, partial mean) is discarded at step
// close; between-step information is kept both as O(d^2) streaming
// accumulators (used by the subspace builder) and as an audit log of step
// means (used by dump/load and batch oracles).
struct WriteCalibrator {
  bool residualize_writes = true;

  std::optional<StepState> current;
  RunningMean partial_stored_mean;  // running mean of vectors stored this step

  ScatterMatrix scatter_within;  // pooled scatter of stored vectors about
                                 // their step means, accumulated streaming

  Matrix between_mm;  // sum_s n_s * m_s m_s^T  (m_s = logged raw step mean)
  Vector between_m;   // sum_s n_s * m_s
  double between_weight = 0.0;  // sum_s n_s

  std::vector<StepMeanRecord> step_means_log;
  std::set<std::int64_t> used_step_ids;
  std::int64_t write_counter = 0;
  int dim = 0;  // pinned by the first accepted write (0 = not yet pinned)
};

inline void calibrator_open_step(WriteCalibrator& c, std::int64_t step_id) {
  if (c.current && c.current->status == StepStatus::open)
    fail(errc::lifecycle, "a step is already open");
  if (c.used_step_ids.count(step_id))
    fail(errc::lifecycle, "step_id reused: " + std::to_string(step_id));
  c.current = StepState{step_id, RunningMean{}, StepStatus::open};
  c.partial_stored_mean = RunningMean{};
  c.used_step_ids.insert(step_id);
}

inline bool calibrator_step_open(const WriteCalibrator& c) {
  return c.current && c.current->status == StepStatus::open;
}

// Called after the novelty check accepted `stored_vec` (the vector that will
// be persisted: the residual in calibrated mode, the raw write otherwise).
// Accumulates the within-step scatter in Welford form -- the deviation from
// the pre-update partial mean, weighted by n_pre/n_post -- which sums to
// exactly the batch pooled scatter of stored vectors about their final step
// means. Then advances the partial mean and the raw step mean.
inline void calibrator_accept(WriteCalibrator& c, const Vector& raw,
                              const Vector& stored_vec) {
  const auto n_pre = c.partial_stored_mean.count;
  if (n_pre > 0) {
    const Vector dev = stored_vec - c.partial_stored_mean.mean;
    c.scatter_within =
        scatter_accumulate(std::move(c.scatter_within), dev,
                           static_cast<double>(n_pre) /
                               static_cast<double>(n_pre + 1));
  } else if (c.scatter_within.sum_outer.size() == 0) {
    c.scatter_within.sum_outer = Matrix::Zero(stored_vec.size(), stored_vec.size());
  }
  c.partial_stored_mean = welford_update(std::move(c.partial_stored_mean), stored_vec);
  c.current->mu = welford_update(std::move(c.current->mu), raw);
  c.write_counter += 1;
  if (c.dim == 0) c.dim = static_cast<int>(raw.size());
}

// Folds one closed step's raw mean into the between-step accumulators and
// the audit log. Empty steps (count 0) leave no trace.
inline void calibrator_log_step_mean(WriteCalibrator& c, Vector mean,
                                     std::int64_t count) {
  if (count <= 0) return;
  if (c.between_mm.size() == 0) {
    c.between_mm = Matrix::Zero(mean.size(), mean.size());
    c.between_m = Vector::Zero(mean.size());
  }
  const double w = static_cast<double>(count);
  c.between_mm.noalias() += w * mean * mean.transpose();
  c.between_m.noalias() += w * mean;
  c.between_weight += w;
  c.step_means_log.push_back(StepMeanRecord{std::move(mean), count});
}

inline void calibrator_close_step(WriteCalibrator& c) {
  if (!calibrator_step_open(c)) fail(errc::lifecycle, "no step is open");
  if (c.current->mu.count > 0)
    calibrator_log_step_mean(c, c.current->mu.mean,
                             static_cast<std::int64_t>(c.current->mu.count));
  c.current->status = StepStatus::closed;
  c.current.reset();
  c.partial_stored_mean = RunningMean{};
}

struct StoreState {
  std::vector<MemoryEntry> entries;  // append-only; entries never mutate
  WriteCalibrator calib;
  std::int64_t next_id = 0;
  bool keep_raw = true;  // when false, raw payloads are dropped at write time
};

inline void open_step(StoreState& s, std::int64_t step_id) {
  calibrator_open_step(s.calib, step_id);
}

inline void close_step(StoreState& s) { calibrator_close_step(s.calib); }

// h minus the running mean, computed with the pre-update mean. A mean with
// count 0 acts as the zero vector.
inline Vector residualize(const Vector& h, const RunningMean& mu) {
  if (mu.count == 0) return h;
  if (mu.mean.size() != h.size())
    fail(errc::rejected_input, "residualize: dimension mismatch");
  return h - mu.mean;
}

// Scans stored vectors; duplicate iff some cosine reaches 1 - 1e-6 or the
// residual itself carries no content signal (norm <= 1e-12).
template <class It, class GetVec>
Novelty novelty_scan(const Vector& h_tilde, It begin, It end, GetVec get) {
  const double hn = h_tilde.norm();
  if (hn <= kZeroResidualNorm) return Novelty::duplicate;
  for (It it = begin; it != end; ++it) {
    const Vector& v = get(*it);
    const double c = h_tilde.dot(v) / (hn * v.norm());
    if (c >= kDuplicateCosine) return Novelty::duplicate;
  }
  return Novelty::novel;
}

inline Novelty novelty_check(const Vector& h_tilde, const StoreState& s) {
  return novelty_scan(h_tilde, s.entries.begin(), s.entries.end(),
                      [](const MemoryEntry& e) -> const Vector& {
                        return e.calibrated;
                      });
}

inline WriteOutcome write(StoreState& s, const Vector& raw, int label,
                          Kind kind) {
  if (!calibrator_step_open(s.calib)) fail(errc::lifecycle, "no step is open");
  if (raw.size() == 0 || !raw.allFinite())
    fail(errc::rejected_input, "write: non-finite or empty vector");
  if (s.calib.dim != 0 && raw.size() != static_cast<Eigen::Index>(s.calib.dim))
    fail(errc::rejected_input, "write: dimension mismatch");

  const Vector stored_vec =
      s.calib.residualize_writes ? residualize(raw, s.calib.current->mu)
                                 : raw;
  if (novelty_check(stored_vec, s) == Novelty::duplicate)
    return WriteOutcome{false, -1};

  MemoryEntry e;
  e.id = s.next_id++;
  e.step_id = s.calib.current->step_id;
  if (s.keep_raw) e.raw = raw;
  e.calibrated = stored_vec;
  e.label = label;
  e.kind = kind;
  s.entries.push_back(std::move(e));
  calibrator_accept(s.calib, raw, stored_vec);
  return WriteOutcome{true, s.entries.back().id};
}

using EntryPredicate = std::function<bool(const MemoryEntry&)>;

// Exact scan; descending inner product with ties broken by ascending id.
// An optional predicate restricts the scanned population (retrieval gates).
inline std::vector<Candidate> retrieve_topk(const StoreState& s,
                                            const Vector& q, int k,
                                            const EntryPredicate& admit = {}) {
  if (k < 1) fail(errc::rejected_input, "retrieve_topk: k must be >= 1");
  if (s.entries.empty()) return {};
  if (q.size() != s.entries.front().calibrated.size())
    fail(errc::rejected_input, "retrieve_topk: query dimension mismatch");

  std::vector<Candidate> scored;
  scored.reserve(s.entries.size());
  for (const auto& e : s.entries) {
    if (admit && !admit(e)) continue;
    scored.push_back(Candidate{e.id, q.dot(e.calibrated), std::nullopt});
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

inline const MemoryEntry& entry_by_id(const StoreState& s, std::int64_t id) {
  if (id >= 0 && id < static_cast<std::int64_t>(s.entries.size())) {
    const auto& e = s.entries[static_cast<std::size_t>(id)];
    if (e.id == id) return e;  // fast path: ids are assigned sequentially
  }
  for (const auto& e : s.entries)
    if (e.id == id) return e;
  fail(errc::integrity, "dangling entry id: " + std::to_string(id));
}

// Bytes of shared calibration state that persist across writes: the pooled
// within scatter, the streaming between-step accumulators, the live step
// mean, the partial stored mean, and counters. Entry payloads and audit data
// (step-mean log, step-id bookkeeping) are excluded; the result depends only
// on dimension, never on entry count.
inline std::size_t calibration_state_bytes(const StoreState& s) {
  const std::size_t d = s.calib.dim == 0 ? 0 : static_cast<std::size_t>(s.calib.dim);
  std::size_t bytes = 0;
  bytes += d * d * sizeof(double);  // scatter_within
  bytes += sizeof(double);          // scatter_within weight
  bytes += d * d * sizeof(double);  // between_mm
  bytes += d * sizeof(double);      // between_m
  bytes += sizeof(double);          // between_weight
  bytes += d * sizeof(double);      // live step mean
  bytes += d * sizeof(double);      // partial stored mean
  bytes += 2 * sizeof(std::int64_t);  // mean counters
  bytes += sizeof(std::int64_t);      // write counter
  return bytes;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON persistence. First line is a header record carrying the
// dimension and the step-mean log; each further line is one entry. Dumping
// with an open step is a lifecycle error (persist at step boundaries). The
// within scatter and between accumulators are rebuilt on load: the between
// accumulators exactly from the log, the within scatter batch-wise from the
// stored vectors (equal to the streaming form up to rounding).
// ---------------------------------------------------------------------------

inline nlohmann::json vector_to_json(const Vector& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vector vector_from_json(const nlohmann::json& a) {
  if (!a.is_array()) fail(errc::io, "expected JSON array for vector");
  Vector v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

// Persistable slice of the calibration state: dimension, counters, and the
// step-mean log. The O(d^2) accumulators are derived data and are rebuilt on
// load rather than serialized.
inline nlohmann::json calibrator_header_json(const WriteCalibrator& c) {
  nlohmann::json header;
  header["d"] = c.dim;
  header["write_counter"] = c.write_counter;
  header["residualize_writes"] = c.residualize_writes;
  nlohmann::json log = nlohmann::json::array();
  for (const auto& r : c.step_means_log)
    log.push_back({{"mean", vector_to_json(r.mean)}, {"count", r.count}});
  header["step_means_log"] = std::move(log);
  return header;
}

inline void calibrator_load_header(WriteCalibrator& c,
                                   const nlohmann::json& header) {
  c.dim = header.at("d").get<int>();
  c.write_counter = header.at("write_counter").get<std::int64_t>();
  c.residualize_writes = header.at("residualize_writes").get<bool>();
  for (const auto& r : header.at("step_means_log"))
    calibrator_log_step_mean(c, vector_from_json(r.at("mean")),
                             r.at("count").get<std::int64_t>());
}

// Rebuilds the pooled within scatter batch-wise from stored vectors grouped
// by step (equal to the streaming form up to rounding).
template <class Range, class GetVec, class GetStep>
void rebuild_within_scatter(WriteCalibrator& c, const Range& items,
                            GetVec vec, GetStep step) {
  if (c.dim <= 0) return;
  c.scatter_within.sum_outer = Matrix::Zero(c.dim, c.dim);
  c.scatter_within.weight = 0.0;
  std::map<std::int64_t, std::vector<const Vector*>> by_step;
  for (const auto& item : items) by_step[step(item)].push_back(&vec(item));
  for (const auto& [sid, vecs] : by_step) {
    (void)sid;
    Vector m = Vector::Zero(c.dim);
    for (const auto* v : vecs) m += *v;
    m /= static_cast<double>(vecs.size());
    for (const auto* v : vecs) {
      const Vector dev = *v - m;
      c.scatter_within.sum_outer.noalias() += dev * dev.transpose();
      c.scatter_within.weight += 1.0;
    }
  }
}

inline void dump_store(const StoreState& s, std::ostream& out) {
  if (calibrator_step_open(s.calib))
    fail(errc::lifecycle, "dump with an open step; close it first");
  nlohmann::json header = calibrator_header_json(s.calib);
  header["record"] = "header";
  header["keep_raw"] = s.keep_raw;
  out << header.dump() << "\n";
  for (const auto& e : s.entries) {
    nlohmann::json j;
    j["record"] = "entry";
    j["id"] = e.id;
    j["step_id"] = e.step_id;
    if (e.raw.size() > 0)
      j["raw"] = vector_to_json(e.raw);
    else
      j["raw"] = nullptr;
    j["calibrated"] = vector_to_json(e.calibrated);
    j["label"] = e.label;
    j["kind"] = to_string(e.kind);
    out << j.dump() << "\n";
  }
  if (!out) fail(errc::io, "store dump failed while writing");
}

inline StoreState load_store(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(errc::io, "store load: empty input");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("record", "") != "header")
    fail(errc::io, "store load: missing header record");

  StoreState s;
  calibrator_load_header(s.calib, header);
  s.keep_raw = header.at("keep_raw").get<bool>();

  std::int64_t max_id = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || j.value("record", "") != "entry")
      fail(errc::io, "store load: malformed entry record");
    MemoryEntry e;
    e.id = j.at("id").get<std::int64_t>();
    e.step_id = j.at("step_id").get<std::int64_t>();
    if (!j.at("raw").is_null()) e.raw = vector_from_json(j.at("raw"));
    e.calibrated = vector_from_json(j.at("calibrated"));
    e.label = j.at("label").get<int>();
    e.kind = kind_from_string(j.at("kind").get<std::string>());
    max_id = std::max(max_id, e.id);
    s.calib.used_step_ids.insert(e.step_id);
    s.entries.push_back(std::move(e));
  }
  s.next_id = max_id + 1;
  rebuild_within_scatter(
      s.calib, s.entries,
      [](const MemoryEntry& e) -> const Vector& { return e.calibrated; },
      [](const MemoryEntry& e) { return e.step_id; });
  return s;
}

}  // namespace camel
