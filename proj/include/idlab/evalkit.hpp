#pragma once

// Retrieval metrics where documents sharing a DocId are ranked in a uniformly
// random order: buckets follow beam rank, and within the target's bucket every
// permutation is equally likely.

#include "idlab/idstore.hpp"
#include "idlab/retriever.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace idlab {

/// c documents precede the target's bucket of size m: probability that the
/// target lands in the top K.
inline double expected_recall_at_k(std::size_t c, std::size_t m, std::size_t k) {
  if (m == 0) return 0.0;
  if (c >= k) return 0.0;
  if (c + m <= k) return 1.0;
  return static_cast<double>(k - c) / static_cast<double>(m);
}

/// Expected reciprocal rank with ranks past `cutoff` scoring zero.
inline double expected_mrr(std::size_t c, std::size_t m, std::size_t cutoff = 10) {
  if (m == 0) return 0.0;
  const std::size_t upto = std::min(m, cutoff > c ? cutoff - c : 0);
  double s = 0.0;
  for (std::size_t j = 1; j <= upto; ++j) s += 1.0 / static_cast<double>(c + j);
  return s / static_cast<double>(m);
}

/// `rank` is the target's 1-based position under natural order (0: absent).
inline double deterministic_recall(std::size_t rank, std::size_t k) { return rank >= 1 && rank <= k ? 1.0 : 0.0; }
inline double deterministic_mrr(std::size_t rank, std::size_t cutoff = 10) {
  return rank >= 1 && rank <= cutoff ? 1.0 / static_cast<double>(rank) : 0.0;
}

struct Bucket {
  DocId id;
  std::size_t size = 0;
  bool has_target = false;
  double log_prob = 0.0;
};

struct RankedBuckets {
  std::vector<Bucket> buckets;
  std::vector<std::size_t> before;  // documents in buckets ranked ahead of j
  std::size_t total = 0;
  std::optional<std::size_t> target_bucket;
  std::size_t target_offset = 0;  // 0-based natural position inside its bucket

  void push(Bucket b, std::optional<std::size_t> offset = std::nullopt) {
    before.push_back(total);
    total += b.size;
    if (offset) {
      b.has_target = true;
      target_bucket = buckets.size();
      target_offset = *offset;
    }
    buckets.push_back(std::move(b));
  }

  bool found() const { return target_bucket.has_value(); }
  std::size_t c() const { return found() ? before[*target_bucket] : 0; }
  std::size_t m() const { return found() ? buckets[*target_bucket].size : 0; }
  std::size_t natural_rank() const { return found() ? c() + target_offset + 1 : 0; }
};

struct TruncationPolicy {
  std::size_t per_lookup = 1000;
  std::size_t per_query = 1000;
};

/// Expands beam hits into posting buckets. Each lookup keeps at most
/// per_lookup documents and the query as a whole at most per_query, taking
/// documents in beam order then natural order.
template <typename T>
RankedBuckets expand_buckets(const std::vector<BeamHit<T>>& hits, const IdStore& store,
                             const std::string& target_key, const TruncationPolicy& trunc = {}) {
  RankedBuckets rb;
  for (const auto& hit : hits) {
    if (rb.total >= trunc.per_query) break;
    const std::size_t room = std::min(trunc.per_lookup, trunc.per_query - rb.total);
    auto keys = store.lookup(hit.id, room);
    if (keys.empty()) continue;
    std::optional<std::size_t> offset;
    if (!rb.found()) {
      auto it = std::find(keys.begin(), keys.end(), target_key);
      if (it != keys.end()) offset = static_cast<std::size_t>(it - keys.begin());
    }
    rb.push(Bucket{hit.id, keys.size(), false, hit.log_prob}, offset);
  }
  return rb;
}

struct MetricSet {
  std::size_t queries = 0;
  std::map<int, double> recall_expected;
  std::map<int, double> recall_deterministic;
  double mrr_expected = 0.0;
  double mrr_deterministic = 0.0;
  double docs_per_query = 0.0;
};

struct Metrics {
  std::vector<int> ks{1, 5, 10};
  int mrr_cutoff = 10;
  MetricSet overall;
  std::map<std::string, MetricSet> per_split;
  std::size_t empty_queries = 0;
  std::size_t unique_ids = 0;
  std::size_t documents = 0;
};

struct QueryOutcome {
  std::string split;
  bool empty_query = false;
  RankedBuckets buckets;
};

inline Metrics aggregate(const std::vector<QueryOutcome>& outcomes, std::vector<int> ks = {1, 5, 10},
                         int mrr_cutoff = 10) {
  Metrics out;
  out.ks = ks;
  out.mrr_cutoff = mrr_cutoff;
  auto add = [&](MetricSet& s, const RankedBuckets& rb) {
    ++s.queries;
    s.docs_per_query += static_cast<double>(rb.total);
    const auto cut = static_cast<std::size_t>(mrr_cutoff);
    for (int k : ks) {
      const auto kk = static_cast<std::size_t>(k);
      s.recall_expected[k] += rb.found() ? expected_recall_at_k(rb.c(), rb.m(), kk) : 0.0;
      s.recall_deterministic[k] += deterministic_recall(rb.natural_rank(), kk);
    }
    s.mrr_expected += rb.found() ? expected_mrr(rb.c(), rb.m(), cut) : 0.0;
    s.mrr_deterministic += deterministic_mrr(rb.natural_rank(), cut);
  };
  auto finish = [&](MetricSet& s) {
    if (s.queries == 0) {
      for (int k : ks) s.recall_expected[k] = s.recall_deterministic[k] = 0.0;
      return;
    }
    const double n = static_cast<double>(s.queries);
    for (auto& kv : s.recall_expected) kv.second /= n;
    for (auto& kv : s.recall_deterministic) kv.second /= n;
    s.mrr_expected /= n;
    s.mrr_deterministic /= n;
    s.docs_per_query /= n;
  };
  for (const auto& o : outcomes) {
    if (o.empty_query) ++out.empty_queries;
    add(out.overall, o.buckets);
    add(out.per_split[o.split.empty() ? "all" : o.split], o.buckets);
  }
  finish(out.overall);
  for (auto& kv : out.per_split) finish(kv.second);
  return out;
}

struct EvalOptions {
  int beam = 10;
  std::vector<int> ks{1, 5, 10};
  int mrr_cutoff = 10;
  TruncationPolicy truncation;
};

/// Beam-search every query, expand hits through the store, and score the
/// pair's document key. Queries whose tokens are all unknown count as misses.
template <typename T>
Metrics evaluate(const Retriever<T>& model, const IdStore& store, const std::vector<PairRecord>& pairs,
                 const EvalOptions& opt = {},
                 const std::function<std::string(const PairRecord&)>& split_of = nullptr,
                 std::vector<QueryOutcome>* outcomes_out = nullptr) {
  std::vector<QueryOutcome> outcomes;
  std::vector<std::string> texts;
  for (const auto& p : pairs) texts.push_back(p.query);
  const Matrix<T> q = texts.empty() ? Matrix<T>() : model.encode(texts);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    QueryOutcome o;
    o.split = split_of ? split_of(pairs[i]) : pairs[i].split;
    if (all_unknown(model.tokenize(pairs[i].query))) {
      o.empty_query = true;
    } else {
      auto hits = model.retrieve_encoded(q.row(static_cast<Index>(i)), opt.beam);
      o.buckets = expand_buckets(hits, store, pairs[i].key, opt.truncation);
    }
    outcomes.push_back(std::move(o));
  }
  Metrics m = aggregate(outcomes, opt.ks, opt.mrr_cutoff);
  m.unique_ids = store.unique_id_count();
  m.documents = store.document_count();
  if (outcomes_out != nullptr) *outcomes_out = std::move(outcomes);
  return m;
}

enum class DocSplit { Existing, NewContent, NewSemantic };

inline std::string to_string(DocSplit s) {
  switch (s) {
    case DocSplit::Existing: return "existing";
    case DocSplit::NewContent: return "new_content";
    case DocSplit::NewSemantic: return "new_semantic";
  }
  return "?";
}

/// Existing: key seen in training. New content: unseen key whose DocId is a
/// training DocId. New semantic: unseen key with an unseen DocId.
inline std::vector<DocSplit> classify_new_docs(const std::set<std::string>& train_keys,
                                               const std::set<DocId>& train_ids,
                                               const std::vector<std::pair<std::string, DocId>>& eval) {
  std::vector<DocSplit> out;
  out.reserve(eval.size());
  for (const auto& [key, id] : eval) {
    if (train_keys.count(key)) out.push_back(DocSplit::Existing);
    else if (train_ids.count(id)) out.push_back(DocSplit::NewContent);
    else out.push_back(DocSplit::NewSemantic);
  }
  return out;
}

inline nlohmann::json to_json(const MetricSet& s) {
  nlohmann::json j;
  j["queries"] = s.queries;
  for (const auto& [k, v] : s.recall_expected) j["recall_expected"]["R@" + std::to_string(k)] = v;
  for (const auto& [k, v] : s.recall_deterministic) j["recall_deterministic"]["R@" + std::to_string(k)] = v;
  j["mrr_expected"] = s.mrr_expected;
  j["mrr_deterministic"] = s.mrr_deterministic;
  j["docs_per_query"] = s.docs_per_query;
  return j;
}

inline nlohmann::json metrics_report(const Metrics& m, const std::string& config_hash, const IdStore& store) {
  nlohmann::json j;
  j["overall"] = to_json(m.overall);
  j["mrr_cutoff"] = m.mrr_cutoff;
  for (const auto& [split, s] : m.per_split) j["splits"][split] = to_json(s);
  j["empty_queries"] = m.empty_queries;
  j["config_hash"] = config_hash;
  j["store"] = {{"unique_ids", store.unique_id_count()},
                {"documents", store.document_count()},
                {"max_posting", store.max_posting_size()},
                {"rejected", store.rejected()}};
  return j;
}

}  // namespace idlab
