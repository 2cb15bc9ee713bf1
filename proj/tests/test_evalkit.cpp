#include "idlab/evalkit.hpp"
#include "support.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

using namespace idlab;

namespace {

/// Average over every ordering of the target's bucket.
std::pair<double, double> permutation_oracle(std::size_t c, std::size_t m, std::size_t k, std::size_t cutoff) {
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  double recall = 0.0, rr = 0.0, count = 0.0;
  do {
    const std::size_t pos = static_cast<std::size_t>(std::find(order.begin(), order.end(), 0) - order.begin());
    const std::size_t rank = c + pos + 1;
    recall += rank <= k ? 1.0 : 0.0;
    rr += rank <= cutoff ? 1.0 / static_cast<double>(rank) : 0.0;
    count += 1.0;
  } while (std::next_permutation(order.begin(), order.end()));
  return {recall / count, rr / count};
}

QueryOutcome outcome(const std::vector<std::size_t>& sizes, std::optional<std::size_t> target_bucket,
                     std::size_t offset = 0, std::string split = "") {
  QueryOutcome o;
  o.split = std::move(split);
  for (std::size_t j = 0; j < sizes.size(); ++j) {
    Bucket b;
    b.size = sizes[j];
    o.buckets.push(b, target_bucket && *target_bucket == j ? std::optional<std::size_t>(offset) : std::nullopt);
  }
  return o;
}

}  // namespace

TEST_CASE("expected metric closed forms", "[evalkit]") {
  CHECK(expected_recall_at_k(0, 4, 1) == 0.25);
  CHECK(expected_recall_at_k(10, 3, 5) == 0.0);
  CHECK(expected_recall_at_k(2, 3, 5) == 1.0);
  CHECK(expected_recall_at_k(0, 0, 5) == 0.0);
  CHECK(expected_mrr(0, 1) == 1.0);
  CHECK(expected_mrr(0, 2) == 0.75);
  CHECK(expected_mrr(12, 2) == 0.0);
}

TEST_CASE("closed forms match permutation brute force", "[evalkit][property]") {
  for (std::size_t m = 1; m <= 6; ++m) {
    for (std::size_t c = 0; c <= 12; ++c) {
      for (std::size_t k : {1, 3, 5, 10}) {
        auto [r, rr] = permutation_oracle(c, m, k, 10);
        CHECK(std::abs(expected_recall_at_k(c, m, k) - r) <= 1e-9);
        CHECK(std::abs(expected_mrr(c, m, 10) - rr) <= 1e-9);
      }
    }
  }
}

TEST_CASE("expected recall is monotone", "[evalkit][property]") {
  for (std::size_t m = 1; m <= 20; ++m) {
    for (std::size_t c = 0; c <= 30; ++c) {
      for (std::size_t k = 1; k <= 30; ++k) {
        CHECK(expected_recall_at_k(c, m, k + 1) >= expected_recall_at_k(c, m, k));
        CHECK(expected_recall_at_k(c + 1, m, k) <= expected_recall_at_k(c, m, k));
      }
    }
  }
}

TEST_CASE("singleton buckets make both variants agree", "[evalkit][property]") {
  for (std::size_t c = 0; c <= 15; ++c) {
    for (std::size_t k = 1; k <= 12; ++k) {
      CHECK(expected_recall_at_k(c, 1, k) == deterministic_recall(c + 1, k));
    }
    CHECK(expected_mrr(c, 1, 10) == deterministic_mrr(c + 1, 10));
  }
}

TEST_CASE("hand-built five query fixture", "[evalkit]") {
  std::vector<QueryOutcome> outs;
  outs.push_back(outcome({1}, 0));                   // rank 1
  outs.push_back(outcome({2, 3}, 1, 2));             // c=2, m=3, natural rank 5
  outs.push_back(outcome({4}, 0, 1));                // c=0, m=4, natural rank 2
  outs.push_back(outcome({3, 3, 3, 3}, std::nullopt));  // miss
  outs.push_back(outcome({9, 4}, 1, 0));             // c=9, m=4, natural rank 10
  Metrics m = aggregate(outs);

  const double r1 = (1 + 0 + 0.25 + 0 + 0) / 5.0;
  const double r5 = (1 + 1 + 1 + 0 + 0) / 5.0;
  const double r10 = (1 + 1 + 1 + 0 + 0.25) / 5.0;
  const double mrr = (1 + (1.0 / 3 + 1.0 / 4 + 1.0 / 5) / 3 + (1 + 0.5 + 1.0 / 3 + 0.25) / 4 + 0 + 0.1 / 4) / 5.0;
  CHECK(m.overall.recall_expected.at(1) == Catch::Approx(r1).margin(1e-12));
  CHECK(m.overall.recall_expected.at(5) == Catch::Approx(r5).margin(1e-12));
  CHECK(m.overall.recall_expected.at(10) == Catch::Approx(r10).margin(1e-12));
  CHECK(m.overall.mrr_expected == Catch::Approx(mrr).margin(1e-12));

  CHECK(m.overall.recall_deterministic.at(1) == Catch::Approx(0.2).margin(1e-12));
  CHECK(m.overall.recall_deterministic.at(5) == Catch::Approx(0.6).margin(1e-12));
  CHECK(m.overall.recall_deterministic.at(10) == Catch::Approx(0.8).margin(1e-12));
  CHECK(m.overall.mrr_deterministic == Catch::Approx((1 + 0.2 + 0.5 + 0 + 0.1) / 5).margin(1e-12));
  CHECK(m.overall.docs_per_query == Catch::Approx((1 + 5 + 4 + 12 + 13) / 5.0).margin(1e-12));
  CHECK(m.overall.queries == 5);
  CHECK(m.overall.recall_expected.at(1) <= m.overall.recall_expected.at(5));
  CHECK(m.overall.recall_expected.at(5) <= m.overall.recall_expected.at(10));
}

TEST_CASE("per-split counts add up", "[evalkit][property]") {
  Rng rng(1);
  std::uniform_int_distribution<int> s(0, 2), size(1, 5);
  std::vector<QueryOutcome> outs;
  const char* names[] = {"existing", "new_content", "new_semantic"};
  for (int i = 0; i < 50; ++i) outs.push_back(outcome({static_cast<std::size_t>(size(rng))}, 0, 0, names[s(rng)]));
  Metrics m = aggregate(outs);
  std::size_t total = 0;
  for (const auto& [name, set] : m.per_split) total += set.queries;
  CHECK(total == m.overall.queries);
}

TEST_CASE("bucket expansion and truncation", "[evalkit]") {
  IdStore store;
  const DocId a{{1, 257, 513, 769}}, b{{2, 257, 513, 769}}, c{{3, 257, 513, 769}};
  for (int i = 0; i < 700; ++i) store.insert(a, "a" + std::to_string(i));
  for (int i = 0; i < 700; ++i) store.insert(b, "b" + std::to_string(i));
  store.insert(c, "c0");
  std::vector<BeamHit<double>> hits{{a, -0.1}, {DocId{{9, 257, 513, 769}}, -0.2}, {b, -0.3}, {c, -0.4}};

  auto rb = expand_buckets(hits, store, "b5");
  REQUIRE(rb.buckets.size() == 2);
  CHECK(rb.total == 1000);
  CHECK(rb.buckets[1].size == 300);
  CHECK(rb.c() == 700);
  CHECK(rb.m() == 300);
  CHECK(rb.natural_rank() == 706);
  CHECK(expand_buckets(hits, store, "b500").found() == false);

  auto per_lookup = expand_buckets(hits, store, "c0", TruncationPolicy{100, 100000});
  CHECK(per_lookup.total == 201);
  CHECK(per_lookup.c() == 200);
  CHECK(per_lookup.natural_rank() == 201);
}

TEST_CASE("end-to-end evaluation on a toy retriever", "[evalkit]") {
  std::vector<std::string> queries{"red apple", "green pear", "blue sky", "dark night"};
  Vocab vocab = Vocab::build(queries);
  ModelConfig cfg;
  cfg.encoder = EncoderConfig{0, 8, 8, 8};
  cfg.decoder = DecoderConfig{8, 8, IdLayout{2, 16}};
  cfg.indexer.kind = IndexerKind::Mlp;
  cfg.indexer.mlp_hidden = 8;
  Retriever<double> model(vocab, cfg, 5);

  std::vector<PairRecord> pairs;
  IdStore store(model.layout());
  std::set<DocId> tops;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    PairRecord r;
    r.query = queries[i];
    r.document = "doc " + std::to_string(i);
    r.key = "k" + std::to_string(i);
    pairs.push_back(r);
    tops.insert(model.retrieve(queries[i], 1).at(0).id);
  }
  REQUIRE(tops.size() == queries.size());

  SECTION("gold alone under the top beam") {
    for (const auto& p : pairs) store.insert(model.retrieve(p.query, 1)[0].id, p.key);
    Metrics m = evaluate(model, store, pairs);
    CHECK(m.overall.recall_expected.at(1) == 1.0);
    CHECK(m.overall.mrr_expected == 1.0);
    CHECK(m.overall.recall_deterministic.at(10) == 1.0);
    CHECK(m.overall.docs_per_query <= 10 * 1000);
    auto report = metrics_report(m, "abc", store);
    CHECK(report["overall"]["recall_expected"]["R@1"] == 1.0);
    CHECK(report["store"]["unique_ids"] == 4);
  }
  SECTION("gold never in the beam") {
    // 256 ids exist; park every gold document on the least likely one.
    std::vector<PairRecord> bad = pairs;
    for (auto& p : bad) {
      auto all = model.retrieve(p.query, 256);
      store.insert(all.back().id, p.key);
    }
    Metrics m = evaluate(model, store, bad);
    CHECK(m.overall.recall_expected.at(10) == 0.0);
    CHECK(m.overall.mrr_expected == 0.0);
  }
  SECTION("unknown-only queries count as misses") {
    std::vector<PairRecord> odd{pairs[0]};
    odd[0].query = "zzz qqq";
    store.insert(model.retrieve(pairs[0].query, 1)[0].id, pairs[0].key);
    Metrics m = evaluate(model, store, odd);
    CHECK(m.empty_queries == 1);
    CHECK(m.overall.recall_expected.at(10) == 0.0);
  }
}

TEST_CASE("new document classification", "[evalkit]") {
  std::set<std::string> keys{"seen"};
  std::set<DocId> ids{DocId{{1, 257, 513, 769}}};
  auto labels = classify_new_docs(keys, ids,
                                  {{"seen", DocId{{2, 257, 513, 769}}},
                                   {"fresh", DocId{{1, 257, 513, 769}}},
                                   {"other", DocId{{3, 257, 513, 769}}}});
  CHECK(labels == std::vector<DocSplit>{DocSplit::Existing, DocSplit::NewContent, DocSplit::NewSemantic});
  CHECK(to_string(DocSplit::NewContent) == "new_content");
}
