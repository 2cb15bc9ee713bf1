// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "idlab/cli.hpp"
#include "idlab/criteria.hpp"
#include "idlab/evalkit.hpp"
#include "idlab/trainer.hpp"
#include "support.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

using namespace idlab;
using M = Matrix<double>;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1 ------------------------------------------------------------------------

Verdict gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  const IdLayout lay{4, 16};
  const Index n = 8, dim = 16;
  const std::vector<int> groups{0, 1, 2, 2, 3, 4, 5, 6};
  const M pq = testing::random_simplex_rows(n, lay.length, lay.codes_per_slice, rng);
  const M pd = testing::random_simplex_rows(n, lay.length, lay.codes_per_slice, rng);
  const M eq = testing::unit_rows(n, dim, rng), ed = testing::unit_rows(n, dim, rng);
  double worst = 0.0;
  std::size_t kinks = 0;
  std::ostringstream per;
  auto check = [&](const std::string& name, const Expr<double>& f, const Bindings<double>& b) {
    const auto rep = finite_diff_check(f, b, 1e-6);
    worst = std::max(worst, rep.max_relative_error);
    kinks += rep.non_differentiable.size();
    per << " " << name << "=" << fmt("%.1e", rep.max_relative_error);
  };

  check("contrastive", [&](Graph<double>&, const VarMap<double>& v) {
    return contrastive_id_loss(v.at("q"), v.at("d"), groups, 3.0);
  }, {{"q", pq}, {"d", pd}});

  {
    Rng init(5);
    ParamStore<double> store;
    Decoder<double> dec(store, DecoderConfig{static_cast<int>(dim), 24, lay}, init);
    std::vector<DocId> gold;
    std::uniform_int_distribution<int> local(0, lay.codes_per_slice - 1);
    for (Index i = 0; i < n; ++i) {
      DocId id;
      for (int p = 0; p < lay.length; ++p) id.codes.push_back(p * lay.codes_per_slice + 1 + local(rng));
      gold.push_back(id);
    }
    check("generation", [&](Graph<double>& g, const VarMap<double>& v) {
      return generation_loss(dec.teacher_forced_log_probs(g, v.at("q"), gold), gold);
    }, {{"q", eq}});
    const auto pr = testing::param_fd(store, {"decoder.cond_w", "decoder.w1", "decoder.out_w"}, [&](Graph<double>& g) {
      return generation_loss(dec.teacher_forced_log_probs(g, g.constant(eq), gold), gold);
    });
    worst = std::max(worst, pr.max_relative_error);
    per << " generation-params=" << fmt("%.1e", pr.max_relative_error);
  }

  {
    const auto targets = density_targets(pd, groups, lay, DensityWeight::Complement);
    check("density", [&](Graph<double>&, const VarMap<double>& v) { return density_loss(v.at("p"), targets); },
          {{"p", pd}});
  }
  check("bottleneck", [&](Graph<double>&, const VarMap<double>& v) {
    return bottleneck_loss(v.at("q"), v.at("d"), groups, 0.05, 1e-6);
  }, {{"q", eq}, {"d", ed}});
  {
    const auto prior = estimate_prior(ed);
    check("ib", [&](Graph<double>&, const VarMap<double>& v) { return ib_loss(v.at("d"), prior, 0.01, 0.1); },
          {{"d", ed}});
  }

  for (IndexerKind kind : {IndexerKind::Pq, IndexerKind::Rq}) {
    IndexerConfig cfg;
    cfg.kind = kind;
    cfg.dim = static_cast<int>(dim);
    cfg.layout = lay;
    ParamStore<double> store;
    Rng init(9);
    auto idx = make_indexer(store, cfg, init);
    idx->init_codebooks(testing::unit_rows(256, dim, init), init);
    const std::string name = std::string(to_string(kind)) + "-mse";
    check(name, [&](Graph<double>& g, const VarMap<double>& v) {
      return idx->assign(g, v.at("e"), Mode::Eval, nullptr).mse;
    }, {{"e", ed}});
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs < 60.0,
          "max rel err " + fmt("%.2e", worst) + " (" + per.str().substr(1) + "), kinks " + std::to_string(kinks) +
              ", " + fmt("%.1f", secs) + "s"};
}

// 2 ------------------------------------------------------------------------

Verdict sinkhorn_contract() {
  Rng rng(202);
  const SinkhornParams sp{0.003, 100};
  double row_err = 0.0, col_dev = 0.0, shift_err = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const M cost = testing::uniform(32, 256, rng, 0.0, 1.0);
    const M p = sinkhorn(cost, sp);
    row_err = std::max(row_err, (p.rowwise().sum().array() - 1.0).abs().maxCoeff());
    col_dev = std::max(col_dev, (p.colwise().sum().array() - 32.0 / 256.0).abs().maxCoeff());
    M shifted = cost;
    const M shift = testing::uniform(32, 1, rng, -5.0, 5.0);
    for (Index r = 0; r < 32; ++r) shifted.row(r).array() += shift(r, 0);
    shift_err = std::max(shift_err, (sinkhorn(shifted, sp) - p).cwiseAbs().maxCoeff());
  }
  // Reported for context only: the same costs with a longer unroll.
  Rng again(202);
  double col_dev_400 = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const M cost = testing::uniform(32, 256, again, 0.0, 1.0);
    testing::uniform(32, 1, again, -5.0, 5.0);
    const M p = sinkhorn(cost, SinkhornParams{0.003, 400});
    col_dev_400 = std::max(col_dev_400, (p.colwise().sum().array() - 32.0 / 256.0).abs().maxCoeff());
  }
  return {row_err <= 1e-6 && col_dev <= 1e-3 && shift_err <= 1e-9,
          "row err " + fmt("%.1e", row_err) + ", column deviation " + fmt("%.2e", col_dev) +
              " (limit 1e-3; 400 iterations give " + fmt("%.2e", col_dev_400) + "), shift " + fmt("%.1e", shift_err)};
}

// 3 ------------------------------------------------------------------------

Verdict metric_oracles() {
  double worst = 0.0;
  std::size_t cases = 0;
  for (std::size_t m = 1; m <= 6; ++m) {
    for (std::size_t c = 0; c <= 8; ++c) {
      std::vector<std::size_t> order(m);
      std::iota(order.begin(), order.end(), 0);
      std::vector<std::size_t> target_pos;
      do {
        target_pos.push_back(static_cast<std::size_t>(std::find(order.begin(), order.end(), 0) - order.begin()));
      } while (std::next_permutation(order.begin(), order.end()));
      for (std::size_t k : {1, 5, 10}) {
        double recall = 0.0, rr = 0.0;
        for (std::size_t pos : target_pos) {
          const std::size_t rank = c + pos + 1;
          recall += rank <= k ? 1.0 : 0.0;
          rr += rank <= 10 ? 1.0 / static_cast<double>(rank) : 0.0;
        }
        const double count = static_cast<double>(target_pos.size());
        worst = std::max(worst, std::abs(expected_recall_at_k(c, m, k) - recall / count));
        worst = std::max(worst, std::abs(expected_mrr(c, m, 10) - rr / count));
        ++cases;
      }
    }
  }
  return {worst <= 1e-9, std::to_string(cases) + " (c,m,K) cases, max error " + fmt("%.1e", worst)};
}

// 4-6 ----------------------------------------------------------------------

/// Desk-scale run settings shared by the end-to-end criteria.
TrainConfig desk_config(std::uint64_t seed, long steps) {
  TrainConfig c;
  c.seed = seed;
  c.steps = steps;
  c.batch_size = 256;
  c.lr = 1e-3;
  c.mlp_output_scale = 10.0;
  c.steps_per_epoch = 750;
  c.encoder_lr_scale = 0.1;
  c.word_dropout = 0.3;
  c.log_interval = 1000;
  c.validate();
  return c;
}

struct Corpus {
  std::vector<PairRecord> train, heldout;
};

const Corpus& desk_corpus() {
  static const Corpus c = [] {
    auto synth = synth_corpus(16, 125, 2, 2048, 7);
    mark_heldout(synth.records, 2);
    return Corpus{filter_split(synth.records, "train"), filter_split(synth.records, "heldout")};
  }();
  return c;
}

struct RunResult {
  std::size_t unique_ids = 0, max_posting = 0;
  double r10 = 0, mrr = 0, seconds = 0;
};

RunResult train_and_eval(const TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const Corpus& corpus = desk_corpus();
  Trainer<float> tr(cfg, corpus.train);
  tr.run(nullptr);
  const auto& model = tr.model();
  std::vector<std::string> keys, texts;
  for (const auto& [k, t] : unique_documents(corpus.train)) {
    keys.push_back(k);
    texts.push_back(t);
  }
  const auto ids = model.assign(texts);
  IdStore store(model.layout());
  for (std::size_t i = 0; i < ids.size(); ++i) store.insert(ids[i], keys[i]);
  const Metrics m = evaluate(model, store, corpus.heldout);
  RunResult r;
  r.unique_ids = store.unique_id_count();
  r.max_posting = store.max_posting_size();
  r.r10 = m.overall.recall_expected.at(10);
  r.mrr = m.overall.mrr_expected;
  r.seconds = seconds_since(t0);
  return r;
}

std::string describe(const RunResult& r) {
  return "R@10 " + fmt("%.3f", r.r10) + " MRR@10 " + fmt("%.3f", r.mrr) + " ids " + std::to_string(r.unique_ids) +
         " max posting " + std::to_string(r.max_posting);
}

Verdict end_to_end() {
  const RunResult r = train_and_eval(desk_config(7, 5000));
  return {r.r10 >= 0.8 && r.mrr >= 0.5 && r.seconds <= 900.0,
          describe(r) + " (targets 0.8 / 0.5), " + fmt("%.0f", r.seconds) + "s"};
}

constexpr long kAblationSteps = 1500;

TrainConfig ablation(std::uint64_t seed, const std::string& disabled) {
  TrainConfig c = desk_config(seed, kAblationSteps);
  c.active = ActiveTerms::from_disabled(disabled);
  return c;
}

std::map<std::string, RunResult>& ablation_cache() {
  static std::map<std::string, RunResult> cache;
  return cache;
}

const RunResult& ablation_run(std::uint64_t seed, const std::string& disabled) {
  auto& cache = ablation_cache();
  const std::string key = std::to_string(seed) + "/" + disabled;
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, train_and_eval(ablation(seed, disabled))).first;
  return it->second;
}

Verdict balance_direction() {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {7, 8}) {
    const RunResult& full = ablation_run(seed, "");
    const RunResult& asi = ablation_run(seed, "di,bot,ib");
    const double ratio = static_cast<double>(full.unique_ids) / static_cast<double>(std::max<std::size_t>(1, asi.unique_ids));
    const bool seed_ok = ratio >= 1.2 && full.max_posting < asi.max_posting;
    ok = ok && seed_ok;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": ids " +
              std::to_string(full.unique_ids) + " vs " + std::to_string(asi.unique_ids) + " (x" + fmt("%.2f", ratio) +
              "), max posting " + std::to_string(full.max_posting) + " vs " + std::to_string(asi.max_posting);
  }
  return {ok, detail};
}

Verdict ablation_order() {
  const std::vector<std::pair<std::string, std::string>> ladder{
      {"full", ""}, {"-ib", "ib"}, {"-ib-bot", "bot,ib"}, {"asi", "di,bot,ib"}};
  std::vector<double> r;
  std::string detail;
  for (const auto& [name, disabled] : ladder) {
    r.push_back(ablation_run(7, disabled).r10);
    detail += (detail.empty() ? "" : ", ") + name + " " + fmt("%.3f", r.back());
  }
  int inversions = 0;
  bool small = true;
  for (std::size_t i = 0; i + 1 < r.size(); ++i) {
    if (r[i] < r[i + 1]) {
      ++inversions;
      small = small && r[i + 1] - r[i] <= 0.02;
    }
  }
  return {inversions == 0 || (inversions == 1 && small),
          "R@10 " + detail + ", inversions " + std::to_string(inversions)};
}

// 7 ------------------------------------------------------------------------

Verdict quantizer_contracts() {
  Rng rng(707);
  const IdLayout lay;
  const Index dim = 32;
  const M data = testing::unit_rows(1000, dim, rng);

  IndexerConfig rq_cfg;
  rq_cfg.kind = IndexerKind::Rq;
  rq_cfg.dim = static_cast<int>(dim);
  ParamStore<double> rq_store;
  RqIndexer<double> rq(rq_store, rq_cfg, rng);
  rq.init_codebooks(data, rng);
  const auto errs = rq.stage_errors(data);
  bool rq_ok = true;
  double prev = data.rowwise().squaredNorm().mean();
  std::string stages;
  for (double e : errs) {
    rq_ok = rq_ok && e <= prev;
    prev = e;
    stages += (stages.empty() ? "" : ">") + fmt("%.3f", e);
  }

  IndexerConfig pq_cfg;
  pq_cfg.kind = IndexerKind::Pq;
  pq_cfg.dim = static_cast<int>(dim);
  ParamStore<double> pq_store;
  PqIndexer<double> pq(pq_store, pq_cfg, rng);
  pq.init_codebooks(data, rng);
  bool pq_ok = true;
  {
    Graph<double> g;
    g.set_grad_enabled(false);
    const auto a = pq.assign(g, g.constant(data), Mode::Eval, nullptr);
    const Index sub = pq.sub_dim();
    for (Index i = 0; i < data.rows(); ++i) {
      for (int gi = 0; gi < lay.length; ++gi) {
        const Index c = a.selected[static_cast<std::size_t>(gi)][static_cast<std::size_t>(i)];
        pq_ok = pq_ok && a.quantized.value().row(i).segment(gi * sub, sub) == pq.codebook(gi).row(c);
      }
    }
  }

  // Shared assign contract on a toy configuration for every kind.
  bool shared_ok = true;
  double fd_worst = 0.0;
  const IdLayout toy{4, 8};
  for (IndexerKind kind : {IndexerKind::Mlp, IndexerKind::Pq, IndexerKind::Rq}) {
    IndexerConfig cfg;
    cfg.kind = kind;
    cfg.layout = toy;
    cfg.dim = 8;
    cfg.mlp_hidden = 12;
    cfg.sinkhorn = {0.5, 20};
    ParamStore<double> store;
    Rng r(17);
    auto idx = make_indexer(store, cfg, r);
    if (idx->has_codebooks()) idx->init_codebooks(testing::unit_rows(64, 8, r), r);
    const M e = testing::unit_rows(6, 8, r);
    const M p = idx->assign(e);
    for (Index row = 0; row < p.rows(); ++row) {
      for (int pos = 0; pos < toy.length; ++pos) {
        shared_ok = shared_ok && std::abs(p.row(row).segment(pos * 8, 8).sum() - 1.0) <= 1e-6;
      }
    }
    shared_ok = shared_ok && p.minCoeff() >= 0.0 && idx->assign(e) == p;
    for (const auto& id : idx->docids(e)) shared_ok = shared_ok && id.valid(toy);
    const M w = testing::uniform(6, toy.numeric_codes(), r);
    for (Mode mode : {Mode::Eval, Mode::Train}) {
      const auto rep = finite_diff_check<double>(
          [&](Graph<double>& g, const VarMap<double>& v) {
            return sum(mul(idx->assign(g, v.at("e"), mode, nullptr).probs, g.constant(w)));
          },
          {{"e", e}}, 1e-6);
      fd_worst = std::max(fd_worst, rep.max_relative_error);
    }
  }
  shared_ok = shared_ok && fd_worst <= 1e-4;
  return {rq_ok && pq_ok && shared_ok, "rq stage mse " + stages + (rq_ok ? " (non-increasing)" : " (INCREASES)") +
                                           ", pq bit-equal " + (pq_ok ? "yes" : "no") + ", shared suite " +
                                           (shared_ok ? "ok" : "broken") + " (fd " + fmt("%.1e", fd_worst) + ")"};
}

// 8 ------------------------------------------------------------------------

Verdict beam_properties() {
  const IdLayout lay;
  int greedy_match = 0, sorted = 0, valid = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(808, "beam-trial", static_cast<std::uint64_t>(trial)));
    ParamStore<double> store;
    Decoder<double> dec(store, DecoderConfig{16, 24, lay}, rng);
    const M q = testing::unit_rows(1, 16, rng);
    DecoderState<double> s{q, {}};
    for (int p = 0; p < lay.length; ++p) s.prefix.push_back(static_cast<int>(argmax_lowest(dec.decode_distribution(s).row(0))));
    const auto one = dec.beam_search(q, 1);
    greedy_match += one.size() == 1 && one[0].id.codes == s.prefix;
    const auto hits = dec.beam_search(q, 10);
    bool ok_sorted = hits.size() == 10, ok_valid = true;
    for (std::size_t i = 0; i < hits.size(); ++i) {
      ok_valid = ok_valid && hits[i].id.valid(lay);
      if (i + 1 < hits.size()) ok_sorted = ok_sorted && hits[i].log_prob >= hits[i + 1].log_prob;
    }
    sorted += ok_sorted;
    valid += ok_valid;
  }

  const IdLayout toy{2, 4};
  Rng rng(809);
  ParamStore<double> store;
  Decoder<double> dec(store, DecoderConfig{16, 24, toy}, rng);
  const M q = testing::unit_rows(1, 16, rng);
  std::vector<BeamHit<double>> all;
  for (int a = 1; a <= 4; ++a) {
    for (int b = 5; b <= 8; ++b) all.push_back({DocId{{a, b}}, dec.masked_log_prob(q, {a, b})});
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
    if (x.log_prob != y.log_prob) return x.log_prob > y.log_prob;
    return x.id < y.id;
  });
  const auto beam = dec.beam_search(q, 16);
  bool exhaustive = beam.size() == all.size();
  for (std::size_t i = 0; exhaustive && i < all.size(); ++i) {
    exhaustive = beam[i].id == all[i].id && std::abs(beam[i].log_prob - all[i].log_prob) <= 1e-12;
  }
  return {greedy_match == 100 && sorted == 100 && valid == 100 && exhaustive,
          "beam=1 vs greedy " + std::to_string(greedy_match) + "/100, sorted " + std::to_string(sorted) +
              "/100, slice-valid " + std::to_string(valid) + "/100, toy exhaustive " + (exhaustive ? "equal" : "differs")};
}

// 9 ------------------------------------------------------------------------

Verdict determinism() {
  const fs::path dir = fs::temp_directory_path() / "idlab-acceptance-determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_file_atomic(dir / "run.cfg",
                    "steps = 40\nbatch_size = 64\nlr = 1e-3\nembed_dim = 32\nhidden = 32\ndim = 32\n"
                    "decoder_hidden = 32\nmlp_hidden = 32\nlog_interval = 5\nword_dropout = 0.1\n");
  std::ostringstream sink;
  auto run = [&](std::vector<std::string> args) { return cli::run(args, sink, sink); };
  int rc = run({"synth", "--out", (dir / "corpus").string(), "--clusters", "8", "--docs-per-cluster", "20", "--vocab", "512"});
  for (const char* name : {"a", "b"}) {
    rc |= run({"train", "--config", (dir / "run.cfg").string(), "--corpus", (dir / "corpus" / "pairs.tsv").string(),
               "--seed", "9", "--out", (dir / name).string()});
    rc |= run({"assign", "--checkpoint", (dir / name / "final.ckpt").string(), "--docs",
               (dir / "corpus" / "docs.tsv").string(), "--out", (dir / name / "ids.tsv").string()});
  }
  if (rc != 0) return {false, "cli run failed: " + sink.str()};
  const auto a = load_retriever(load_checkpoint<float>(dir / "a" / "final.ckpt"));
  const auto b = load_retriever(load_checkpoint<float>(dir / "b" / "final.ckpt"));
  const bool params = a->params().hash() == b->params().hash();
  const bool logs = read_file(dir / "a" / "metrics.jsonl") == read_file(dir / "b" / "metrics.jsonl");
  const bool index = read_file(dir / "a" / "ids.tsv") == read_file(dir / "b" / "ids.tsv");
  const std::string hash = hex64(a->params().hash());
  fs::remove_all(dir);
  return {params && logs && index, std::string("params ") + (params ? "equal (" + hash + ")" : "differ") + ", logs " +
                                       (logs ? "byte-identical" : "differ") + ", index " +
                                       (index ? "byte-identical" : "differs")};
}

// 10 -----------------------------------------------------------------------

Verdict taxonomy() {
  const std::set<std::string> train_keys{"d1", "d2", "d3"};
  const std::set<DocId> train_ids{DocId{{1, 257, 513, 769}}, DocId{{2, 300, 600, 900}}};
  const std::vector<std::pair<std::string, DocId>> eval{
      {"d1", DocId{{1, 257, 513, 769}}},   // existing
      {"d3", DocId{{9, 260, 520, 780}}},   // existing even if re-assigned elsewhere
      {"n1", DocId{{2, 300, 600, 900}}},   // new content
      {"n2", DocId{{1, 257, 513, 769}}},   // new content
      {"n3", DocId{{1, 257, 513, 770}}},   // new semantic: differs in the last code
      {"n4", DocId{{256, 512, 768, 1024}}},
  };
  const std::vector<DocSplit> expect{DocSplit::Existing,   DocSplit::Existing,    DocSplit::NewContent,
                                     DocSplit::NewContent, DocSplit::NewSemantic, DocSplit::NewSemantic};
  const auto got = classify_new_docs(train_keys, train_ids, eval);
  std::size_t right = 0;
  for (std::size_t i = 0; i < got.size(); ++i) right += got[i] == expect[i];
  return {right == expect.size(), std::to_string(right) + "/" + std::to_string(expect.size()) + " classified"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"sinkhorn contract", sinkhorn_contract},
      {"metric oracles", metric_oracles},
      {"end-to-end retrieval", end_to_end},
      {"balance direction", balance_direction},
      {"ablation monotonicity", ablation_order},
      {"quantizer contracts", quantizer_contracts},
      {"beam search properties", beam_properties},
      {"determinism", determinism},
      {"new-document taxonomy", taxonomy},
  };
  // Optional argument: comma list of criterion numbers to run.
  std::set<int> only;
  if (argc > 1) {
    std::stringstream ss(argv[1]);
    std::string item;
    while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
  }
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(number)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << number << " " << criteria[i].first << ": " << v.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
