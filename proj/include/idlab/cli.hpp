#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "idlab/evalkit.hpp"
#include "idlab/idstore.hpp"
#include "idlab/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace idlab::cli {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DocRecord {
  std::string key;
  std::string text;
};

/// `key<TAB>text` lines; a line without a tab is text keyed by its content hash.
inline std::vector<DocRecord> load_docs(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<DocRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) out.push_back({content_key(line), line});
    else out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

inline std::string dump_docs(const std::vector<PairRecord>& records) {
  std::string out;
  for (const auto& [key, text] : unique_documents(records)) out += key + "\t" + text + "\n";
  return out;
}

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<long> steps;
  std::string indexer;
  std::optional<std::string> disable_loss;
  int beam = 10;
  std::string out;
  std::string format = "text";
  std::string corpus;
  std::string corpus_format = "tsv";
  std::string checkpoint;
  std::string resume;
  std::string docs;
  std::string index;
  std::string pairs;
  std::string query;
  std::string split;
  int max_depth = -1;
  std::size_t min_posting = 1;
  std::size_t truncate = 1000;
  // synth
  std::size_t clusters = 16, docs_per_cluster = 125, queries_per_doc = 2, vocab = 4096, heldout_stride = 2;
};

inline TrainConfig resolve_config(const Options& o) {
  TrainConfig cfg;
  if (!o.config.empty()) cfg = TrainConfig::parse(read_file(o.config));
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) cfg.steps = *o.steps;
  if (!o.indexer.empty()) cfg.set("indexer", o.indexer);
  if (o.disable_loss) cfg.set("disable_loss", *o.disable_loss);
  cfg.validate();
  return cfg;
}

inline std::unique_ptr<Retriever<float>> load_model(const std::string& path, std::string* config_hash = nullptr) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  const auto ckpt = load_checkpoint<float>(path);
  if (config_hash != nullptr) {
    *config_hash = nlohmann::json::parse(ckpt.meta).value("config_hash", std::string());
  }
  return load_retriever(ckpt);
}

inline IdStore load_index(const std::string& path, const IdLayout& layout) {
  if (path.empty()) throw UsageError("--index is required");
  return IdStore::from_index_file(read_file(path), layout);
}

/// Writes to --out when given, otherwise to stdout.
inline void emit(const Options& o, const std::string& text, std::ostream& out) {
  if (o.out.empty()) out << text;
  else write_file_atomic(o.out, text);
}

inline int cmd_synth(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw UsageError("synth needs --out DIR");
  auto corpus = synth_corpus(o.clusters, o.docs_per_cluster, o.queries_per_doc, o.vocab, o.seed.value_or(7));
  mark_heldout(corpus.records, o.heldout_stride);
  const fs::path dir(o.out);
  write_file_atomic(dir / "pairs.tsv", dump_pairs(corpus.records, PairFormat::Tsv));
  write_file_atomic(dir / "docs.tsv", dump_docs(corpus.records));
  write_file_atomic(dir / "clusters.tsv", dump_clusters(corpus));
  out << "wrote " << corpus.records.size() << " pairs, " << unique_documents(corpus.records).size()
      << " documents to " << dir.string() << "\n";
  return 0;
}

inline int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.out.empty()) throw UsageError("train needs --out DIR");
  if (o.corpus.empty()) throw UsageError("train needs --corpus FILE");
  auto report = load_pairs(o.corpus, parse_pair_format(o.corpus_format));
  // Records tagged with another split (e.g. heldout) are kept out of training.
  std::vector<PairRecord> records;
  for (auto& r : report.records) {
    if (r.split.empty() || r.split == "train") records.push_back(std::move(r));
  }
  if (records.empty()) throw DataError("no training records in " + o.corpus);

  std::unique_ptr<Trainer<float>> trainer;
  if (!o.resume.empty()) {
    if (!o.config.empty() || !o.overrides.empty() || o.seed || !o.indexer.empty() || o.disable_loss) {
      throw UsageError("--resume takes its config from the checkpoint (only --steps may change)");
    }
    trainer = std::make_unique<Trainer<float>>(load_checkpoint<float>(o.resume), records, o.steps);
  } else {
    trainer = std::make_unique<Trainer<float>>(resolve_config(o), records);
  }
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_file_atomic(dir / "config.txt", trainer->config().to_text());
  std::ostringstream log;
  int code = 0;
  try {
    trainer->run(&log, dir);
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << " (see " << (dir / "divergence.json").string() << ")\n";
    code = 2;
  }
  write_file_atomic(dir / "metrics.jsonl", log.str());
  if (code == 0) {
    out << "trained " << trainer->step() << " steps; params " << hex64(trainer->model().params().hash())
        << "; config " << hex64(trainer->config().hash()) << "\n";
  }
  return code;
}

inline int cmd_assign(const Options& o, std::ostream& out) {
  auto model = load_model(o.checkpoint);
  if (o.docs.empty()) throw UsageError("assign needs --docs FILE");
  const auto docs = load_docs(o.docs);
  std::vector<std::string> texts;
  for (const auto& d : docs) texts.push_back(d.text);
  const auto ids = model->assign(texts);
  IdStore store(model->layout());
  for (std::size_t i = 0; i < docs.size(); ++i) store.insert(ids[i], docs[i].key);
  emit(o, store.to_index_file(), out);
  return 0;
}

inline int cmd_retrieve(const Options& o, std::ostream& out) {
  auto model = load_model(o.checkpoint);
  const IdStore store = load_index(o.index, model->layout());
  if (o.beam < 1) throw UsageError("--beam must be >= 1");
  if (all_unknown(model->tokenize(o.query))) throw UsageError("query has no known tokens: '" + o.query + "'");
  const auto hits = model->retrieve(o.query, o.beam);
  std::size_t budget = o.truncate;
  std::string text;
  int rank = 0;
  for (const auto& hit : hits) {
    ++rank;
    const auto keys = store.lookup(hit.id, budget);
    budget -= keys.size();
    if (o.format == "records") {
      nlohmann::ordered_json j;
      j["rank"] = rank;
      j["id"] = hit.id.str();
      j["log_prob"] = hit.log_prob;
      j["documents"] = keys;
      text += j.dump() + "\n";
    } else {
      std::ostringstream line;
      line << rank << "\t" << hit.id.str() << "\t" << hit.log_prob << "\t";
      for (std::size_t i = 0; i < keys.size(); ++i) line << (i ? "," : "") << keys[i];
      text += line.str() + "\n";
    }
  }
  emit(o, text, out);
  return 0;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  std::string hash;
  auto model = load_model(o.checkpoint, &hash);
  const IdStore store = load_index(o.index, model->layout());
  if (o.pairs.empty()) throw UsageError("eval needs --pairs FILE");
  auto records = load_pairs(o.pairs, parse_pair_format(o.corpus_format)).records;
  if (!o.split.empty()) records = filter_split(records, o.split);
  EvalOptions opt;
  opt.beam = o.beam;
  opt.truncation = {o.truncate, o.truncate};
  const Metrics m = evaluate(*model, store, records, opt);
  const auto report = metrics_report(m, hash, store);
  if (o.format == "records") {
    emit(o, report.dump(2) + "\n", out);
  } else {
    std::ostringstream s;
    s << "queries " << m.overall.queries << " (empty " << m.empty_queries << ")\n";
    for (const auto& [k, v] : m.overall.recall_expected) s << "R@" << k << " " << v << "\n";
    s << "MRR@" << m.mrr_cutoff << " " << m.overall.mrr_expected << "\n";
    s << "D/Q " << m.overall.docs_per_query << "\n";
    s << "unique_ids " << store.unique_id_count() << "\n";
    emit(o, s.str(), out);
  }
  return 0;
}

inline IdLayout layout_for(const Options& o) {
  if (o.checkpoint.empty()) return IdLayout{};
  return load_model(o.checkpoint)->layout();
}

inline int cmd_analyze(const Options& o, std::ostream& out) {
  const IdStore store = load_index(o.index, layout_for(o));
  const auto hist = store.utilization_histogram();
  if (o.format == "records") {
    nlohmann::ordered_json j;
    j["unique_ids"] = store.unique_id_count();
    j["documents"] = store.document_count();
    j["max_posting"] = store.max_posting_size();
    j["rejected"] = store.rejected();
    for (const auto& [size, count] : hist) j["histogram"][std::to_string(size)] = count;
    emit(o, j.dump(2) + "\n", out);
  } else {
    emit(o, histogram_csv(hist), out);
  }
  return 0;
}

inline int cmd_export_tree(const Options& o, std::ostream& out) {
  const IdStore store = load_index(o.index, layout_for(o));
  emit(o, store.export_prefix_tree(o.max_depth, o.min_posting).dump(2) + "\n", out);
  return 0;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"generative retrieval with learned document identifiers", "idlab"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) { c->add_option("--out", o.out, "output file or directory"); };
  auto train_flags = [&](CLI::App* c) {
    c->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
    c->add_option("--set", o.overrides, "config override key=value (repeatable)");
    c->add_option("--seed", o.seed, "run seed");
    c->add_option("--indexer", o.indexer, "mlp|pq|rq")->check(CLI::IsMember({"mlp", "pq", "rq"}));
    c->add_option("--disable-loss", o.disable_loss, "comma list from di,bot,ib");
  };
  auto format_flag = [&](CLI::App* c) {
    c->add_option("--format", o.format, "text|records")->check(CLI::IsMember({"text", "records"}));
  };

  auto* synth = app.add_subcommand("synth", "write a synthetic clustered corpus");
  common(synth);
  synth->add_option("--seed", o.seed, "corpus seed (default 7)");
  synth->add_option("--clusters", o.clusters);
  synth->add_option("--docs-per-cluster", o.docs_per_cluster);
  synth->add_option("--queries-per-doc", o.queries_per_doc);
  synth->add_option("--vocab", o.vocab);
  synth->add_option("--heldout-stride", o.heldout_stride, "hold out one query of every n-th document");

  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  train_flags(train);
  train->add_option("--corpus", o.corpus, "training pairs")->check(CLI::ExistingFile);
  train->add_option("--corpus-format", o.corpus_format)->check(CLI::IsMember({"tsv", "jsonl"}));
  train->add_option("--steps", o.steps, "total steps (overrides the config)");
  train->add_option("--resume", o.resume, "continue from a training checkpoint")->check(CLI::ExistingFile);

  auto* assign = app.add_subcommand("assign", "assign DocIds to documents");
  common(assign);
  assign->add_option("--checkpoint", o.checkpoint)->check(CLI::ExistingFile);
  assign->add_option("--docs", o.docs, "key<TAB>text lines")->check(CLI::ExistingFile);

  auto* retrieve = app.add_subcommand("retrieve", "decode DocIds for one query");
  common(retrieve);
  format_flag(retrieve);
  retrieve->add_option("--checkpoint", o.checkpoint)->check(CLI::ExistingFile);
  retrieve->add_option("--index", o.index)->check(CLI::ExistingFile);
  retrieve->add_option("--beam", o.beam);
  retrieve->add_option("--truncate", o.truncate, "document cap per query");
  retrieve->add_option("query", o.query)->required();

  auto* eval = app.add_subcommand("eval", "score query/document pairs");
  common(eval);
  format_flag(eval);
  eval->add_option("--checkpoint", o.checkpoint)->check(CLI::ExistingFile);
  eval->add_option("--index", o.index)->check(CLI::ExistingFile);
  eval->add_option("--pairs", o.pairs)->check(CLI::ExistingFile);
  eval->add_option("--pairs-format", o.corpus_format)->check(CLI::IsMember({"tsv", "jsonl"}));
  eval->add_option("--split", o.split, "only pairs tagged with this split");
  eval->add_option("--beam", o.beam);
  eval->add_option("--truncate", o.truncate, "document cap per lookup and per query");

  auto* analyze = app.add_subcommand("analyze-utilization", "posting-size histogram of an index");
  common(analyze);
  format_flag(analyze);
  analyze->add_option("--index", o.index)->check(CLI::ExistingFile);
  analyze->add_option("--checkpoint", o.checkpoint, "takes the id layout from here")->check(CLI::ExistingFile);

  auto* tree = app.add_subcommand("export-tree", "prefix tree of an index");
  common(tree);
  tree->add_option("--index", o.index)->check(CLI::ExistingFile);
  tree->add_option("--checkpoint", o.checkpoint, "takes the id layout from here")->check(CLI::ExistingFile);
  tree->add_option("--max-depth", o.max_depth);
  tree->add_option("--min-posting", o.min_posting);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(o, out);
    if (*train) return cmd_train(o, out, err);
    if (*assign) return cmd_assign(o, out);
    if (*retrieve) return cmd_retrieve(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*analyze) return cmd_analyze(o, out);
    if (*tree) return cmd_export_tree(o, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"idlab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace idlab::cli
