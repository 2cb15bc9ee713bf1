#pragma once

// Joint training of encoder, indexer and decoder: schedules, AdamW with
// global-norm clipping, checkpoint/resume and the JSON-lines metrics log.
//
// Randomness is stateless per step (batch order per epoch, dropout per step),
// so a checkpoint only needs parameters, optimizer moments, the step counter
// and quantizer usage counts to continue bit-identically.

#include "idlab/criteria.hpp"
#include "idlab/retriever.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace idlab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  // optimization
  long steps = 2000;
  long batch_size = 256;
  double lr = 1e-4;
  long warmup = -1;  // -1: 5% of steps
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 5.0;
  bool cosine_decay = false;
  double encoder_lr_scale = 1.0;  // lr multiplier for encoder.* tensors
  double word_dropout = 0.0;      // per-token drop probability while training
  double doc_ce_weight = 0.0;     // extra generation term decoding a document's own id
  // objective
  Hyper hyper;
  ActiveTerms active;
  // model
  IndexerKind indexer = IndexerKind::Mlp;
  int embed_dim = 128;
  int hidden = 256;
  int dim = 128;
  int decoder_hidden = 256;
  int mlp_hidden = 256;
  double mlp_output_scale = 1.0;
  double dropout = 0.2;
  int id_length = 4;
  int codes_per_slice = 256;
  double sinkhorn_epsilon = 0.003;
  int sinkhorn_iterations = 100;
  long max_length = 32;
  long min_count = 1;
  // bookkeeping
  std::uint64_t seed = 7;
  long checkpoint_interval = 0;  // 0: only at the end
  long steps_per_epoch = -1;     // -1: batches per epoch of the corpus
  long log_interval = 50;
  long probe_size = 512;
  long reseed_interval = 200;

  long effective_warmup() const { return warmup < 0 ? steps / 20 : warmup; }

  void validate() const {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (effective_warmup() > steps) throw ConfigError("warmup must not exceed steps");
    if (lr <= 0) throw ConfigError("lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0,1)");
    if (id_length < 1 || codes_per_slice < 2) throw ConfigError("id layout too small");
    if (indexer == IndexerKind::Pq && dim % id_length != 0) {
      throw ConfigError("pq needs dim divisible by id_length");
    }
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0,1)");
    if (word_dropout < 0 || word_dropout >= 1) throw ConfigError("word_dropout must lie in [0,1)");
    if (encoder_lr_scale < 0) throw ConfigError("encoder_lr_scale must be >= 0");
    if (doc_ce_weight < 0) throw ConfigError("doc_ce_weight must be >= 0");
    if (log_interval < 1) throw ConfigError("log_interval must be >= 1");
    SinkhornParams{sinkhorn_epsilon, sinkhorn_iterations}.validate();
  }

  /// Applies one `key = value` setting; unknown keys are fatal.
  void set(const std::string& key, const std::string& value) {
    auto as_long = [&] {
      std::size_t used = 0;
      long v = 0;
      try {
        v = std::stol(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != value.size() || value.empty()) throw ConfigError("'" + key + "' expects an integer, got '" + value + "'");
      return v;
    };
    auto as_double = [&] {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != value.size() || value.empty()) throw ConfigError("'" + key + "' expects a number, got '" + value + "'");
      return v;
    };
    auto as_bool = [&] {
      if (value == "true" || value == "1") return true;
      if (value == "false" || value == "0") return false;
      throw ConfigError("'" + key + "' expects true|false, got '" + value + "'");
    };
    try {
      if (key == "steps") steps = as_long();
      else if (key == "batch_size") batch_size = as_long();
      else if (key == "lr") lr = as_double();
      else if (key == "warmup") warmup = as_long();
      else if (key == "beta1") beta1 = as_double();
      else if (key == "beta2") beta2 = as_double();
      else if (key == "adam_eps") adam_eps = as_double();
      else if (key == "weight_decay") weight_decay = as_double();
      else if (key == "clip_norm") clip_norm = as_double();
      else if (key == "cosine_decay") cosine_decay = as_bool();
      else if (key == "encoder_lr_scale") encoder_lr_scale = as_double();
      else if (key == "word_dropout") word_dropout = as_double();
      else if (key == "doc_ce_weight") doc_ce_weight = as_double();
      else if (key == "alpha") hyper.alpha = as_double();
      else if (key == "lambda") hyper.lambda = as_double();
      else if (key == "gamma") hyper.gamma = as_double();
      else if (key == "beta") hyper.beta = as_double();
      else if (key == "quant_weight") hyper.quant_weight = as_double();
      else if (key == "sigma0") hyper.sigma0 = as_double();
      else if (key == "var_floor") hyper.var_floor = as_double();
      else if (key == "dist_eps") hyper.dist_eps = as_double();
      else if (key == "density_weight") hyper.density_weight = parse_density_weight(value);
      else if (key == "disable_loss") active = ActiveTerms::from_disabled(value);
      else if (key == "indexer") indexer = parse_indexer_kind(value);
      else if (key == "embed_dim") embed_dim = static_cast<int>(as_long());
      else if (key == "hidden") hidden = static_cast<int>(as_long());
      else if (key == "dim") dim = static_cast<int>(as_long());
      else if (key == "decoder_hidden") decoder_hidden = static_cast<int>(as_long());
      else if (key == "mlp_hidden") mlp_hidden = static_cast<int>(as_long());
      else if (key == "mlp_output_scale") mlp_output_scale = as_double();
      else if (key == "dropout") dropout = as_double();
      else if (key == "id_length") id_length = static_cast<int>(as_long());
      else if (key == "codes_per_slice") codes_per_slice = static_cast<int>(as_long());
      else if (key == "sinkhorn_epsilon") sinkhorn_epsilon = as_double();
      else if (key == "sinkhorn_iterations") sinkhorn_iterations = static_cast<int>(as_long());
      else if (key == "max_length") max_length = as_long();
      else if (key == "min_count") min_count = as_long();
      else if (key == "seed") seed = static_cast<std::uint64_t>(as_long());
      else if (key == "checkpoint_interval") checkpoint_interval = as_long();
      else if (key == "steps_per_epoch") steps_per_epoch = as_long();
      else if (key == "log_interval") log_interval = as_long();
      else if (key == "probe_size") probe_size = as_long();
      else if (key == "reseed_interval") reseed_interval = as_long();
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }

  /// `key = value` lines; `#` starts a comment.
  static TrainConfig parse(const std::string& text) { return parse(text, TrainConfig{}); }

  static TrainConfig parse(const std::string& text, TrainConfig base) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
      };
      if (trim(line).empty()) continue;
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    base.validate();
    return base;
  }

  /// Canonical text: one line per key, sorted, round-trips through parse().
  std::string to_text() const {
    std::map<std::string, std::string> kv;
    auto num = [](double v) {
      std::ostringstream o;
      o.precision(17);
      o << v;
      return o.str();
    };
    kv["steps"] = std::to_string(steps);
    kv["batch_size"] = std::to_string(batch_size);
    kv["lr"] = num(lr);
    kv["warmup"] = std::to_string(warmup);
    kv["beta1"] = num(beta1);
    kv["beta2"] = num(beta2);
    kv["adam_eps"] = num(adam_eps);
    kv["weight_decay"] = num(weight_decay);
    kv["clip_norm"] = num(clip_norm);
    kv["cosine_decay"] = cosine_decay ? "true" : "false";
    kv["encoder_lr_scale"] = num(encoder_lr_scale);
    kv["word_dropout"] = num(word_dropout);
    kv["doc_ce_weight"] = num(doc_ce_weight);
    kv["alpha"] = num(hyper.alpha);
    kv["lambda"] = num(hyper.lambda);
    kv["gamma"] = num(hyper.gamma);
    kv["beta"] = num(hyper.beta);
    kv["quant_weight"] = num(hyper.quant_weight);
    kv["sigma0"] = num(hyper.sigma0);
    kv["var_floor"] = num(hyper.var_floor);
    kv["dist_eps"] = num(hyper.dist_eps);
    kv["density_weight"] = to_string(hyper.density_weight);
    kv["disable_loss"] = active.disabled_csv();
    kv["indexer"] = to_string(indexer);
    kv["embed_dim"] = std::to_string(embed_dim);
    kv["hidden"] = std::to_string(hidden);
    kv["dim"] = std::to_string(dim);
    kv["decoder_hidden"] = std::to_string(decoder_hidden);
    kv["mlp_hidden"] = std::to_string(mlp_hidden);
    kv["mlp_output_scale"] = num(mlp_output_scale);
    kv["dropout"] = num(dropout);
    kv["id_length"] = std::to_string(id_length);
    kv["codes_per_slice"] = std::to_string(codes_per_slice);
    kv["sinkhorn_epsilon"] = num(sinkhorn_epsilon);
    kv["sinkhorn_iterations"] = std::to_string(sinkhorn_iterations);
    kv["max_length"] = std::to_string(max_length);
    kv["min_count"] = std::to_string(min_count);
    kv["seed"] = std::to_string(seed);
    kv["checkpoint_interval"] = std::to_string(checkpoint_interval);
    kv["steps_per_epoch"] = std::to_string(steps_per_epoch);
    kv["log_interval"] = std::to_string(log_interval);
    kv["probe_size"] = std::to_string(probe_size);
    kv["reseed_interval"] = std::to_string(reseed_interval);
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
  }

  std::uint64_t hash() const { return fnv1a(to_text()); }

  ModelConfig model_config(std::size_t vocab_size) const {
    ModelConfig m;
    m.encoder = {static_cast<int>(vocab_size), embed_dim, hidden, dim};
    IdLayout layout{id_length, codes_per_slice};
    m.decoder = {dim, decoder_hidden, layout};
    m.indexer.kind = indexer;
    m.indexer.layout = layout;
    m.indexer.dim = dim;
    m.indexer.mlp_hidden = mlp_hidden;
    m.indexer.output_init_scale = mlp_output_scale;
    m.indexer.dropout = dropout;
    m.indexer.sinkhorn = {sinkhorn_epsilon, sinkhorn_iterations};
    m.max_length = static_cast<std::size_t>(max_length);
    return m;
  }
};

/// Linear ramp from 0.01 at step 0 to `target` at `steps_per_epoch`, then flat.
inline double lambda_schedule(long step, long steps_per_epoch, double target) {
  if (step < 0) throw std::invalid_argument("lambda_schedule: negative step");
  if (steps_per_epoch <= 0 || step >= steps_per_epoch) return target;
  const double start = 0.01;
  return start + (target - start) * static_cast<double>(step) / static_cast<double>(steps_per_epoch);
}

/// Linear warmup from 0 to base_lr, constant afterwards.
inline double lr_schedule(long step, long warmup, double base_lr) {
  if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
  if (warmup <= 0 || step >= warmup) return base_lr;
  return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
}

/// Warmup followed by a half-cosine down to zero at `total`.
inline double cosine_lr_schedule(long step, long warmup, long total, double base_lr) {
  if (step < warmup) return lr_schedule(step, warmup, base_lr);
  if (total <= warmup) return base_lr;
  const double t = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Adam moments with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
  };

  explicit AdamW(Options opt = {}) : opt_(opt) {}

  /// Tensors whose name starts with `prefix` use lr * factor.
  void set_lr_scale(std::string prefix, double factor) { scales_[std::move(prefix)] = factor; }

  const Options& options() const { return opt_; }
  long steps_taken() const { return t_; }
  void set_steps_taken(long t) { t_ = t; }
  std::map<std::string, Matrix<T>>& first_moments() { return m_; }
  std::map<std::string, Matrix<T>>& second_moments() { return v_; }
  const std::map<std::string, Matrix<T>>& first_moments() const { return m_; }
  const std::map<std::string, Matrix<T>>& second_moments() const { return v_; }

  void step(ParamStore<T>& store, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(opt_.eps);
    for (auto& [name, t] : store.tensors()) {
      const double tlr = lr * lr_scale(name);
      const T step_size = static_cast<T>(tlr / c1);
      const T decay = static_cast<T>(1.0 - tlr * opt_.weight_decay);
      auto& m = moment(m_, name, t.value);
      auto& v = moment(v_, name, t.value);
      t.value *= decay;
      if (!t.has_grad()) continue;
      m.array() = b1 * m.array() + (T(1) - b1) * t.grad.array();
      v.array() = b2 * v.array() + (T(1) - b2) * t.grad.array().square();
      t.value.array() -= step_size * m.array() / ((v.array() * inv_c2).sqrt() + eps);
    }
  }

 private:
  static Matrix<T>& moment(std::map<std::string, Matrix<T>>& store, const std::string& name,
                           const Matrix<T>& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Matrix<T>::Zero(like.rows(), like.cols())).first;
    return it->second;
  }

  double lr_scale(const std::string& name) const {
    for (const auto& [prefix, f] : scales_) {
      if (name.rfind(prefix, 0) == 0) return f;
    }
    return 1.0;
  }

  Options opt_;
  long t_ = 0;
  std::map<std::string, Matrix<T>> m_, v_;
  std::map<std::string, double> scales_;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (const auto& kv : store.tensors()) {
    if (kv.second.has_grad()) sq += static_cast<double>(kv.second.grad.squaredNorm());
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& kv : store.tensors()) {
      if (kv.second.has_grad()) kv.second.grad *= s;
    }
  }
  return norm;
}

struct StepResult {
  long step = 0;
  LossBreakdown loss;
  double lambda = 0;
  double lr = 0;
  double grad_norm = 0;
  std::size_t clamped = 0;
};

template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, const std::vector<PairRecord>& records)
      : cfg_(std::move(cfg)), records_(&records) {
    cfg_.validate();
    std::vector<std::string> texts;
    for (const auto& r : records) {
      texts.push_back(r.query);
      texts.push_back(r.document);
    }
    init(Vocab::build(texts, static_cast<std::size_t>(cfg_.min_count)));
    if (model_->indexer().has_codebooks()) {
      Rng rng(derive_seed(cfg_.seed, "codebook-init"));
      std::vector<std::string> docs;
      for (const auto& [key, text] : unique_documents(records)) docs.push_back(text);
      if (docs.size() > 4096) docs.resize(4096);
      model_->indexer().init_codebooks(model_->encode(docs), rng);
    }
  }

  /// Continues from a checkpoint written by checkpoint(); the corpus must be
  /// the one the run started with.
  Trainer(const CheckpointData<T>& ckpt, const std::vector<PairRecord>& records,
          std::optional<long> steps_override = std::nullopt)
      : records_(&records) {
    const nlohmann::json meta = nlohmann::json::parse(ckpt.meta);
    cfg_ = TrainConfig::parse(meta.at("config").get<std::string>());
    if (steps_override) cfg_.steps = *steps_override;
    init(Vocab::from_words(meta.at("vocab").get<std::vector<std::string>>()));
    restore_params(model_->params(), ckpt.tensors, "param/");
    for (const auto& [name, m] : ckpt.tensors) {
      if (name.rfind("adam_m/", 0) == 0) opt_.first_moments()[name.substr(7)] = m;
      if (name.rfind("adam_v/", 0) == 0) opt_.second_moments()[name.substr(7)] = m;
    }
    step_ = meta.at("step").get<long>();
    opt_.set_steps_taken(meta.at("optimizer_steps").get<long>());
    model_->indexer().set_usage(meta.at("usage").get<std::vector<std::vector<std::size_t>>>());
  }

  const TrainConfig& config() const { return cfg_; }
  Retriever<T>& model() { return *model_; }
  const Retriever<T>& model() const { return *model_; }
  long step() const { return step_; }
  long steps_per_epoch() const {
    return cfg_.steps_per_epoch < 0 ? static_cast<long>(stream_->batches_per_epoch()) : cfg_.steps_per_epoch;
  }

  /// One optimization step on batch number step().
  StepResult train_step() {
    StepResult r;
    r.step = step_;
    r.lambda = lambda_schedule(step_, steps_per_epoch(), cfg_.hyper.lambda);
    r.lr = cfg_.cosine_decay ? cosine_lr_schedule(step_, cfg_.effective_warmup(), cfg_.steps, cfg_.lr)
                             : lr_schedule(step_, cfg_.effective_warmup(), cfg_.lr);
    Batch batch = stream_->at(static_cast<std::size_t>(step_));
    last_batch_ = batch.record_index;

    Graph<T> g;
    Var<T> total = objective(g, batch, r);
    auto& store = model_->params();
    store.zero_grad();
    g.backward(total);
    r.grad_norm = clip_grad_norm(store, cfg_.clip_norm);
    if (!std::isfinite(r.grad_norm)) throw NonFiniteError("gradient norm");
    opt_.step(store, r.lr);

    auto& ix = model_->indexer();
    if (ix.has_codebooks() && cfg_.reseed_interval > 0 && (step_ + 1) % cfg_.reseed_interval == 0) {
      Rng rng(derive_seed(cfg_.seed, "reseed", static_cast<std::uint64_t>(step_)));
      ix.reseed_dead_codes(model_->encoder().encode(batch.documents), rng);
    }
    ++step_;
    return r;
  }

  /// Loss of one batch without touching parameters (used by tests).
  LossBreakdown evaluate_loss(const Batch& batch, long at_step) {
    StepResult r;
    r.step = at_step;
    r.lambda = lambda_schedule(at_step, steps_per_epoch(), cfg_.hyper.lambda);
    Graph<T> g;
    objective(g, batch, r);
    return r.loss;
  }

  Batch batch_at(long step) { return stream_->at(static_cast<std::size_t>(step)); }

  /// Distinct inference-mode DocIds over the fixed probe documents.
  std::size_t probe_unique_ids() const {
    if (probe_.empty()) return 0;
    auto ids = model_->indexer().docids(model_->encoder().encode(probe_));
    std::set<DocId> uniq(ids.begin(), ids.end());
    return uniq.size();
  }

  nlohmann::json log_record(const StepResult& r) const {
    nlohmann::json j;
    j["step"] = r.step;
    j["l_c"] = r.loss.l_c;
    j["l_ce"] = r.loss.l_ce;
    auto opt = [](bool on, double v) { return on ? nlohmann::json(v) : nlohmann::json(nullptr); };
    j["l_di"] = opt(r.loss.active.di, r.loss.l_di);
    j["l_bot"] = opt(r.loss.active.bot, r.loss.l_bot);
    j["l_ib"] = opt(r.loss.active.ib, r.loss.l_ib);
    j["l_quant"] = opt(r.loss.has_quant, r.loss.l_quant);
    j["total"] = r.loss.total;
    j["lambda"] = r.lambda;
    j["lr"] = r.lr;
    j["grad_norm"] = r.grad_norm;
    j["clamped"] = r.clamped;
    j["unique_ids"] = probe_unique_ids();
    return j;
  }

  CheckpointData<T> checkpoint() const {
    CheckpointData<T> c;
    nlohmann::json meta;
    meta["format"] = "idlab-train";
    meta["step"] = step_;
    meta["optimizer_steps"] = opt_.steps_taken();
    meta["config"] = cfg_.to_text();
    meta["config_hash"] = hex64(cfg_.hash());
    meta["model"] = model_->config().to_json();
    meta["vocab"] = model_->vocab().words();
    meta["rng"] = {{"seed", cfg_.seed}, {"next_step", step_}};
    meta["usage"] = model_->indexer().usage();
    c.meta = meta.dump();
    for (const auto& [name, t] : model_->params().tensors()) c.tensors["param/" + name] = t.value;
    for (const auto& [name, m] : opt_.first_moments()) c.tensors["adam_m/" + name] = m;
    for (const auto& [name, m] : opt_.second_moments()) c.tensors["adam_v/" + name] = m;
    return c;
  }

  /// Trains up to config().steps. Log records go to `log` (one JSON object per
  /// line); `out_dir`, when set, receives periodic and final checkpoints and
  /// the divergence dump.
  void run(std::ostream* log, const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
    while (step_ < cfg_.steps) {
      StepResult r;
      try {
        r = train_step();
      } catch (const NonFiniteError& e) {
        // Parameters are only written after a finite backward pass, so the
        // current state is the last good one.
        nlohmann::json dump = {{"step", step_}, {"error", e.what()}, {"batch", last_batch_},
                               {"config_hash", hex64(cfg_.hash())}};
        if (out_dir) {
          save_checkpoint(*out_dir / "last_good.ckpt", checkpoint());
          write_file_atomic(*out_dir / "divergence.json", dump.dump(2) + "\n");
        }
        throw TrainingDiverged("non-finite value at step " + std::to_string(step_) + ": " + e.what());
      }
      const bool last = step_ == cfg_.steps;
      if (log != nullptr && (r.step % cfg_.log_interval == 0 || last)) {
        *log << log_record(r).dump() << "\n";
        log->flush();
      }
      if (out_dir && cfg_.checkpoint_interval > 0 && step_ % cfg_.checkpoint_interval == 0 && !last) {
        save_checkpoint(*out_dir / ("step" + std::to_string(step_) + ".ckpt"), checkpoint());
      }
    }
    if (out_dir) save_checkpoint(*out_dir / "final.ckpt", checkpoint());
  }

 private:
  void init(Vocab vocab) {
    model_ = std::make_unique<Retriever<T>>(std::move(vocab), cfg_.model_config(0), cfg_.seed);
    opt_ = AdamW<T>({cfg_.beta1, cfg_.beta2, cfg_.adam_eps, cfg_.weight_decay});
    if (cfg_.encoder_lr_scale != 1.0) opt_.set_lr_scale("encoder.", cfg_.encoder_lr_scale);
    stream_ = std::make_unique<BatchStream>(*records_, model_->vocab(), static_cast<std::size_t>(cfg_.batch_size),
                                            cfg_.seed, static_cast<std::size_t>(cfg_.max_length));
    for (const auto& [key, text] : unique_documents(*records_)) {
      if (static_cast<long>(probe_.size()) >= cfg_.probe_size) break;
      probe_.push_back(model_->tokenize(text));
    }
  }

  Var<T> objective(Graph<T>& g, const Batch& batch, StepResult& r) {
    const Hyper& h = cfg_.hyper;
    const auto& layout = model_->layout();
    Var<T> eq, ed;
    if (cfg_.word_dropout > 0) {
      Rng wd(derive_seed(cfg_.seed, "word-dropout", static_cast<std::uint64_t>(r.step)));
      eq = model_->encoder().encode(g, drop_tokens(batch.queries, cfg_.word_dropout, wd));
      ed = model_->encoder().encode(g, drop_tokens(batch.documents, cfg_.word_dropout, wd));
    } else {
      eq = model_->encoder().encode(g, batch.queries);
      ed = model_->encoder().encode(g, batch.documents);
    }
    Rng drop(derive_seed(cfg_.seed, "dropout", static_cast<std::uint64_t>(r.step)));
    auto& ix = model_->indexer();
    Assignment<T> aq = ix.assign(g, eq, Mode::Train, &drop);
    Assignment<T> ad = ix.assign(g, ed, Mode::Train, &drop);
    ix.record_usage(ad);

    // Gold identifiers are re-derived from the current document assignment,
    // without dropout so they do not flicker between steps.
    std::vector<DocId> gold;
    if (ix.config().dropout > 0 && ix.kind() == IndexerKind::Mlp) {
      Graph<T> g0;
      g0.set_grad_enabled(false);
      gold = to_docids(ix.assign(g0, g0.constant(ed.value()), Mode::Train, nullptr).probs.value(), layout);
    } else {
      gold = to_docids(ad.probs.value(), layout);
    }
    GenerationStats gen;
    Var<T> l_ce = generation_loss(model_->decoder().teacher_forced_log_probs(g, eq, gold), gold, &gen);
    Var<T> l_c = contrastive_id_loss(aq.probs, ad.probs, batch.groups, static_cast<T>(h.alpha));
    Var<T> total = add(l_c, l_ce);
    if (cfg_.doc_ce_weight > 0) {
      Var<T> l_doc = generation_loss(model_->decoder().teacher_forced_log_probs(g, ed, gold), gold);
      total = add(total, scale(l_doc, static_cast<T>(cfg_.doc_ce_weight)));
    }

    LossBreakdown& lb = r.loss;
    lb.active = cfg_.active;
    Var<T> aux;
    auto accumulate_aux = [&](const Var<T>& v) { aux = aux.valid() ? add(aux, v) : v; };
    if (cfg_.active.di) {
      Var<T> v = add(density_loss(ad.probs, batch.groups, layout, h.density_weight),
                     density_loss(aq.probs, batch.groups, layout, h.density_weight));
      lb.l_di = static_cast<double>(v.scalar());
      accumulate_aux(v);
    }
    if (cfg_.active.bot) {
      Var<T> v = bottleneck_loss(eq, ed, batch.groups, static_cast<T>(h.gamma), static_cast<T>(h.dist_eps));
      lb.l_bot = static_cast<double>(v.scalar());
      accumulate_aux(v);
    }
    if (cfg_.active.ib) {
      Var<T> v = ib_loss(ed, static_cast<T>(h.beta), static_cast<T>(h.sigma0), static_cast<T>(h.var_floor));
      lb.l_ib = static_cast<double>(v.scalar());
      accumulate_aux(v);
    }
    if (aux.valid()) total = add(total, scale(aux, static_cast<T>(r.lambda)));
    if (ad.mse.valid()) {
      Var<T> q = scale(add(aq.mse, ad.mse), T(0.5));
      lb.has_quant = true;
      lb.l_quant = static_cast<double>(q.scalar());
      total = add(total, scale(q, static_cast<T>(h.quant_weight)));
    }
    lb.l_c = static_cast<double>(l_c.scalar());
    lb.l_ce = static_cast<double>(l_ce.scalar());
    lb.total = static_cast<double>(total.scalar());
    r.clamped = gen.clamped;
    return total;
  }

  // Each sequence keeps at least one token.
  static std::vector<TokenSeq> drop_tokens(const std::vector<TokenSeq>& seqs, double p, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TokenSeq> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs) {
      TokenSeq kept;
      for (int t : s) {
        if (u(rng) >= p) kept.push_back(t);
      }
      if (kept.empty() && !s.empty()) kept.push_back(s[std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng)]);
      out.push_back(std::move(kept));
    }
    return out;
  }

  TrainConfig cfg_;
  const std::vector<PairRecord>* records_;
  std::unique_ptr<Retriever<T>> model_;
  AdamW<T> opt_;
  std::unique_ptr<BatchStream> stream_;
  std::vector<TokenSeq> probe_;
  std::vector<std::size_t> last_batch_;
  long step_ = 0;
};

/// Rebuilds the model (parameters only) from a training checkpoint.
template <typename T>
std::unique_ptr<Retriever<T>> load_retriever(const CheckpointData<T>& ckpt) {
  const nlohmann::json meta = nlohmann::json::parse(ckpt.meta);
  if (meta.value("format", "") != "idlab-train") throw CheckpointError("not a training checkpoint");
  auto model = std::make_unique<Retriever<T>>(
      Vocab::from_words(meta.at("vocab").get<std::vector<std::string>>()),
      ModelConfig::from_json(meta.at("model")), meta.at("rng").at("seed").get<std::uint64_t>());
  restore_params(model->params(), ckpt.tensors, "param/");
  return model;
}

}  // namespace idlab
