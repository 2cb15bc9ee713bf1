#pragma once

// Semantic indexing modules: map a unit-norm representation to one
// probability row per identifier position. Three interchangeable kinds:
//   mlp - an independent two-layer network per position
//   pq  - product quantization, sub-vector g feeds position g
//   rq  - residual quantization, stage t feeds position t
// Quantizer rows come from a log-domain Sinkhorn assignment over the batch
// during training and from the row-conditional Gibbs kernel at inference.

#include "idlab/diffcore.hpp"
#include "idlab/docid.hpp"
#include "idlab/params.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace idlab {

struct SinkhornParams {
  double epsilon = 0.003;
  int iterations = 100;

  void validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("sinkhorn epsilon must be > 0");
    if (iterations < 1) throw std::invalid_argument("sinkhorn iterations must be >= 1");
  }
};

namespace detail {

template <typename T>
void subtract_col_lse(Matrix<T>& m) {
  for (Index c = 0; c < m.cols(); ++c) {
    auto col = m.col(c);
    const T mx = col.maxCoeff();
    const T lse = mx + std::log((col.array() - mx).exp().sum());
    col.array() -= lse;
  }
}

template <typename T>
void subtract_row_lse(Matrix<T>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const T mx = row.maxCoeff();
    const T lse = mx + std::log((row.array() - mx).exp().sum());
    row.array() -= lse;
  }
}

}  // namespace detail

/// Balanced assignment of n items to K centroids. Rows are rescaled to mass 1
/// and columns to mass n/K, alternately, in the log domain; the last
/// half-step normalizes rows so each output row is a probability simplex.
/// Differentiable through the unrolled iterations.
template <typename T>
Var<T> sinkhorn(const Var<T>& cost, const SinkhornParams& params) {
  params.validate();
  const Index n = cost.rows(), k = cost.cols();
  if (n < 1 || k < 1) throw ShapeError("sinkhorn", "empty cost " + shape_str(n, k));
  const T inv_eps = T(1) / static_cast<T>(params.epsilon);
  const T log_col_mass = std::log(static_cast<T>(n) / static_cast<T>(k));
  // A leading row step makes the result exactly invariant to per-row cost
  // shifts, at any iteration count.
  Matrix<T> a = -cost.value() * inv_eps;
  detail::subtract_row_lse(a);
  auto first = std::make_shared<Matrix<T>>();
  // States after each column step; the row step is recomputed in backward.
  auto states = std::make_shared<std::vector<Matrix<T>>>();
  const bool keep = cost.graph().grad_enabled() && cost.graph().needs_grad(cost);
  if (keep) *first = a.array().exp();
  for (int it = 0; it < params.iterations; ++it) {
    detail::subtract_col_lse(a);
    a.array() += log_col_mass;
    if (keep) states->push_back(a);
    detail::subtract_row_lse(a);
  }
  Matrix<T> p = a.array().exp();
  const std::size_t ic = cost.id();
  std::size_t self = cost.graph().size();
  return cost.graph().emit(
      "sinkhorn", std::move(p), {ic},
      [ic, self, first, states, inv_eps, log_col_mass](Graph<T>& g, const Matrix<T>& G) {
        const Matrix<T>& out = g.value(Var<T>(&g, self));
        Matrix<T> grad = G.cwiseProduct(out);  // d/d(log p)
        for (std::size_t it = states->size(); it-- > 0;) {
          const Matrix<T>& b = (*states)[it];
          // Row step: a' = b - lse_row(b); softmax_row(b) = exp(a').
          Matrix<T> ap = b;
          detail::subtract_row_lse(ap);
          Matrix<T> sm = ap.array().exp();
          Matrix<T> rs = grad.rowwise().sum();
          grad = grad - Matrix<T>(sm.array().colwise() * rs.col(0).array());
          // Column step: b = a - lse_col(a) + c; softmax_col(a) = exp(b - c).
          Matrix<T> smc = (b.array() - log_col_mass).exp();
          Matrix<T> cs = grad.colwise().sum();
          grad = grad - Matrix<T>(smc.array().rowwise() * cs.row(0).array());
        }
        Matrix<T> rs = grad.rowwise().sum();
        grad = grad - Matrix<T>(first->array().colwise() * rs.col(0).array());
        g.accumulate(ic, -grad * inv_eps);
      });
}

template <typename T>
Matrix<T> sinkhorn(const Matrix<T>& cost, const SinkhornParams& params) {
  Graph<T> g;
  g.set_grad_enabled(false);
  return sinkhorn(g.constant(cost), params).value();
}

/// Squared Euclidean distance between each row of x (n x d) and each row of
/// c (K x d), n x K.
template <typename T>
Var<T> squared_distances(const Var<T>& x, const Var<T>& c) {
  Var<T> xx = repeat_cols(sum_rows(square(x)), c.rows());
  Var<T> cc = transpose(sum_rows(square(c)));
  return add(sub(xx, scale(matmul_nt(x, c), T(2))), cc);
}

template <typename T>
Matrix<T> squared_distances(const Matrix<T>& x, const Matrix<T>& c) {
  Matrix<T> d = (-2 * x * c.transpose());
  d.colwise() += x.rowwise().squaredNorm();
  d.rowwise() += c.rowwise().squaredNorm().transpose();
  return d;
}

/// Index of the smallest entry per row, lowest index on ties.
template <typename T>
std::vector<Index> argmin_rows(const Matrix<T>& m) {
  std::vector<Index> out(static_cast<std::size_t>(m.rows()));
  for (Index r = 0; r < m.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < m.cols(); ++c) {
      if (m(r, c) < m(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

template <typename T>
std::vector<Index> argmax_rows(const Matrix<T>& m) {
  std::vector<Index> out(static_cast<std::size_t>(m.rows()));
  for (Index r = 0; r < m.rows(); ++r) out[static_cast<std::size_t>(r)] = argmax_lowest(m.row(r));
  return out;
}

/// DocId per row of an n x (L*K) distribution matrix: position p takes the
/// slice-local argmax of its block (lowest index on ties).
template <typename T>
std::vector<DocId> to_docids(const Matrix<T>& probs, const IdLayout& layout) {
  const int k = layout.codes_per_slice;
  if (probs.cols() != static_cast<Index>(layout.numeric_codes())) {
    throw ShapeError("to_docid", "expected " + std::to_string(layout.numeric_codes()) +
                                     " columns, got " + std::to_string(probs.cols()));
  }
  std::vector<DocId> out(static_cast<std::size_t>(probs.rows()));
  for (Index r = 0; r < probs.rows(); ++r) {
    auto& id = out[static_cast<std::size_t>(r)];
    for (int p = 0; p < layout.length; ++p) {
      const Index local = argmax_lowest(probs.row(r).middleCols(p * k, k));
      id.codes.push_back(layout.code(p, static_cast<int>(local)));
    }
  }
  return out;
}

template <typename T>
DocId to_docid(const Matrix<T>& probs_row, const IdLayout& layout) {
  return to_docids(probs_row, layout).at(0);
}

/// k-means++ seeding followed by Lloyd iterations. Returns K x d centroids.
/// With fewer distinct points than K, the remaining centroids are jittered
/// copies of sampled points.
template <typename T>
Matrix<T> kmeans(const Matrix<T>& points, Index k, int lloyd_iters, Rng& rng) {
  const Index n = points.rows(), d = points.cols();
  if (n == 0) throw std::invalid_argument("kmeans: no points");
  Matrix<T> cent(k, d);
  std::uniform_int_distribution<Index> first(0, n - 1);
  cent.row(0) = points.row(first(rng));
  std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::normal_distribution<double> jitter(0.0, 1e-3);
  for (Index c = 1; c < k; ++c) {
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double dd = static_cast<double>((points.row(i) - cent.row(c - 1)).squaredNorm());
      dist[static_cast<std::size_t>(i)] = std::min(dist[static_cast<std::size_t>(i)], dd);
      total += dist[static_cast<std::size_t>(i)];
    }
    if (total <= 0.0) {
      cent.row(c) = points.row(first(rng));
      for (Index j = 0; j < d; ++j) cent(c, j) += static_cast<T>(jitter(rng));
      continue;
    }
    std::uniform_real_distribution<double> u(0.0, total);
    double target = u(rng);
    Index pick = n - 1;
    for (Index i = 0; i < n; ++i) {
      target -= dist[static_cast<std::size_t>(i)];
      if (target <= 0.0) {
        pick = i;
        break;
      }
    }
    cent.row(c) = points.row(pick);
  }
  for (int it = 0; it < lloyd_iters; ++it) {
    const auto assign = argmin_rows(squared_distances(points, cent));
    Matrix<T> sums = Matrix<T>::Zero(k, d);
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (Index c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        cent.row(c) = sums.row(c) / static_cast<T>(counts[static_cast<std::size_t>(c)]);
      }
    }
  }
  return cent;
}

// ---------------------------------------------------------------------------

enum class IndexerKind { Mlp, Pq, Rq };

inline IndexerKind parse_indexer_kind(const std::string& s) {
  if (s == "mlp") return IndexerKind::Mlp;
  if (s == "pq") return IndexerKind::Pq;
  if (s == "rq") return IndexerKind::Rq;
  throw std::invalid_argument("unknown indexer kind '" + s + "' (expected mlp|pq|rq)");
}

inline std::string to_string(IndexerKind k) {
  switch (k) {
    case IndexerKind::Mlp: return "mlp";
    case IndexerKind::Pq: return "pq";
    case IndexerKind::Rq: return "rq";
  }
  return "?";
}

enum class Mode { Train, Eval };

struct IndexerConfig {
  IndexerKind kind = IndexerKind::Mlp;
  IdLayout layout;
  int dim = 128;
  int mlp_hidden = 256;
  double dropout = 0.2;
  double output_init_scale = 1.0;  // multiplies the Xavier init of the MLP output layer; 0 zeroes it
  SinkhornParams sinkhorn;
};

template <typename T>
struct Assignment {
  Var<T> probs;      // n x (L*K), one simplex per position block
  Var<T> quantized;  // n x dim (quantizers only)
  Var<T> mse;        // 1x1 mean squared reconstruction error (quantizers only)
  std::vector<std::vector<Index>> selected;  // per position, selected local code per row
};

template <typename T>
class Indexer {
 public:
  explicit Indexer(const IndexerConfig& cfg) : cfg_(cfg) {}
  virtual ~Indexer() = default;

  const IndexerConfig& config() const { return cfg_; }
  IndexerKind kind() const { return cfg_.kind; }

  /// `rng` drives dropout in training mode; null disables it.
  virtual Assignment<T> assign(Graph<T>& g, const Var<T>& e, Mode mode, Rng* rng) const = 0;

  Matrix<T> assign(const Matrix<T>& e) const {
    Graph<T> g;
    g.set_grad_enabled(false);
    return assign(g, g.constant(e), Mode::Eval, nullptr).probs.value();
  }

  std::vector<DocId> docids(const Matrix<T>& e) const { return to_docids(assign(e), cfg_.layout); }

  virtual bool has_codebooks() const { return false; }
  virtual void init_codebooks(const Matrix<T>&, Rng&) {}
  virtual void record_usage(const Assignment<T>&) {}
  /// Re-seeds centroids unused since the previous call; returns the count.
  virtual std::size_t reseed_dead_codes(const Matrix<T>&, Rng&) { return 0; }
  /// Per-position code counts since the last reseed (checkpointed).
  virtual std::vector<std::vector<std::size_t>> usage() const { return {}; }
  virtual void set_usage(std::vector<std::vector<std::size_t>>) {}

 protected:
  IndexerConfig cfg_;
};

template <typename T>
class MlpIndexer : public Indexer<T> {
 public:
  using Indexer<T>::assign;

  MlpIndexer(ParamStore<T>& store, const IndexerConfig& cfg, Rng& rng) : Indexer<T>(cfg) {
    const int k = cfg.layout.codes_per_slice;
    for (int p = 0; p < cfg.layout.length; ++p) {
      const std::string pre = "indexer.mlp" + std::to_string(p) + ".";
      Layer l;
      l.w1 = &store.add(pre + "w1", xavier_uniform<T>(cfg.dim, cfg.mlp_hidden, rng));
      l.b1 = &store.add(pre + "b1", Matrix<T>::Zero(1, cfg.mlp_hidden));
      l.w2 = &store.add(pre + "w2", Matrix<T>(xavier_uniform<T>(cfg.mlp_hidden, k, rng) *
                                                       static_cast<T>(cfg.output_init_scale)));
      l.b2 = &store.add(pre + "b2", Matrix<T>::Zero(1, k));
      layers_.push_back(l);
    }
  }

  /// Final-layer logits per position, before the softmax.
  std::vector<Var<T>> logits(Graph<T>& g, const Var<T>& e, Mode mode, Rng* rng) const {
    std::vector<Var<T>> out;
    const double drop = this->cfg_.dropout;
    for (const auto& l : layers_) {
      Var<T> h = tanh(add(matmul(e, g.param(*l.w1)), g.param(*l.b1)));
      if (mode == Mode::Train && rng != nullptr && drop > 0.0) {
        std::bernoulli_distribution keep(1.0 - drop);
        Matrix<T> mask(h.rows(), h.cols());
        const T s = static_cast<T>(1.0 / (1.0 - drop));
        for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? s : T(0);
        h = mul(h, g.constant(std::move(mask), "dropout_mask"));
      }
      out.push_back(add(matmul(h, g.param(*l.w2)), g.param(*l.b2)));
    }
    return out;
  }

  Assignment<T> assign(Graph<T>& g, const Var<T>& e, Mode mode, Rng* rng) const override {
    std::vector<Var<T>> rows;
    for (auto& lg : logits(g, e, mode, rng)) rows.push_back(softmax_rows(lg));
    Assignment<T> a;
    a.probs = concat_cols(rows);
    return a;
  }

 private:
  struct Layer {
    Tensor<T>* w1;
    Tensor<T>* b1;
    Tensor<T>* w2;
    Tensor<T>* b2;
  };
  std::vector<Layer> layers_;
};

namespace detail {

/// Training rows come from the balanced Sinkhorn plan over the batch;
/// inference rows from the row-normalized kernel exp(-cost / epsilon).
template <typename T>
Var<T> quantizer_rows(const Var<T>& cost, Mode mode, const SinkhornParams& sp) {
  if (mode == Mode::Train) return sinkhorn(cost, sp);
  return softmax_rows(scale(cost, static_cast<T>(-1.0 / sp.epsilon)));
}

}  // namespace detail

/// Shared centroid bookkeeping for the two quantizers.
template <typename T>
class QuantizerBase : public Indexer<T> {
 public:
  using Indexer<T>::Indexer;

  bool has_codebooks() const override { return true; }

  void record_usage(const Assignment<T>& a) override {
    if (usage_.empty()) usage_.assign(a.selected.size(), std::vector<std::size_t>(
                                                            static_cast<std::size_t>(this->cfg_.layout.codes_per_slice), 0));
    for (std::size_t p = 0; p < a.selected.size(); ++p) {
      for (Index c : a.selected[p]) ++usage_[p][static_cast<std::size_t>(c)];
    }
  }

  std::vector<std::vector<std::size_t>> usage() const override { return usage_; }
  void set_usage(std::vector<std::vector<std::size_t>> u) override { usage_ = std::move(u); }

 protected:
  std::vector<std::vector<std::size_t>> usage_;
};

template <typename T>
class PqIndexer : public QuantizerBase<T> {
 public:
  using Indexer<T>::assign;

  PqIndexer(ParamStore<T>& store, const IndexerConfig& cfg, Rng& rng) : QuantizerBase<T>(cfg) {
    if (cfg.dim % cfg.layout.length != 0) {
      throw std::invalid_argument("pq indexer: dim " + std::to_string(cfg.dim) +
                                  " not divisible by " + std::to_string(cfg.layout.length));
    }
    sub_ = cfg.dim / cfg.layout.length;
    for (int gi = 0; gi < cfg.layout.length; ++gi) {
      books_.push_back(&store.add("indexer.pq.codebook" + std::to_string(gi),
                                  normal_init<T>(cfg.layout.codes_per_slice, sub_,
                                                 1.0 / std::sqrt(static_cast<double>(cfg.dim)), rng)));
    }
  }

  int sub_dim() const { return sub_; }
  const Matrix<T>& codebook(int group) const { return books_.at(static_cast<std::size_t>(group))->value; }
  Matrix<T>& codebook(int group) { return books_.at(static_cast<std::size_t>(group))->value; }

  Assignment<T> assign(Graph<T>& g, const Var<T>& e, Mode mode, Rng*) const override {
    Assignment<T> a;
    std::vector<Var<T>> rows, parts;
    for (int gi = 0; gi < this->cfg_.layout.length; ++gi) {
      Var<T> sub = slice_cols(e, gi * sub_, sub_);
      Var<T> book = g.param(*books_[static_cast<std::size_t>(gi)]);
      Var<T> row = detail::quantizer_rows(squared_distances(sub, book), mode, this->cfg_.sinkhorn);
      auto sel = argmax_rows(row.value());
      parts.push_back(gather_rows(book, sel));
      rows.push_back(row);
      a.selected.push_back(std::move(sel));
    }
    a.probs = concat_cols(rows);
    a.quantized = concat_cols(parts);
    a.mse = mean(sum_rows(square(sub(e, a.quantized))));
    return a;
  }

  void init_codebooks(const Matrix<T>& emb, Rng& rng) override {
    for (int gi = 0; gi < this->cfg_.layout.length; ++gi) {
      Matrix<T> pts = emb.middleCols(gi * sub_, sub_);
      codebook(gi) = kmeans(pts, this->cfg_.layout.codes_per_slice, 10, rng);
    }
  }

  std::size_t reseed_dead_codes(const Matrix<T>& emb, Rng& rng) override {
    std::size_t n = 0;
    if (this->usage_.empty() || emb.rows() == 0) return 0;
    std::uniform_int_distribution<Index> pick(0, emb.rows() - 1);
    for (int gi = 0; gi < this->cfg_.layout.length; ++gi) {
      auto& use = this->usage_[static_cast<std::size_t>(gi)];
      for (std::size_t c = 0; c < use.size(); ++c) {
        if (use[c] == 0) {
          codebook(gi).row(static_cast<Index>(c)) = emb.row(pick(rng)).middleCols(gi * sub_, sub_);
          ++n;
        }
        use[c] = 0;
      }
    }
    return n;
  }

 private:
  int sub_ = 0;
  std::vector<Tensor<T>*> books_;
};

template <typename T>
class RqIndexer : public QuantizerBase<T> {
 public:
  using Indexer<T>::assign;

  RqIndexer(ParamStore<T>& store, const IndexerConfig& cfg, Rng& rng) : QuantizerBase<T>(cfg) {
    for (int t = 0; t < cfg.layout.length; ++t) {
      const double scale = std::pow(0.5, t) / std::sqrt(static_cast<double>(cfg.dim));
      books_.push_back(&store.add("indexer.rq.codebook" + std::to_string(t),
                                  normal_init<T>(cfg.layout.codes_per_slice, cfg.dim, scale, rng)));
    }
  }

  const Matrix<T>& codebook(int stage) const { return books_.at(static_cast<std::size_t>(stage))->value; }
  Matrix<T>& codebook(int stage) { return books_.at(static_cast<std::size_t>(stage))->value; }

  /// Stage t: pick the codebook vector nearest the running residual, then
  /// subtract it. The quantized vector is the sum of the picks.
  Assignment<T> assign(Graph<T>& g, const Var<T>& e, Mode mode, Rng*) const override {
    Assignment<T> a;
    std::vector<Var<T>> rows;
    Var<T> residual = e;
    Var<T> total;
    for (int t = 0; t < this->cfg_.layout.length; ++t) {
      Var<T> book = g.param(*books_[static_cast<std::size_t>(t)]);
      Var<T> cost = squared_distances(residual, book);
      rows.push_back(detail::quantizer_rows(cost, mode, this->cfg_.sinkhorn));
      auto sel = argmin_rows(cost.value());
      Var<T> pick = gather_rows(book, sel);
      residual = sub(residual, pick);
      total = total.valid() ? add(total, pick) : pick;
      a.selected.push_back(std::move(sel));
    }
    a.probs = concat_cols(rows);
    a.quantized = total;
    a.mse = mean(sum_rows(square(sub(e, total))));
    return a;
  }

  /// Mean squared reconstruction error after each stage (plain evaluation).
  std::vector<double> stage_errors(const Matrix<T>& e) const {
    std::vector<double> out;
    Matrix<T> residual = e;
    for (int t = 0; t < this->cfg_.layout.length; ++t) {
      const auto sel = argmin_rows(squared_distances(residual, codebook(t)));
      for (Index i = 0; i < residual.rows(); ++i) residual.row(i) -= codebook(t).row(sel[static_cast<std::size_t>(i)]);
      out.push_back(static_cast<double>(residual.rowwise().squaredNorm().mean()));
    }
    return out;
  }

  void init_codebooks(const Matrix<T>& emb, Rng& rng) override {
    Matrix<T> residual = emb;
    for (int t = 0; t < this->cfg_.layout.length; ++t) {
      codebook(t) = kmeans(residual, this->cfg_.layout.codes_per_slice, 10, rng);
      const auto sel = argmin_rows(squared_distances(residual, codebook(t)));
      for (Index i = 0; i < residual.rows(); ++i) residual.row(i) -= codebook(t).row(sel[static_cast<std::size_t>(i)]);
    }
  }

  std::size_t reseed_dead_codes(const Matrix<T>& emb, Rng& rng) override {
    std::size_t n = 0;
    if (this->usage_.empty() || emb.rows() == 0) return 0;
    std::uniform_int_distribution<Index> pick(0, emb.rows() - 1);
    Matrix<T> residual = emb;
    for (int t = 0; t < this->cfg_.layout.length; ++t) {
      auto& use = this->usage_[static_cast<std::size_t>(t)];
      for (std::size_t c = 0; c < use.size(); ++c) {
        if (use[c] == 0) {
          codebook(t).row(static_cast<Index>(c)) = residual.row(pick(rng));
          ++n;
        }
        use[c] = 0;
      }
      const auto sel = argmin_rows(squared_distances(residual, codebook(t)));
      for (Index i = 0; i < residual.rows(); ++i) residual.row(i) -= codebook(t).row(sel[static_cast<std::size_t>(i)]);
    }
    return n;
  }

 private:
  std::vector<Tensor<T>*> books_;
};

template <typename T>
std::unique_ptr<Indexer<T>> make_indexer(ParamStore<T>& store, const IndexerConfig& cfg, Rng& rng) {
  switch (cfg.kind) {
    case IndexerKind::Mlp: return std::make_unique<MlpIndexer<T>>(store, cfg, rng);
    case IndexerKind::Pq: return std::make_unique<PqIndexer<T>>(store, cfg, rng);
    case IndexerKind::Rq: return std::make_unique<RqIndexer<T>>(store, cfg, rng);
  }
  throw std::invalid_argument("unknown indexer kind");
}

}  // namespace idlab
