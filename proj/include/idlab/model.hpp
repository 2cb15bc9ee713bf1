#pragma once

// Bag-of-words text encoder with a unit-norm output, and an autoregressive
// decoder over the position-sliced identifier vocabulary.

#include "idlab/diffcore.hpp"
#include "idlab/docid.hpp"
#include "idlab/params.hpp"
#include "idlab/textdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace idlab {

struct EncoderConfig {
  int vocab_size = 1;
  int embed_dim = 128;
  int hidden = 256;
  int dim = 128;
};

/// token embeddings -> mean pool -> affine, tanh -> affine -> L2 normalize
template <typename T>
class Encoder {
 public:
  Encoder(ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    embed_ = &store.add("encoder.embed", normal_init<T>(cfg.vocab_size, cfg.embed_dim, 0.1, rng));
    w1_ = &store.add("encoder.w1", xavier_uniform<T>(cfg.embed_dim, cfg.hidden, rng));
    b1_ = &store.add("encoder.b1", Matrix<T>::Zero(1, cfg.hidden));
    w2_ = &store.add("encoder.w2", xavier_uniform<T>(cfg.hidden, cfg.dim, rng));
    b2_ = &store.add("encoder.b2", Matrix<T>::Zero(1, cfg.dim));
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Rows before normalization.
  Var<T> project(Graph<T>& g, const std::vector<TokenSeq>& seqs) const {
    Var<T> pooled = embed_mean(g.param(*embed_), seqs);
    Var<T> h = tanh(add(matmul(pooled, g.param(*w1_)), g.param(*b1_)));
    return add(matmul(h, g.param(*w2_)), g.param(*b2_));
  }

  /// Unit-norm representations, one row per sequence.
  Var<T> encode(Graph<T>& g, const std::vector<TokenSeq>& seqs) const {
    return l2_normalize_rows(project(g, seqs));
  }

  Matrix<T> encode(const std::vector<TokenSeq>& seqs) const {
    Graph<T> g;
    g.set_grad_enabled(false);
    return encode(g, seqs).value();
  }

 private:
  EncoderConfig cfg_;
  Tensor<T>* embed_;
  Tensor<T>* w1_;
  Tensor<T>* b1_;
  Tensor<T>* w2_;
  Tensor<T>* b2_;
};

struct DecoderConfig {
  int dim = 128;
  int hidden = 256;
  IdLayout layout;
};

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct DecoderState {
  Matrix<T> query;          // 1 x dim
  std::vector<int> prefix;  // global codes generated so far
};

template <typename T>
struct BeamHit {
  DocId id;
  double log_prob = 0.0;
};

/// Step p conditions on the pooled query representation plus the summed
/// embeddings of the prefix codes:
///   z = tanh(q Wc + bc + pos[p] + sum_j code[prefix_j])
///   logits = tanh(z W1 + b1) Wo + bo
template <typename T>
class Decoder {
 public:
  Decoder(ParamStore<T>& store, const DecoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    const int v = cfg.layout.vocab_size();
    cond_w_ = &store.add("decoder.cond_w", xavier_uniform<T>(cfg.dim, cfg.hidden, rng));
    cond_b_ = &store.add("decoder.cond_b", Matrix<T>::Zero(1, cfg.hidden));
    code_ = &store.add("decoder.code_embed", normal_init<T>(v, cfg.hidden, 0.1, rng));
    pos_ = &store.add("decoder.pos_embed", normal_init<T>(cfg.layout.length, cfg.hidden, 0.1, rng));
    w1_ = &store.add("decoder.w1", xavier_uniform<T>(cfg.hidden, cfg.hidden, rng));
    b1_ = &store.add("decoder.b1", Matrix<T>::Zero(1, cfg.hidden));
    out_w_ = &store.add("decoder.out_w", xavier_uniform<T>(cfg.hidden, v, rng));
    out_b_ = &store.add("decoder.out_b", Matrix<T>::Zero(1, v));
  }

  const DecoderConfig& config() const { return cfg_; }
  const IdLayout& layout() const { return cfg_.layout; }

  /// Logits (n x vocab) for position `pos`; `prefix_sum` is the summed prefix
  /// code embedding (n x hidden) or invalid at position 0.
  Var<T> step_logits(Graph<T>& g, const Var<T>& cond, const Var<T>& prefix_sum, int pos) const {
    Var<T> pre = add(cond, gather_rows(g.param(*pos_), {static_cast<Index>(pos)}));
    if (prefix_sum.valid()) pre = add(pre, prefix_sum);
    Var<T> z = tanh(pre);
    Var<T> h = tanh(add(matmul(z, g.param(*w1_)), g.param(*b1_)));
    return add(matmul(h, g.param(*out_w_)), g.param(*out_b_));
  }

  Var<T> condition(Graph<T>& g, const Var<T>& query) const {
    return add(matmul(query, g.param(*cond_w_)), g.param(*cond_b_));
  }

  /// Unmasked log-probabilities over the full vocabulary at each gold step.
  std::vector<Var<T>> teacher_forced_log_probs(Graph<T>& g, const Var<T>& query,
                                               const std::vector<DocId>& gold) const {
    const int len = cfg_.layout.length;
    for (const auto& id : gold) {
      if (!id.valid(cfg_.layout)) throw DecodeError("gold DocId " + id.str() + " violates slices");
    }
    if (static_cast<Index>(gold.size()) != query.rows()) {
      throw DecodeError("gold count does not match query rows");
    }
    Var<T> cond = condition(g, query);
    Var<T> prefix;
    std::vector<Var<T>> out;
    for (int p = 0; p < len; ++p) {
      out.push_back(log_softmax_rows(step_logits(g, cond, prefix, p)));
      std::vector<Index> codes(gold.size());
      for (std::size_t i = 0; i < gold.size(); ++i) codes[i] = gold[i].codes[static_cast<std::size_t>(p)];
      Var<T> emb = gather_rows(g.param(*code_), codes);
      prefix = prefix.valid() ? add(prefix, emb) : emb;
    }
    return out;
  }

  /// Sum over positions of log p(gold_p | gold_<p, q), one entry per row.
  std::vector<double> sequence_log_prob(const Matrix<T>& queries, const std::vector<DocId>& gold) const {
    Graph<T> g;
    g.set_grad_enabled(false);
    auto steps = teacher_forced_log_probs(g, g.constant(queries), gold);
    std::vector<double> out(gold.size(), 0.0);
    for (std::size_t p = 0; p < steps.size(); ++p) {
      for (std::size_t i = 0; i < gold.size(); ++i) {
        out[i] += static_cast<double>(steps[p].value()(static_cast<Index>(i), gold[i].codes[p]));
      }
    }
    return out;
  }

  /// Probability row over the vocabulary for the next position. With
  /// `masked`, everything outside that position's slice is zero.
  Matrix<T> decode_distribution(const DecoderState<T>& state, bool masked = true) const {
    const int pos = static_cast<int>(state.prefix.size());
    if (pos >= cfg_.layout.length) throw DecodeError("sequence already complete");
    Matrix<T> logits = logits_for({state.prefix}, state.query, pos);
    Matrix<T> row = logits.row(0);
    if (masked) {
      const int lo = cfg_.layout.slice_min(pos), hi = cfg_.layout.slice_max(pos);
      Matrix<T> out = Matrix<T>::Zero(1, row.cols());
      auto slice = row.middleCols(lo, hi - lo + 1);
      const T m = slice.maxCoeff();
      Matrix<T> e = (slice.array() - m).exp();
      out.middleCols(lo, hi - lo + 1) = e / e.sum();
      return out;
    }
    return detail::softmax_rows_value(row);
  }

  /// Slice-masked beam search. Hypotheses are ranked by total log-probability,
  /// ties by lexicographic code order.
  std::vector<BeamHit<T>> beam_search(const Matrix<T>& query, int beam, int max_len = -1) const {
    if (beam < 1) throw DecodeError("beam must be >= 1");
    const int len = max_len < 0 ? cfg_.layout.length : std::min(max_len, cfg_.layout.length);
    const int k = cfg_.layout.codes_per_slice;
    struct Hyp {
      std::vector<int> codes;
      double score;
    };
    auto better = [](const Hyp& a, const Hyp& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.codes < b.codes;
    };
    std::vector<Hyp> hyps{{{}, 0.0}};
    for (int pos = 0; pos < len; ++pos) {
      std::vector<std::vector<int>> prefixes;
      for (const auto& h : hyps) prefixes.push_back(h.codes);
      Matrix<T> logits = logits_for(prefixes, query, pos);
      std::vector<Hyp> cand;
      cand.reserve(hyps.size() * static_cast<std::size_t>(k));
      const int lo = cfg_.layout.slice_min(pos);
      for (std::size_t i = 0; i < hyps.size(); ++i) {
        auto slice = logits.row(static_cast<Index>(i)).middleCols(lo, k);
        const double m = static_cast<double>(slice.maxCoeff());
        double z = 0.0;
        for (int c = 0; c < k; ++c) z += std::exp(static_cast<double>(slice(c)) - m);
        const double lse = m + std::log(z);
        for (int c = 0; c < k; ++c) {
          Hyp h{hyps[i].codes, hyps[i].score + (static_cast<double>(slice(c)) - lse)};
          h.codes.push_back(lo + c);
          cand.push_back(std::move(h));
        }
      }
      const std::size_t keep = std::min(cand.size(), static_cast<std::size_t>(beam));
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(), better);
      cand.resize(keep);
      hyps = std::move(cand);
    }
    std::vector<BeamHit<T>> out;
    for (auto& h : hyps) out.push_back({DocId{std::move(h.codes)}, h.score});
    return out;
  }

  /// Slice-masked log-probability of a complete sequence, summed step by step.
  double masked_log_prob(const Matrix<T>& query, const std::vector<int>& codes) const {
    double s = 0.0;
    const int k = cfg_.layout.codes_per_slice;
    for (std::size_t pos = 0; pos < codes.size(); ++pos) {
      std::vector<int> prefix(codes.begin(), codes.begin() + static_cast<std::ptrdiff_t>(pos));
      Matrix<T> logits = logits_for({prefix}, query, static_cast<int>(pos));
      const int lo = cfg_.layout.slice_min(static_cast<int>(pos));
      auto slice = logits.row(0).middleCols(lo, k);
      const double m = static_cast<double>(slice.maxCoeff());
      double z = 0.0;
      for (int c = 0; c < k; ++c) z += std::exp(static_cast<double>(slice(c)) - m);
      s += static_cast<double>(slice(codes[pos] - lo)) - (m + std::log(z));
    }
    return s;
  }

 private:
  Matrix<T> logits_for(const std::vector<std::vector<int>>& prefixes, const Matrix<T>& query,
                       int pos) const {
    Graph<T> g;
    g.set_grad_enabled(false);
    const Index n = static_cast<Index>(prefixes.size());
    Matrix<T> q = query.row(0).replicate(n, 1);
    Var<T> cond = condition(g, g.constant(q));
    Var<T> prefix;
    if (pos > 0) {
      Matrix<T> sum = Matrix<T>::Zero(n, cfg_.hidden);
      for (Index i = 0; i < n; ++i) {
        for (int c : prefixes[static_cast<std::size_t>(i)]) sum.row(i) += code_->value.row(c);
      }
      prefix = g.constant(std::move(sum));
    }
    return step_logits(g, cond, prefix, pos).value();
  }

  DecoderConfig cfg_;
  Tensor<T>* cond_w_;
  Tensor<T>* cond_b_;
  Tensor<T>* code_;
  Tensor<T>* pos_;
  Tensor<T>* w1_;
  Tensor<T>* b1_;
  Tensor<T>* out_w_;
  Tensor<T>* out_b_;
};

}  // namespace idlab
