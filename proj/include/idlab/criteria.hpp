#pragma once

// Training objectives over a batch where query i's positive document is
// document i and items sharing a group label are never negatives.
//
//   total = l_c + l_ce + lambda * (l_di + l_bot + l_ib) + quant_weight * l_quant

#include "idlab/diffcore.hpp"
#include "idlab/docid.hpp"
#include "idlab/indexer.hpp"

#include <cmath>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace idlab {

enum class DensityWeight { Literal, Complement };

inline DensityWeight parse_density_weight(const std::string& s) {
  if (s == "literal") return DensityWeight::Literal;
  if (s == "complement") return DensityWeight::Complement;
  throw std::invalid_argument("unknown density weight mode '" + s + "'");
}

inline std::string to_string(DensityWeight w) {
  return w == DensityWeight::Literal ? "literal" : "complement";
}

struct Hyper {
  double alpha = 3.0;
  double lambda = 0.25;
  double gamma = 0.05;
  double beta = 0.01;
  double quant_weight = 1.0;
  double sigma0 = 0.1;
  double var_floor = 1e-4;
  double dist_eps = 1e-6;
  DensityWeight density_weight = DensityWeight::Complement;
};

/// Auxiliary terms that can be switched off for ablations.
struct ActiveTerms {
  bool di = true;
  bool bot = true;
  bool ib = true;

  std::string disabled_csv() const {
    std::string out;
    auto push = [&](bool on, const char* name) {
      if (on) return;
      if (!out.empty()) out += ',';
      out += name;
    };
    push(di, "di");
    push(bot, "bot");
    push(ib, "ib");
    return out;
  }

  static ActiveTerms from_disabled(const std::string& csv) {
    ActiveTerms a;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      if (item == "di") a.di = false;
      else if (item == "bot") a.bot = false;
      else if (item == "ib") a.ib = false;
      else throw std::invalid_argument("unknown loss term '" + item + "' (expected di|bot|ib)");
    }
    return a;
  }
};

struct LossBreakdown {
  double l_c = 0, l_ce = 0, l_di = 0, l_bot = 0, l_ib = 0, l_quant = 0, total = 0;
  ActiveTerms active;
  bool has_quant = false;
};

/// total = l_c + l_ce + lambda (l_di + l_bot + l_ib) + quant_weight l_quant
/// over the active terms; disabled terms contribute exactly zero.
inline double total_loss(const LossBreakdown& parts, const Hyper& hyper, double lambda) {
  double aux = 0.0;
  if (parts.active.di) aux += parts.l_di;
  if (parts.active.bot) aux += parts.l_bot;
  if (parts.active.ib) aux += parts.l_ib;
  double t = parts.l_c + parts.l_ce + lambda * aux;
  if (parts.has_quant) t += hyper.quant_weight * parts.l_quant;
  return t;
}

inline std::vector<char> negative_mask(const std::vector<int>& groups) {
  const std::size_t n = groups.size();
  std::vector<char> m(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m[i * n + j] = groups[i] != groups[j];
  }
  return m;
}

template <typename T>
Matrix<T> negative_mask_matrix(const std::vector<int>& groups) {
  const Index n = static_cast<Index>(groups.size());
  Matrix<T> m(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) m(i, j) = groups[static_cast<std::size_t>(i)] != groups[static_cast<std::size_t>(j)] ? T(1) : T(0);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Distance between identifier distributions

/// D(P_i, Q_j) = sum over positions of ||P_i,p - Q_j,p||^2, as an n x m
/// matrix. Range [0, 2L] for simplex rows.
template <typename T>
Var<T> pairwise_distance(const Var<T>& p, const Var<T>& q) {
  if (p.cols() != q.cols()) {
    throw ShapeError("pairwise_distance", "row widths differ: " + shape_str(p.rows(), p.cols()) +
                                              " vs " + shape_str(q.rows(), q.cols()));
  }
  return squared_distances(p, q);
}

template <typename T>
T pairwise_distance(const Matrix<T>& p, const Matrix<T>& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) {
    throw ShapeError("pairwise_distance", "shape mismatch " + shape_str(p.rows(), p.cols()) +
                                              " vs " + shape_str(q.rows(), q.cols()));
  }
  return (p - q).squaredNorm();
}

// ---------------------------------------------------------------------------

/// Mean over (q, d+, d-) triples of max(0, D(q,d+) - D(q,d-) + alpha) where
/// d- ranges over in-batch documents outside q's group.
template <typename T>
Var<T> contrastive_id_loss(const Var<T>& pq, const Var<T>& pd, const std::vector<int>& groups,
                           T alpha) {
  Graph<T>& g = pq.graph();
  const Index n = pq.rows();
  if (pd.rows() != n || static_cast<Index>(groups.size()) != n) {
    throw ShapeError("contrastive_id_loss", "batch sizes differ");
  }
  Matrix<T> mask = negative_mask_matrix<T>(groups);
  const T count = mask.sum();
  if (count == T(0)) {
    std::cerr << "warning: contrastive_id_loss: batch has a single group, no negatives\n";
    return g.constant(Matrix<T>::Zero(1, 1), "zero_loss");
  }
  Var<T> dpos = sum_rows(square(sub(pq, pd)));  // n x 1
  Var<T> dall = pairwise_distance(pq, pd);      // n x n
  Var<T> h = hinge(add_scalar(sub(repeat_cols(dpos, n), dall), alpha));
  return scale(sum(mul(h, g.constant(std::move(mask), "negatives"))), T(1) / count);
}

struct GenerationStats {
  std::size_t clamped = 0;
};

/// Mean over pairs of sum_p -log p(gold_p | gold_<p, q). Log-probabilities
/// below log(1e-12) are clamped and counted.
template <typename T>
Var<T> generation_loss(const std::vector<Var<T>>& step_log_probs, const std::vector<DocId>& gold,
                       GenerationStats* stats = nullptr) {
  if (step_log_probs.empty()) throw ShapeError("generation_loss", "no decoder steps");
  const T floor = static_cast<T>(std::log(1e-12));
  Var<T> total;
  for (std::size_t p = 0; p < step_log_probs.size(); ++p) {
    std::vector<Index> codes(gold.size());
    for (std::size_t i = 0; i < gold.size(); ++i) codes[i] = gold[i].codes.at(p);
    Var<T> lp = pick(step_log_probs[p], codes);
    if (stats != nullptr) stats->clamped += static_cast<std::size_t>((lp.value().array() < floor).count());
    lp = clamp_min(lp, floor);
    total = total.valid() ? add(total, lp) : lp;
  }
  return scale(mean(total), T(-1));
}

template <typename T>
struct DensityTargets {
  Matrix<T> onehot;     // n x (L*K), argmax code of each item per position
  Matrix<T> neighbors;  // n x n, 1 where the pair is outside a shared group
  Matrix<T> weights;    // n x 1
};

/// Stop-gradient side of the density loss: neighbor one-hot targets and the
/// per-item distance weight E_{x'}[D(x,x')] / D_max (or its complement).
template <typename T>
DensityTargets<T> density_targets(const Matrix<T>& probs, const std::vector<int>& groups,
                                  const IdLayout& layout, DensityWeight mode) {
  const Index n = probs.rows();
  DensityTargets<T> t;
  t.onehot = Matrix<T>::Zero(n, probs.cols());
  const auto ids = to_docids(probs, layout);
  for (Index i = 0; i < n; ++i) {
    for (int p = 0; p < layout.length; ++p) t.onehot(i, ids[static_cast<std::size_t>(i)].codes[static_cast<std::size_t>(p)] - 1) = T(1);
  }
  t.neighbors = negative_mask_matrix<T>(groups);
  const double dmax = 2.0 * layout.length;
  Matrix<T> d = squared_distances(probs, probs);
  t.weights = Matrix<T>::Zero(n, 1);
  for (Index i = 0; i < n; ++i) {
    double s = 0.0, cnt = 0.0;
    for (Index j = 0; j < n; ++j) {
      if (t.neighbors(i, j) == T(0)) continue;
      s += std::max(0.0, static_cast<double>(d(i, j)));
      cnt += 1.0;
    }
    const double ratio = cnt > 0 ? s / cnt / dmax : 0.0;
    t.weights(i, 0) = static_cast<T>(mode == DensityWeight::Literal ? ratio : 1.0 - ratio);
  }
  return t;
}

/// mean_x w(x) * sum_{x' outside x's group} sum_p P_p(x)[k_p(x')]
template <typename T>
Var<T> density_loss(const Var<T>& probs, const DensityTargets<T>& targets) {
  Graph<T>& g = probs.graph();
  Var<T> overlap = matmul_nt(probs, g.constant(targets.onehot, "density_targets"));
  Var<T> per_item = sum_rows(mul(overlap, g.constant(targets.neighbors, "negatives")));
  return mean(mul(per_item, g.constant(targets.weights, "density_weights")));
}

template <typename T>
Var<T> density_loss(const Var<T>& probs, const std::vector<int>& groups, const IdLayout& layout,
                    DensityWeight mode) {
  return density_loss(probs, density_targets(probs.value(), groups, layout, mode));
}

/// InfoNCE over in-batch documents (positive included, same-group others
/// excluded) plus gamma times the mean inverse squared distance between
/// same-side pairs from different groups, for documents and for queries.
template <typename T>
Var<T> bottleneck_loss(const Var<T>& eq, const Var<T>& ed, const std::vector<int>& groups, T gamma,
                       T dist_eps = T(1e-6)) {
  Graph<T>& g = eq.graph();
  const Index n = eq.rows();
  if (ed.rows() != n || static_cast<Index>(groups.size()) != n) {
    throw ShapeError("bottleneck_loss", "batch sizes differ");
  }
  Matrix<T> exclude = Matrix<T>::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i != j && groups[static_cast<std::size_t>(i)] == groups[static_cast<std::size_t>(j)]) exclude(i, j) = T(-1e9);
    }
  }
  Var<T> sims = matmul_nt(eq, ed);
  Var<T> lse = logsumexp_rows(add(sims, g.constant(std::move(exclude), "exclude_group")));
  std::vector<Index> diag(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) diag[static_cast<std::size_t>(i)] = i;
  Var<T> term1 = mean(sub(lse, pick(sims, diag)));

  Matrix<T> pairs = Matrix<T>::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      if (groups[static_cast<std::size_t>(i)] != groups[static_cast<std::size_t>(j)]) pairs(i, j) = T(1);
    }
  }
  const T count = pairs.sum();
  if (count == T(0)) return term1;
  Var<T> mask = g.constant(std::move(pairs), "pairs");
  auto spread = [&](const Var<T>& e) {
    Var<T> d = clamp_min(squared_distances(e, e), T(0));
    return scale(sum(mul(reciprocal(add_scalar(d, dist_eps)), mask)), T(1) / count);
  };
  return add(term1, scale(add(spread(ed), spread(eq)), gamma));
}

template <typename T>
struct GaussianPrior {
  Matrix<T> mean;      // 1 x dim
  Matrix<T> variance;  // 1 x dim, floored
};

/// Batch mean and (population) variance, variance floored.
template <typename T>
GaussianPrior<T> estimate_prior(const Matrix<T>& e, T var_floor = T(1e-4)) {
  if (e.rows() < 2) throw std::invalid_argument("estimate_prior: batch of 1 has no variance");
  GaussianPrior<T> p;
  p.mean = e.colwise().mean();
  Matrix<T> centered = e.rowwise() - p.mean.row(0);
  p.variance = centered.array().square().colwise().mean();
  p.variance = p.variance.cwiseMax(var_floor);
  return p;
}

/// beta * mean_d KL(N(e_d, sigma0^2 I) || N(mu, diag sigma^2)); the prior is
/// held fixed.
template <typename T>
Var<T> ib_loss(const Var<T>& ed, const GaussianPrior<T>& prior, T beta, T sigma0) {
  Graph<T>& g = ed.graph();
  if (ed.rows() < 2) throw std::invalid_argument("ib_loss: batch of 1 has no variance");
  if (prior.mean.cols() != ed.cols() || prior.variance.cols() != ed.cols()) {
    throw ShapeError("ib_loss", "prior width does not match " + shape_str(ed.rows(), ed.cols()));
  }
  const T s0sq = sigma0 * sigma0;
  T constant = 0;
  for (Index j = 0; j < ed.cols(); ++j) {
    const T v = prior.variance(0, j);
    constant += T(0.5) * std::log(v / s0sq) + s0sq / (T(2) * v) - T(0.5);
  }
  Matrix<T> inv2v = (T(2) * prior.variance.array()).inverse();
  Var<T> diff = sub(ed, g.constant(prior.mean, "prior_mean"));
  Var<T> quad = mul(square(diff), g.constant(std::move(inv2v), "prior_scale"));
  Var<T> per_row = sum_rows(quad);
  return scale(add_scalar(mean(per_row), constant), beta);
}

template <typename T>
Var<T> ib_loss(const Var<T>& ed, T beta, T sigma0, T var_floor) {
  return ib_loss(ed, estimate_prior(ed.value(), var_floor), beta, sigma0);
}

}  // namespace idlab
