#pragma once

#include "idlab/diffcore.hpp"
#include "idlab/params.hpp"
#include "idlab/util.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace idlab::testing {

inline Matrix<double> uniform(Index rows, Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline Matrix<double> unit_rows(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> d;
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  for (Index r = 0; r < rows; ++r) m.row(r).normalize();
  return m;
}

/// Rows of per-position softmax blocks (L blocks of K columns).
inline Matrix<double> random_simplex_rows(Index rows, int length, int k, Rng& rng, double spread = 2.0) {
  Matrix<double> m(rows, static_cast<Index>(length) * k);
  std::normal_distribution<double> d(0.0, spread);
  for (Index r = 0; r < rows; ++r) {
    for (int p = 0; p < length; ++p) {
      double s = 0.0;
      for (int c = 0; c < k; ++c) s += (m(r, p * k + c) = std::exp(d(rng)));
      for (int c = 0; c < k; ++c) m(r, p * k + c) /= s;
    }
  }
  return m;
}

/// Central-difference check of parameter gradients. `loss` builds a scalar on
/// a fresh graph; every coordinate of the named tensors is probed (or a seeded
/// sample of `max_coords` when the tensor is larger).
struct ParamFdResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
};

inline ParamFdResult param_fd(ParamStore<double>& store, const std::vector<std::string>& names,
                              const std::function<Var<double>(Graph<double>&)>& loss, double step = 1e-5,
                              std::size_t max_coords = 60, std::uint64_t seed = 1) {
  store.zero_grad();
  {
    Graph<double> g;
    g.backward(loss(g));
  }
  auto eval = [&] {
    Graph<double> g;
    g.set_grad_enabled(false);
    return loss(g).scalar();
  };
  ParamFdResult out;
  Rng rng(seed);
  for (const auto& name : names) {
    Tensor<double>& t = store.at(name);
    const Matrix<double> analytic = t.grad;
    std::vector<Index> coords;
    for (Index i = 0; i < t.value.size(); ++i) coords.push_back(i);
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (Index i : coords) {
      const double orig = t.value.data()[i];
      t.value.data()[i] = orig + step;
      const double fp = eval();
      t.value.data()[i] = orig - step;
      const double fm = eval();
      t.value.data()[i] = orig;
      const double central = (fp - fm) / (2 * step);
      const double err = std::abs(analytic.data()[i] - central) / std::max(1e-6, std::abs(central));
      out.max_relative_error = std::max(out.max_relative_error, err);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace idlab::testing
