#ifndef CDSNAS_TESTS_ORACLES_HPP_
#define CDSNAS_TESTS_ORACLES_HPP_

// Test-only oracles, independent of the library's backward rules:
//  - central finite differences for gradient checks
//  - direct average-precision summation for retrieval metrics
//  - brute-force hardest-pair scan for the triplet loss

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cdsnas/ops.hpp"
#include "cdsnas/rng.hpp"
#include "cdsnas/tensor.hpp"

namespace cdsnas_tests {

// Scalarizes `apply(inputs)` through a fixed random projection, then compares
// tape gradients against central finite differences on every input element.
// Returns the worst relative error across all inputs.
template <typename T>
double fd_max_rel_err(std::vector<cdsnas::Tensor<T>>& inputs,
                      const std::function<cdsnas::Tensor<T>(const std::vector<cdsnas::Tensor<T>>&)>& apply,
                      cdsnas::Rng& rng, double step = 1e-5) {
  using cdsnas::Tensor;

  Tensor<T> probe;
  {
    Tensor<T> y0 = apply(inputs);
    probe = Tensor<T>::randn(y0.shape(), rng);
  }
  auto scalar_loss = [&]() {
    Tensor<T> y = apply(inputs);
    return cdsnas::sum(cdsnas::mul(y, probe)).item();
  };

  std::vector<Tensor<T>> analytic;
  {
    cdsnas::Tape<T> tape;
    typename cdsnas::Tape<T>::Scope scope(tape);
    for (auto& t : inputs) tape.watch(t);
    Tensor<T> y = apply(inputs);
    Tensor<T> loss = cdsnas::sum(cdsnas::mul(y, probe));
    auto grads = tape.backward(loss);
    for (auto& t : inputs) analytic.push_back(tape.grad_or_zero(grads, t));
  }

  double max_abs_grad = 1.0;
  for (const auto& g : analytic)
    for (T v : g.data()) max_abs_grad = std::max(max_abs_grad, std::abs(static_cast<double>(v)));

  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& data = inputs[t].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      T saved = data[i];
      data[i] = saved + static_cast<T>(step);
      double up = static_cast<double>(scalar_loss());
      data[i] = saved - static_cast<T>(step);
      double down = static_cast<double>(scalar_loss());
      data[i] = saved;
      double fd = (up - down) / (2.0 * step);
      double an = static_cast<double>(analytic[t].data()[i]);
      worst = std::max(worst, std::abs(an - fd) / std::max(1.0, std::max(max_abs_grad, std::abs(fd))));
    }
  }
  return worst;
}

// Average precision by direct precision-at-every-relevant-hit summation.
inline double ap_direct(const std::vector<double>& dists, const std::vector<int>& gallery_labels,
                        int query_label, int skip_index) {
  std::vector<std::size_t> order(dists.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dists[a] < dists[b];
  });
  int relevant = 0;
  for (std::size_t i = 0; i < gallery_labels.size(); ++i)
    if (static_cast<int>(i) != skip_index && gallery_labels[i] == query_label) ++relevant;
  if (relevant == 0) return -1.0;
  double ap = 0.0;
  int hits = 0, seen = 0;
  for (std::size_t oi : order) {
    if (static_cast<int>(oi) == skip_index) continue;
    ++seen;
    if (gallery_labels[oi] == query_label) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(seen);
    }
  }
  return ap / static_cast<double>(relevant);
}

// Brute-force batch-hard triplet loss: per-anchor hardest-pair scan.
template <typename T>
double triplet_direct(const cdsnas::Tensor<T>& f, const std::vector<int>& labels, double margin) {
  const std::int64_t n = f.dim(0), d = f.dim(1);
  const auto& fv = f.data();
  auto dist = [&](std::int64_t i, std::int64_t j) {
    double acc = 0;
    for (std::int64_t k = 0; k < d; ++k) {
      double diff = static_cast<double>(fv[static_cast<std::size_t>(i * d + k)]) -
                    static_cast<double>(fv[static_cast<std::size_t>(j * d + k)]);
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };
  double total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double dp = -1, dn = std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double dij = dist(i, j);
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)])
        dp = std::max(dp, dij);
      else
        dn = std::min(dn, dij);
    }
    total += std::max(0.0, dp - dn + margin);
  }
  return total / static_cast<double>(n);
}

}  // namespace cdsnas_tests

#endif  // CDSNAS_TESTS_ORACLES_HPP_
