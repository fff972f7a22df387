#include "smar/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "smar/error.hpp"

namespace smar {

const char* modality_name(Modality m) { return m == Modality::kVision ? "vision" : "text"; }

Index TokenBatch::count(Modality m) const {
  return static_cast<Index>(std::count(modality.begin(), modality.end(), m));
}

std::vector<Index> TokenBatch::indices(Modality m) const {
  std::vector<Index> out;
  for (Index i = 0; i < modality.size(); ++i) {
    if (modality[i] == m) out.push_back(i);
  }
  return out;
}

namespace {

std::vector<Index> rank_indices(std::span<const double> p_row, Index k) {
  std::vector<Index> order(p_row.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](Index a, Index b) {
                      if (p_row[a] != p_row[b]) return p_row[a] > p_row[b];
                      return a < b;
                    });
  order.resize(k);
  return order;
}

}  // namespace

TopK top_k_select(std::span<const double> p_row, Index k) {
  if (k < 1 || k > p_row.size()) {
    throw ParameterError("top_k_select: K=" + std::to_string(k) + " outside [1, " +
                         std::to_string(p_row.size()) + "]");
  }
  const double total = std::accumulate(p_row.begin(), p_row.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) {
    throw InputError("top_k_select: probability row sums to " + std::to_string(total));
  }
  TopK out;
  out.indices = rank_indices(p_row, k);
  double mass = 0.0;
  for (Index e : out.indices) mass += p_row[e];
  out.weights.assign(p_row.size(), 0.0);
  for (Index e : out.indices) out.weights[e] = p_row[e] / mass;
  return out;
}

RoutingOutcome route(const RouterParams& params, const TokenBatch& batch, Index k) {
  const Index n = batch.size();
  const Index experts = params.experts();
  if (n == 0) throw InputError("route: batch has no tokens");
  if (batch.hidden.rows() != n) throw DimensionError("route: label count differs from rows");
  if (experts < 1) throw ParameterError("route: need at least one expert");
  if (k < 1 || k > experts) {
    throw ParameterError("route: K=" + std::to_string(k) + " outside [1, " +
                         std::to_string(experts) + "]");
  }

  RoutingOutcome out;
  out.k = k;
  out.logits = matmul(batch.hidden, params.gate);
#ifndef SMAR_PLAIN_MOE
  if (params.modality_bias) {
    // Stack [b_v; b_t] and pick the row matching each token's modality.
    const Tensor stacked[] = {params.bias_vision, params.bias_text};
    std::vector<Index> which(n);
    for (Index i = 0; i < n; ++i) which[i] = static_cast<Index>(batch.modality[i]);
    out.logits = add(out.logits, gather_rows(concat_rows(stacked), which));
  }
#endif
  out.probabilities = row_softmax(out.logits);

  const Matrix& p = out.probabilities.value();
  Matrix mask = Matrix::Zero(p.rows(), p.cols());
  out.selected.reserve(n);
  for (Index i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    std::span<const double> p_row(p.data() + row * p.cols(), static_cast<Index>(p.cols()));
    auto chosen = rank_indices(p_row, k);
    for (Index e : chosen) mask(row, static_cast<Eigen::Index>(e)) = 1.0;
    out.selected.push_back(std::move(chosen));
  }
  Tensor kept = mul(out.probabilities, Tensor::constant(std::move(mask)));
  out.weights = scale_rows(kept, reciprocal(row_sum(kept)));
  return out;
}

}  // namespace smar
