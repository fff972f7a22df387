#include "smar/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "smar/error.hpp"

namespace smar {

SmarBand::SmarBand(double lo, double hi) : lo_(lo), hi_(hi) {
  if (!(lo >= 0.0) || !(lo < hi) || !std::isfinite(hi)) {
    throw ParameterError("invalid band [" + std::to_string(lo) + ", " + std::to_string(hi) +
                         "]: need 0 <= d_min < d_max");
  }
}

Tensor smar_loss(const Tensor& d, const SmarBand& band) {
  if (d.rows() != 1 || d.cols() != 1) throw DimensionError("smar_loss: d must be 1x1");
  // At most one of the two hinges is active because lo < hi.
  Tensor below = relu(add_scalar(scale(d, -1.0), band.lo()));
  Tensor above = relu(add_scalar(d, -band.hi()));
  return add(below, above);
}

double smar_loss(double d, const SmarBand& band) {
  if (d < band.lo()) return band.lo() - d;
  if (d > band.hi()) return d - band.hi();
  return 0.0;
}

Tensor load_balance_loss(const RoutingOutcome& outcome) {
  const Index n = outcome.tokens();
  if (n == 0) throw InputError("load_balance_loss: empty batch");
  const auto experts = static_cast<Eigen::Index>(outcome.experts());
  Matrix f = Matrix::Zero(1, experts);
  for (const auto& chosen : outcome.selected) {
    for (Index e : chosen) f(0, static_cast<Eigen::Index>(e)) += 1.0;
  }
  f /= static_cast<double>(n * outcome.k);
  Tensor mean_p = col_mean(outcome.probabilities);
  return scale(sum(mul(Tensor::constant(std::move(f)), mean_p)), static_cast<double>(experts));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) {
    throw DimensionError("cross_entropy: label count differs from logit rows");
  }
  if (labels.empty()) throw InputError("cross_entropy: empty batch");
  const auto classes = static_cast<int>(logits.cols());
  Matrix onehot = Matrix::Zero(logits.value().rows(), logits.value().cols());
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw InputError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    onehot(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  Tensor picked = sum(mul(row_log_softmax(logits), Tensor::constant(std::move(onehot))));
  return scale(picked, -1.0 / static_cast<double>(labels.size()));
}

LossBundle total_loss(const Tensor& main, const Tensor& balance,
                      std::span<const Tensor> smar_per_layer, double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0) throw ParameterError("total_loss: negative coefficient");
  LossBundle out;
  out.main = main;
  out.balance = balance;
  out.alpha = alpha;
  out.beta = beta;
  if (smar_per_layer.empty()) {
    out.smar = Tensor::scalar(0.0);
  } else {
    Tensor acc = smar_per_layer.front();
    for (Index l = 1; l < smar_per_layer.size(); ++l) acc = add(acc, smar_per_layer[l]);
    out.smar = scale(acc, 1.0 / static_cast<double>(smar_per_layer.size()));
  }
  out.total = add(add(main, scale(balance, alpha)), scale(out.smar, beta));
  return out;
}

}  // namespace smar
