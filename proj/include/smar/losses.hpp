#pragma once

#include <span>
#include <vector>

#include "smar/autodiff.hpp"
#include "smar/router.hpp"

namespace smar {

/// Tolerance band [lo, hi] for the modality routing distance.
class SmarBand {
 public:
  SmarBand(double lo, double hi);
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  bool contains(double d) const { return d >= lo_ && d <= hi_; }

 private:
  double lo_;
  double hi_;
};

/// Hinge penalty that is zero inside the band and grows linearly outside it.
Tensor smar_loss(const Tensor& d, const SmarBand& band);
double smar_loss(double d, const SmarBand& band);

/// Switch-style balance loss E * sum_e f_e * mean_p_e, with f the fraction of
/// selections on expert e (held constant).
Tensor load_balance_loss(const RoutingOutcome& outcome);

/// Mean negative log-likelihood of `labels` under row-softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

struct LossBundle {
  Tensor main;
  Tensor balance;
  Tensor smar;  // mean over layers
  Tensor total;
  double alpha = 0.0;
  double beta = 0.0;
};

/// total = main + alpha * balance + beta * mean(smar_per_layer). An empty
/// `smar_per_layer` means the SMAR term is disabled and contributes zero.
LossBundle total_loss(const Tensor& main, const Tensor& balance,
                      std::span<const Tensor> smar_per_layer, double alpha, double beta);

}  // namespace smar
