#include "smar/mrd.hpp"

#include "smar/error.hpp"

namespace smar {

std::optional<MrdStats> compute_mrd(const RoutingOutcome& outcome, const TokenBatch& batch,
                                    Index layer) {
  if (outcome.tokens() != batch.size()) {
    throw DimensionError("compute_mrd: routing outcome and batch differ in token count");
  }
  const auto vision = batch.indices(Modality::kVision);
  const auto text = batch.indices(Modality::kText);
  if (vision.empty() || text.empty()) return std::nullopt;

  MrdStats stats;
  stats.layer = layer;
  stats.tokens_vision = vision.size();
  stats.tokens_text = text.size();
  const auto experts = static_cast<Eigen::Index>(outcome.experts());
  const double k = static_cast<double>(outcome.k);

  for (Modality m : {Modality::kVision, Modality::kText}) {
    const auto slot = static_cast<int>(m);
    const auto& rows = m == Modality::kVision ? vision : text;
    const double n_m = static_cast<double>(rows.size());

    Matrix f = Matrix::Zero(1, experts);
    for (Index i : rows) {
      for (Index e : outcome.selected[i]) f(0, static_cast<Eigen::Index>(e)) += 1.0;
    }
    f /= k * n_m;

    Tensor r = col_mean(gather_rows(outcome.weights, rows));
    Tensor q = add_scalar(mul(Tensor::constant(f), r), kMrdEpsilon);
    stats.distribution[slot] = scale_rows(q, reciprocal(row_sum(q)));
    stats.frequency[slot] = std::move(f);
    stats.expected_weight[slot] = std::move(r);
    stats.mass[slot] = std::move(q);
  }
  stats.distance = sym_kl(stats.distribution[0], stats.distribution[1]);
  return stats;
}

Tensor sym_kl(const Tensor& qv, const Tensor& qt) {
  if (qv.rows() != 1 || qt.rows() != 1 || qv.cols() != qt.cols()) {
    throw DimensionError("sym_kl: expected two 1 x E rows of equal length");
  }
  if ((qv.value().array() <= 0.0).any() || (qt.value().array() <= 0.0).any()) {
    throw NumericError("sym_kl: distributions must be strictly positive");
  }
  // KL(a||b) + KL(b||a) = sum (a - b) * (log a - log b)
  Tensor diff = sub(qv, qt);
  Tensor log_ratio = sub(log(qv), log(qt));
  return scale(sum(mul(diff, log_ratio)), 0.5);
}

}  // namespace smar
