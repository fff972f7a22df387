#pragma once

#include <array>
#include <optional>

#include "smar/autodiff.hpp"
#include "smar/router.hpp"

namespace smar {

/// Additive smoothing applied to the unnormalized expert mass before it is
/// normalized into a routing distribution.
inline constexpr double kMrdEpsilon = 1e-8;

/// Per-modality routing statistics for one MoE layer. Array slots are
/// indexed by Modality.
struct MrdStats {
  std::array<Matrix, 2> frequency;  // F, 1 x E, held constant
  std::array<Tensor, 2> expected_weight;  // R, 1 x E
  std::array<Tensor, 2> mass;             // Q = F * R + eps, 1 x E
  std::array<Tensor, 2> distribution;     // normalized Q, 1 x E
  Tensor distance;                        // symmetric KL, 1 x 1
  Index tokens_vision = 0;
  Index tokens_text = 0;
  Index layer = 0;

  const Matrix& f(Modality m) const { return frequency[static_cast<int>(m)]; }
  const Tensor& r(Modality m) const { return expected_weight[static_cast<int>(m)]; }
  const Tensor& q(Modality m) const { return distribution[static_cast<int>(m)]; }
  double d() const { return distance.item(); }
};

/// Returns nullopt when the batch lacks one of the modalities, in which case
/// the routing distance is undefined for this batch.
std::optional<MrdStats> compute_mrd(const RoutingOutcome& outcome, const TokenBatch& batch,
                                    Index layer = 0);

/// 0.5 * (KL(qv || qt) + KL(qt || qv)) in nats. Both inputs must be strictly
/// positive 1 x E rows.
Tensor sym_kl(const Tensor& qv, const Tensor& qt);

}  // namespace smar
