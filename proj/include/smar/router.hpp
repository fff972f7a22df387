#pragma once

#include <span>
#include <utility>
#include <vector>

#include "smar/autodiff.hpp"

namespace smar {

enum class Modality { kVision = 0, kText = 1 };

const char* modality_name(Modality m);

/// Hidden states of one mini-batch plus the modality tag of every row.
struct TokenBatch {
  Tensor hidden;
  std::vector<Modality> modality;

  Index size() const { return modality.size(); }
  Index count(Modality m) const;
  /// Row indices of tokens with modality `m`, ascending.
  std::vector<Index> indices(Modality m) const;
};

/// Linear router g plus optional per-modality logit offsets.
struct RouterParams {
  Tensor gate;         // H x E
  Tensor bias_vision;  // 1 x E
  Tensor bias_text;    // 1 x E
  bool modality_bias = true;

  Index experts() const { return gate.cols(); }
};

struct RoutingOutcome {
  Tensor logits;         // N x E
  Tensor probabilities;  // N x E
  Tensor weights;        // N x E, renormalized within the selected set
  std::vector<std::vector<Index>> selected;  // per token, ordered by rank
  Index k = 0;

  Index tokens() const { return selected.size(); }
  Index experts() const { return probabilities.cols(); }
};

struct TopK {
  std::vector<Index> indices;  // ordered by descending probability
  std::vector<double> weights;  // full length E, zero outside `indices`
};

/// Picks the K largest entries of a probability row. Ties go to the lower
/// expert index.
TopK top_k_select(std::span<const double> p_row, Index k);

RoutingOutcome route(const RouterParams& params, const TokenBatch& batch, Index k);

}  // namespace smar
