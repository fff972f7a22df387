#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "smar/autodiff.hpp"
#include "smar/router.hpp"

namespace smar {

struct SynthConfig {
  std::uint64_t seed = 1;
  double vision_fraction = 0.8;
  Index tokens_per_batch = 128;
  Index dim_vision = 16;
  Index dim_text = 16;
  Index classes = 8;
  Index clusters_per_modality = 8;
  double cluster_spread = 0.5;
  /// Distance between the vision and text feature means (along the all-ones
  /// direction, when both modalities share a dimension).
  double modality_gap = 2.0;

  void validate() const;
};

/// Raw modality features of one batch in token order. Row j of `vision` is
/// the j-th vision token, likewise for `text`.
struct FeatureBatch {
  Matrix vision;
  Matrix text;
  std::vector<Modality> modality;
  std::vector<int> labels;
  std::vector<Index> cluster;

  Index size() const { return modality.size(); }
  Index count(Modality m) const;
};

/// Gaussian-mixture generator. Cluster centers are a function of the seed;
/// batch contents are a function of (seed, step).
class SynthGenerator {
 public:
  explicit SynthGenerator(SynthConfig cfg);

  const SynthConfig& config() const { return cfg_; }
  FeatureBatch batch(std::uint64_t step) const;
  /// Cluster centers after the modality offset is applied.
  const Matrix& centers(Modality m) const { return centers_[static_cast<int>(m)]; }

 private:
  SynthConfig cfg_;
  Matrix centers_[2];
};

FeatureBatch generate_batch(const SynthConfig& cfg, std::uint64_t step);

/// Number of vision tokens in a batch: round-half-up of fraction * tokens.
Index vision_token_count(const SynthConfig& cfg);

/// Writes one JSON record per batch for offline inspection.
void write_batch_jsonl(std::ostream& os, const FeatureBatch& batch, std::uint64_t seed,
                       std::uint64_t step);

}  // namespace smar
