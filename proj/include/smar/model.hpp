#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "smar/autodiff.hpp"
#include "smar/data.hpp"
#include "smar/mrd.hpp"
#include "smar/router.hpp"

namespace smar {

struct ModelDims {
  Index dim_vision = 16;
  Index dim_text = 16;
  Index hidden = 64;
  Index ffn = 128;
  Index classes = 8;
  Index layers = 4;
  Index experts = 8;
  Index top_k = 2;
  bool modality_bias = true;

  void validate() const;
};

struct ExpertFfn {
  Tensor w1;  // H x H_ff
  Tensor w2;  // H_ff x H

  Tensor operator()(const Tensor& x) const { return matmul(relu(matmul(x, w1)), w2); }
};

struct MoeLayer {
  RouterParams router;
  std::vector<ExpertFfn> experts;
  Index k = 2;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

/// Routing of one layer plus its MRD statistics (absent for single-modality
/// batches).
struct LayerTrace {
  RoutingOutcome routing;
  std::optional<MrdStats> mrd;
};

struct ForwardResult {
  Tensor logits;
  std::vector<LayerTrace> layers;
};

class MoeModel {
 public:
  /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); router biases start at zero.
  MoeModel(const ModelDims& dims, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }
  std::vector<MoeLayer>& layers() { return layers_; }
  const std::vector<MoeLayer>& layers() const { return layers_; }

  /// Trainable parameters in a fixed order. Router biases appear only when
  /// the modality bias is enabled.
  std::vector<NamedParameter> parameters() const;
  /// Every stored tensor, including disabled biases.
  std::vector<NamedParameter> state() const;

  ForwardResult forward(const FeatureBatch& batch) const;
  /// Token-ordered hidden states after the modality projections.
  Tensor embed(const FeatureBatch& batch) const;
  /// One MoE layer: x + sum over selected experts of weight * FFN(x).
  Tensor apply_layer(const MoeLayer& layer, const Tensor& x, const RoutingOutcome& routing) const;

  static Index parameter_count(const ModelDims& dims);

 private:
  ModelDims dims_;
  Tensor proj_vision_;
  Tensor proj_text_;
  std::vector<MoeLayer> layers_;
  Tensor head_;
};

/// Checkpoint container: named parameter matrices plus an opaque config blob
/// and its hash.
void save_checkpoint(const std::string& path, const MoeModel& model,
                     const std::string& config_text);
/// Loads parameters into `model`; throws ConfigError when the stored config
/// hash differs from the hash of `expected_config_text` or a shape mismatches.
void load_checkpoint(const std::string& path, MoeModel& model,
                     const std::string& expected_config_text);
/// Reads only the stored config text.
std::string read_checkpoint_config(const std::string& path);

std::uint64_t config_hash(const std::string& text);

}  // namespace smar
