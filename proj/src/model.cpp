#include "smar/model.hpp"

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include "json.hpp"
#include "smar/error.hpp"

namespace smar {

namespace {

constexpr int kCheckpointVersion = 1;

Tensor init_weight(std::mt19937_64& rng, Index rows, Index cols) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
  }
  return Tensor::parameter(std::move(m));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void ModelDims::validate() const {
  if (dim_vision < 1 || dim_text < 1 || hidden < 1 || ffn < 1 || classes < 1) {
    throw ParameterError("model dimensions must be >= 1");
  }
  if (layers < 1) throw ParameterError("model needs at least one layer");
  if (experts < 1) throw ParameterError("model needs at least one expert");
  if (top_k < 1 || top_k > experts) throw ParameterError("top_k must lie in [1, experts]");
}

MoeModel::MoeModel(const ModelDims& dims, std::uint64_t seed) : dims_(dims) {
  dims_.validate();
  std::mt19937_64 rng(seed);
  proj_vision_ = init_weight(rng, dims_.dim_vision, dims_.hidden);
  proj_text_ = init_weight(rng, dims_.dim_text, dims_.hidden);
  const auto e = static_cast<Eigen::Index>(dims_.experts);
  for (Index l = 0; l < dims_.layers; ++l) {
    MoeLayer layer;
    layer.k = dims_.top_k;
    layer.router.gate = init_weight(rng, dims_.hidden, dims_.experts);
    layer.router.bias_vision = Tensor(Matrix::Zero(1, e), dims_.modality_bias);
    layer.router.bias_text = Tensor(Matrix::Zero(1, e), dims_.modality_bias);
    layer.router.modality_bias = dims_.modality_bias;
    for (Index x = 0; x < dims_.experts; ++x) {
      ExpertFfn ffn;
      ffn.w1 = init_weight(rng, dims_.hidden, dims_.ffn);
      ffn.w2 = init_weight(rng, dims_.ffn, dims_.hidden);
      layer.experts.push_back(std::move(ffn));
    }
    layers_.push_back(std::move(layer));
  }
  head_ = init_weight(rng, dims_.hidden, dims_.classes);
}

Index MoeModel::parameter_count(const ModelDims& d) {
  const Index per_layer = d.hidden * d.experts + (d.modality_bias ? 2 * d.experts : 0) +
                          d.experts * 2 * d.hidden * d.ffn;
  return (d.dim_vision + d.dim_text) * d.hidden + d.layers * per_layer + d.hidden * d.classes;
}

namespace {

std::vector<NamedParameter> collect(const MoeModel& m, const Tensor& pv, const Tensor& pt,
                                    const Tensor& head, bool include_bias) {
  std::vector<NamedParameter> out;
  out.push_back({"proj.vision", pv});
  out.push_back({"proj.text", pt});
  for (Index l = 0; l < m.layers().size(); ++l) {
    const auto& layer = m.layers()[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "router.gate", layer.router.gate});
    if (include_bias) {
      out.push_back({p + "router.bias_vision", layer.router.bias_vision});
      out.push_back({p + "router.bias_text", layer.router.bias_text});
    }
    for (Index e = 0; e < layer.experts.size(); ++e) {
      const std::string q = p + "experts." + std::to_string(e) + ".";
      out.push_back({q + "w1", layer.experts[e].w1});
      out.push_back({q + "w2", layer.experts[e].w2});
    }
  }
  out.push_back({"head", head});
  return out;
}

}  // namespace

std::vector<NamedParameter> MoeModel::parameters() const {
  return collect(*this, proj_vision_, proj_text_, head_, dims_.modality_bias);
}

std::vector<NamedParameter> MoeModel::state() const {
  return collect(*this, proj_vision_, proj_text_, head_, true);
}

Tensor MoeModel::embed(const FeatureBatch& batch) const {
  const Index n = batch.size();
  const Index n_vision = batch.count(Modality::kVision);
  if (static_cast<Index>(batch.vision.rows()) != n_vision ||
      static_cast<Index>(batch.text.rows()) != n - n_vision) {
    throw DimensionError("forward: feature rows disagree with modality labels");
  }
  if (n_vision > 0 && static_cast<Index>(batch.vision.cols()) != dims_.dim_vision) {
    throw DimensionError("forward: vision features have " + std::to_string(batch.vision.cols()) +
                         " dims, model expects " + std::to_string(dims_.dim_vision));
  }
  if (n_vision < n && static_cast<Index>(batch.text.cols()) != dims_.dim_text) {
    throw DimensionError("forward: text features have " + std::to_string(batch.text.cols()) +
                         " dims, model expects " + std::to_string(dims_.dim_text));
  }

  std::vector<Tensor> blocks;
  if (n_vision > 0) blocks.push_back(matmul(Tensor::constant(batch.vision), proj_vision_));
  if (n_vision < n) blocks.push_back(matmul(Tensor::constant(batch.text), proj_text_));
  Tensor stacked = concat_rows(blocks);

  // Map token i to its row in [vision block; text block].
  std::vector<Index> order(n);
  Index v = 0;
  Index t = n_vision;
  for (Index i = 0; i < n; ++i) order[i] = batch.modality[i] == Modality::kVision ? v++ : t++;
  return gather_rows(stacked, order);
}

Tensor MoeModel::apply_layer(const MoeLayer& layer, const Tensor& x,
                             const RoutingOutcome& routing) const {
  const Index n = x.rows();
  Tensor y = x;
  for (Index e = 0; e < layer.experts.size(); ++e) {
    std::vector<Index> rows;
    for (Index i = 0; i < n; ++i) {
      const auto& chosen = routing.selected[i];
      if (std::find(chosen.begin(), chosen.end(), e) != chosen.end()) rows.push_back(i);
    }
    if (rows.empty()) continue;
    Tensor out = layer.experts[e](gather_rows(x, rows));
    Tensor gate = gather_rows(column(routing.weights, e), rows);
    y = add(y, scatter_add_rows(scale_rows(out, gate), rows, n));
  }
  return y;
}

ForwardResult MoeModel::forward(const FeatureBatch& batch) const {
  if (batch.size() == 0) throw InputError("forward: empty batch");
  ForwardResult result;
  TokenBatch tokens{embed(batch), batch.modality};
  for (Index l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    LayerTrace trace{route(layer.router, tokens, layer.k), std::nullopt};
    trace.mrd = compute_mrd(trace.routing, tokens, l);
    tokens.hidden = apply_layer(layer, tokens.hidden, trace.routing);
    result.layers.push_back(std::move(trace));
  }
  result.logits = matmul(tokens.hidden, head_);
  return result;
}

std::uint64_t config_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void save_checkpoint(const std::string& path, const MoeModel& model,
                     const std::string& config_text) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : model.state()) {
    const Matrix& v = p.tensor.value();
    std::vector<double> values(v.data(), v.data() + v.size());
    params.push_back({{"name", p.name}, {"rows", v.rows()}, {"cols", v.cols()},
                      {"values", std::move(values)}});
  }
  nlohmann::json doc = {{"format", "smar-checkpoint"},
                        {"schema_version", kCheckpointVersion},
                        {"config", config_text},
                        {"config_hash", hex64(config_hash(config_text))},
                        {"parameters", std::move(params)}};
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw ConfigError("cannot write checkpoint " + path);
    os << doc.dump();
    if (!os) throw ConfigError("failed writing checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw ConfigError("cannot move checkpoint into place at " + path);
  }
}

namespace {

nlohmann::json read_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  if (doc.value("format", "") != "smar-checkpoint") {
    throw ConfigError("checkpoint " + path + " has an unknown format");
  }
  if (doc.value("schema_version", 0) != kCheckpointVersion) {
    throw ConfigError("checkpoint " + path + " has schema version " +
                      doc.value("schema_version", nlohmann::json(0)).dump() + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  return doc;
}

}  // namespace

std::string read_checkpoint_config(const std::string& path) {
  return read_checkpoint(path).at("config").get<std::string>();
}

void load_checkpoint(const std::string& path, MoeModel& model,
                     const std::string& expected_config_text) {
  const auto doc = read_checkpoint(path);
  const auto stored = doc.at("config_hash").get<std::string>();
  if (stored != hex64(config_hash(expected_config_text))) {
    throw ConfigError("checkpoint " + path + " was written for a different configuration");
  }
  auto slots = model.state();
  const auto& params = doc.at("parameters");
  if (params.size() != slots.size()) {
    throw ConfigError("checkpoint " + path + " holds " + std::to_string(params.size()) +
                      " tensors, model has " + std::to_string(slots.size()));
  }
  for (Index i = 0; i < slots.size(); ++i) {
    const auto& p = params[i];
    auto& slot = slots[i];
    if (p.at("name").get<std::string>() != slot.name) {
      throw ConfigError("checkpoint tensor " + p.at("name").get<std::string>() +
                        " does not match " + slot.name);
    }
    const auto rows = p.at("rows").get<Index>();
    const auto cols = p.at("cols").get<Index>();
    const auto values = p.at("values").get<std::vector<double>>();
    if (rows != slot.tensor.rows() || cols != slot.tensor.cols() ||
        values.size() != rows * cols) {
      throw ConfigError("checkpoint tensor " + slot.name + " has the wrong shape");
    }
    Matrix& dst = slot.tensor.mutable_value();
    std::copy(values.begin(), values.end(), dst.data());
  }
}

}  // namespace smar
