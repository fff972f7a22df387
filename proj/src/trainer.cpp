#include "smar/trainer.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <variant>

#include "json.hpp"
#include "smar/losses.hpp"

namespace smar {

namespace {

static_assert(std::is_same_v<Index, std::uint64_t>, "seed is stored through the Index slot");
using Field = std::variant<Index TrainConfig::*, double TrainConfig::*, bool TrainConfig::*>;

struct KeySpec {
  const char* name;
  Field field;
};

// Canonical key order of the config file.
const KeySpec kKeys[] = {
    {"layers", &TrainConfig::layers},
    {"experts", &TrainConfig::experts},
    {"top_k", &TrainConfig::top_k},
    {"hidden", &TrainConfig::hidden},
    {"ffn_hidden", &TrainConfig::ffn_hidden},
    {"classes", &TrainConfig::classes},
    {"d_min", &TrainConfig::d_min},
    {"d_max", &TrainConfig::d_max},
    {"alpha", &TrainConfig::alpha},
    {"beta", &TrainConfig::beta},
    {"learning_rate", &TrainConfig::learning_rate},
    {"momentum", &TrainConfig::momentum},
    {"steps", &TrainConfig::steps},
    {"batch_size", &TrainConfig::batch_size},
    {"seed", &TrainConfig::seed},
    {"smar_start_step", &TrainConfig::smar_start_step},
    {"modality_bias_enabled", &TrainConfig::modality_bias_enabled},
    {"load_balance_enabled", &TrainConfig::load_balance_enabled},
    {"log_every", &TrainConfig::log_every},
    {"eval_batches", &TrainConfig::eval_batches},
    {"vision_fraction", &TrainConfig::vision_fraction},
    {"dim_vision", &TrainConfig::dim_vision},
    {"dim_text", &TrainConfig::dim_text},
    {"clusters_per_modality", &TrainConfig::clusters_per_modality},
    {"cluster_spread", &TrainConfig::cluster_spread},
    {"modality_gap", &TrainConfig::modality_gap},
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest text that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError("config key '" + key + "': bad value '" + value + "'");
  return out;
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& value) {
  if (value.empty() || value.front() == '-') {
    throw ConfigError("config key '" + key + "': expected a nonnegative integer");
  }
  return parse_number<std::uint64_t>(key, value);
}

bool is_finite(const StepMetrics& m) {
  return std::isfinite(m.main) && std::isfinite(m.balance) && std::isfinite(m.smar) &&
         std::isfinite(m.total);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "schema_version") {
    if (parse_number<int>(key, value) != kConfigSchemaVersion) {
      throw ConfigError("config schema_version " + value + " is not supported (expected " +
                        std::to_string(kConfigSchemaVersion) + ")");
    }
    return;
  }
  for (const auto& spec : kKeys) {
    if (key != spec.name) continue;
    std::visit(
        [&](auto member) {
          using T = std::remove_reference_t<decltype(this->*member)>;
          if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1") {
              this->*member = true;
            } else if (value == "false" || value == "0") {
              this->*member = false;
            } else {
              throw ConfigError("config key '" + key + "': expected true or false");
            }
          } else if constexpr (std::is_same_v<T, double>) {
            this->*member = parse_number<double>(key, value);
          } else {
            this->*member = static_cast<T>(parse_unsigned(key, value));
          }
        },
        spec.field);
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::string& path) {
  if (path == "default") return TrainConfig{};
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "schema_version = " << kConfigSchemaVersion << '\n';
  for (const auto& spec : kKeys) {
    os << spec.name << " = ";
    std::visit(
        [&](auto member) {
          using T = std::remove_cvref_t<decltype(this->*member)>;
          if constexpr (std::is_same_v<T, bool>) {
            os << (this->*member ? "true" : "false");
          } else if constexpr (std::is_same_v<T, double>) {
            os << format_double(this->*member);
          } else {
            os << this->*member;
          }
        },
        spec.field);
    os << '\n';
  }
  return os.str();
}

void TrainConfig::validate() const {
  model_dims().validate();
  synth_config().validate();
  SmarBand band(d_min, d_max);
  (void)band;
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("alpha and beta must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (smar_start_step > steps) throw ConfigError("smar_start_step must not exceed steps");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
}

ModelDims TrainConfig::model_dims() const {
  ModelDims d;
  d.dim_vision = dim_vision;
  d.dim_text = dim_text;
  d.hidden = hidden;
  d.ffn = ffn_hidden;
  d.classes = classes;
  d.layers = layers;
  d.experts = experts;
  d.top_k = top_k;
  d.modality_bias = modality_bias_enabled;
  return d;
}

SynthConfig TrainConfig::synth_config() const {
  SynthConfig s;
  s.seed = seed;
  s.vision_fraction = vision_fraction;
  s.tokens_per_batch = batch_size;
  s.dim_vision = dim_vision;
  s.dim_text = dim_text;
  s.classes = classes;
  s.clusters_per_modality = clusters_per_modality;
  s.cluster_spread = cluster_spread;
  s.modality_gap = modality_gap;
  return s;
}

double accuracy(const Matrix& logits, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  Index correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg == labels[static_cast<Index>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<LayerRouting> summarize_routing(const ForwardResult& fwd,
                                            const std::vector<Modality>& modality,
                                            const std::optional<SmarBand>& band) {
  std::vector<LayerRouting> out;
  for (Index l = 0; l < fwd.layers.size(); ++l) {
    const auto& trace = fwd.layers[l];
    const Index experts = trace.routing.experts();
    LayerRouting r;
    r.layer = l;
    r.selections_vision.assign(experts, 0);
    r.selections_text.assign(experts, 0);
    for (Index i = 0; i < trace.routing.tokens(); ++i) {
      const bool vision = modality[i] == Modality::kVision;
      (vision ? r.tokens_vision : r.tokens_text) += 1;
      auto& sel = vision ? r.selections_vision : r.selections_text;
      for (Index e : trace.routing.selected[i]) ++sel[e];
    }
    const double k = static_cast<double>(trace.routing.k);
    auto shares = [&](const std::vector<Index>& sel, Index tokens) {
      std::vector<double> s(experts, 0.0);
      if (tokens == 0) return s;
      for (Index e = 0; e < experts; ++e) {
        s[e] = static_cast<double>(sel[e]) / (k * static_cast<double>(tokens));
      }
      return s;
    };
    r.shares_vision = shares(r.selections_vision, r.tokens_vision);
    r.shares_text = shares(r.selections_text, r.tokens_text);
    if (trace.mrd) {
      r.d_sym_kl = trace.mrd->d();
      if (band) r.smar = smar_loss(*r.d_sym_kl, *band);
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

nlohmann::json layer_to_json(const LayerRouting& r) {
  return {{"layer", r.layer},
          {"d_sym_kl", r.d_sym_kl ? nlohmann::json(*r.d_sym_kl) : nlohmann::json(nullptr)},
          {"smar", r.smar},
          {"expert_shares_vision", r.shares_vision},
          {"expert_shares_text", r.shares_text},
          {"selections_vision", r.selections_vision},
          {"selections_text", r.selections_text},
          {"tokens_vision", r.tokens_vision},
          {"tokens_text", r.tokens_text}};
}

LayerRouting layer_from_json(const nlohmann::json& j) {
  LayerRouting r;
  r.layer = j.at("layer").get<Index>();
  if (!j.at("d_sym_kl").is_null()) r.d_sym_kl = j.at("d_sym_kl").get<double>();
  r.smar = j.value("smar", 0.0);
  r.shares_vision = j.at("expert_shares_vision").get<std::vector<double>>();
  r.shares_text = j.at("expert_shares_text").get<std::vector<double>>();
  r.selections_vision = j.at("selections_vision").get<std::vector<Index>>();
  r.selections_text = j.at("selections_text").get<std::vector<Index>>();
  r.tokens_vision = j.at("tokens_vision").get<Index>();
  r.tokens_text = j.at("tokens_text").get<Index>();
  return r;
}

}  // namespace

std::string metrics_to_json(const StepMetrics& m, const char* kind) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& r : m.layers) layers.push_back(layer_to_json(r));
  nlohmann::json rec = {{"schema_version", kMetricsSchemaVersion},
                        {"kind", kind},
                        {"step", m.step},
                        {"losses",
                         {{"main", m.main},
                          {"balance", m.balance},
                          {"smar", m.smar},
                          {"total", m.total}}},
                        {"per_layer", std::move(layers)},
                        {"accuracy", m.accuracy}};
  return rec.dump();
}

StepMetrics metrics_from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metrics record is not valid JSON: ") + e.what());
  }
  if (j.value("schema_version", 0) != kMetricsSchemaVersion) {
    throw ConfigError("metrics record has unsupported schema_version");
  }
  try {
    StepMetrics m;
    m.step = j.at("step").get<Index>();
    const auto& losses = j.at("losses");
    m.main = losses.at("main").get<double>();
    m.balance = losses.at("balance").get<double>();
    m.smar = losses.at("smar").get<double>();
    m.total = losses.at("total").get<double>();
    m.accuracy = j.at("accuracy").get<double>();
    for (const auto& l : j.at("per_layer")) m.layers.push_back(layer_from_json(l));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metrics record is malformed: ") + e.what());
  }
}

SgdMomentum::SgdMomentum(std::vector<NamedParameter> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  for (const auto& p : params_) {
    velocity_.push_back(Matrix::Zero(p.tensor.value().rows(), p.tensor.value().cols()));
  }
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void SgdMomentum::step() {
  for (Index i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].tensor;
    if (!p.grad()) continue;
    velocity_[i] = momentum_ * velocity_[i] + *p.grad();
    p.mutable_value() -= lr_ * velocity_[i];
  }
}

TrainResult train(const TrainConfig& cfg, const MetricsSink& sink) {
  cfg.validate();
  TrainResult result{MoeModel(cfg.model_dims(), cfg.seed), {}};
  const SynthGenerator data(cfg.synth_config());
  SgdMomentum optimizer(result.model.parameters(), cfg.learning_rate, cfg.momentum);
  const SmarBand band(cfg.d_min, cfg.d_max);
  std::optional<StepMetrics> last;

  auto abort = [&](Index step, const std::string& why) {
    return TrainingAborted(why + " at step " + std::to_string(step) +
                               (last ? "; last logged metrics: " + metrics_to_json(*last) : ""),
                           last);
  };

  for (Index step = 0; step < cfg.steps; ++step) {
    try {
      const FeatureBatch batch = data.batch(step);
      const ForwardResult fwd = result.model.forward(batch);

      Tensor main = cross_entropy(fwd.logits, batch.labels);
      Tensor balance = Tensor::scalar(0.0);
      std::vector<Tensor> smar_terms;
      const bool smar_active = cfg.beta > 0.0 && step >= cfg.smar_start_step;
#ifndef SMAR_PLAIN_MOE
      if (cfg.load_balance_enabled) {
        Tensor acc = load_balance_loss(fwd.layers.front().routing);
        for (Index l = 1; l < fwd.layers.size(); ++l) {
          acc = add(acc, load_balance_loss(fwd.layers[l].routing));
        }
        balance = scale(acc, 1.0 / static_cast<double>(fwd.layers.size()));
      }
      if (smar_active) {
        for (const auto& trace : fwd.layers) {
          if (trace.mrd) smar_terms.push_back(smar_loss(trace.mrd->distance, band));
        }
      }
#endif
      const double alpha = cfg.load_balance_enabled ? cfg.alpha : 0.0;
      const double beta = smar_terms.empty() ? 0.0 : cfg.beta;
      LossBundle losses = total_loss(main, balance, smar_terms, alpha, beta);

      const bool log_now = step % cfg.log_every == 0 || step + 1 == cfg.steps;
      StepMetrics m;
      m.step = step;
      m.main = losses.main.item();
      m.balance = losses.balance.item();
      m.smar = losses.smar.item();
      m.total = losses.total.item();
      if (!is_finite(m)) throw abort(step, "non-finite loss");
      if (log_now) {
        m.accuracy = accuracy(fwd.logits.value(), batch.labels);
        m.layers = summarize_routing(fwd, batch.modality,
                                     smar_active ? std::optional<SmarBand>(band) : std::nullopt);
        if (sink) sink(m);
        last = m;
        result.log.push_back(std::move(m));
      }

      optimizer.zero_grad();
      backward(losses.total);
      optimizer.step();
    } catch (const NumericError& e) {
      // Diverged parameters surface as NaN logits before the loss is formed.
      throw abort(step, std::string("numeric failure (") + e.what() + ")");
    }
  }
  return result;
}

std::vector<std::vector<double>> EvalReport::d_by_layer() const {
  std::vector<std::vector<double>> out;
  for (const auto& layers : batches) {
    if (out.size() < layers.size()) out.resize(layers.size());
    for (const auto& r : layers) {
      if (r.d_sym_kl) out[r.layer].push_back(*r.d_sym_kl);
    }
  }
  return out;
}

std::vector<double> EvalReport::mean_d_by_layer() const {
  std::vector<double> out;
  for (const auto& ds : d_by_layer()) {
    double acc = 0.0;
    for (double d : ds) acc += d;
    out.push_back(ds.empty() ? 0.0 : acc / static_cast<double>(ds.size()));
  }
  return out;
}

EvalReport evaluate(const MoeModel& model, const TrainConfig& cfg, Index n_batches) {
  EvalReport report;
  if (n_batches == 0) return report;
  NoGradGuard no_grad;
  const SynthGenerator data(cfg.synth_config());
  double acc = 0.0;
  for (Index b = 0; b < n_batches; ++b) {
    const FeatureBatch batch = data.batch(kEvalStepBase + b);
    const ForwardResult fwd = model.forward(batch);
    acc += accuracy(fwd.logits.value(), batch.labels);
    report.batches.push_back(summarize_routing(fwd, batch.modality, std::nullopt));
  }
  report.accuracy = acc / static_cast<double>(n_batches);
  return report;
}

}  // namespace smar
