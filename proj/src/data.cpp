#include "smar/data.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <string>

#include "json.hpp"

#include "smar/error.hpp"

namespace smar {

namespace {

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t step, std::uint32_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    salt};
  return std::mt19937_64(seq);
}

Matrix make_centers(std::mt19937_64& rng, Index clusters, Index dim, double offset) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix c(static_cast<Eigen::Index>(clusters), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) c(i, j) = normal(rng);
  }
  // Center the cluster means so the modality mean is exactly the offset.
  c.rowwise() -= c.colwise().mean();
  const double per_coord = offset / std::sqrt(static_cast<double>(dim));
  c.array() += per_coord;
  return c;
}

}  // namespace

void SynthConfig::validate() const {
  if (!(vision_fraction > 0.0 && vision_fraction < 1.0)) {
    throw ParameterError("vision_fraction must lie strictly inside (0, 1)");
  }
  if (tokens_per_batch < 2) throw ParameterError("tokens_per_batch must be >= 2");
  if (dim_vision < 1 || dim_text < 1) throw ParameterError("feature dims must be >= 1");
  if (classes < 1 || clusters_per_modality < 1) {
    throw ParameterError("classes and clusters_per_modality must be >= 1");
  }
  if (!(cluster_spread >= 0.0) || !(modality_gap >= 0.0)) {
    throw ParameterError("cluster_spread and modality_gap must be >= 0");
  }
}

Index FeatureBatch::count(Modality m) const {
  return static_cast<Index>(std::count(modality.begin(), modality.end(), m));
}

Index vision_token_count(const SynthConfig& cfg) {
  const auto n = static_cast<Index>(
      std::floor(cfg.vision_fraction * static_cast<double>(cfg.tokens_per_batch) + 0.5));
  // Keep both modalities present.
  return std::clamp<Index>(n, 1, cfg.tokens_per_batch - 1);
}

SynthGenerator::SynthGenerator(SynthConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  auto rng = stream_rng(cfg_.seed, 0, 0xC0FFEEu);
  centers_[0] = make_centers(rng, cfg_.clusters_per_modality, cfg_.dim_vision,
                             0.5 * cfg_.modality_gap);
  centers_[1] = make_centers(rng, cfg_.clusters_per_modality, cfg_.dim_text,
                             -0.5 * cfg_.modality_gap);
}

FeatureBatch SynthGenerator::batch(std::uint64_t step) const {
  auto rng = stream_rng(cfg_.seed, step, 0xBA7C4u);
  const Index n = cfg_.tokens_per_batch;
  const Index n_vision = vision_token_count(cfg_);

  FeatureBatch out;
  out.modality.assign(n, Modality::kText);
  std::fill_n(out.modality.begin(), n_vision, Modality::kVision);
  std::shuffle(out.modality.begin(), out.modality.end(), rng);

  out.vision.resize(static_cast<Eigen::Index>(n_vision), centers_[0].cols());
  out.text.resize(static_cast<Eigen::Index>(n - n_vision), centers_[1].cols());
  std::uniform_int_distribution<Index> pick(0, cfg_.clusters_per_modality - 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  Eigen::Index next[2] = {0, 0};
  for (Index i = 0; i < n; ++i) {
    const int slot = static_cast<int>(out.modality[i]);
    Matrix& dst = slot == 0 ? out.vision : out.text;
    const Index c = pick(rng);
    const Eigen::Index row = next[slot]++;
    for (Eigen::Index j = 0; j < dst.cols(); ++j) {
      dst(row, j) = centers_[slot](static_cast<Eigen::Index>(c), j) +
                    cfg_.cluster_spread * noise(rng);
    }
    out.cluster.push_back(c);
    out.labels.push_back(static_cast<int>(c % cfg_.classes));
  }
  return out;
}

FeatureBatch generate_batch(const SynthConfig& cfg, std::uint64_t step) {
  return SynthGenerator(cfg).batch(step);
}

void write_batch_jsonl(std::ostream& os, const FeatureBatch& batch, std::uint64_t seed,
                       std::uint64_t step) {
  nlohmann::json tokens = nlohmann::json::array();
  Eigen::Index next[2] = {0, 0};
  for (Index i = 0; i < batch.size(); ++i) {
    const int slot = static_cast<int>(batch.modality[i]);
    const Matrix& src = slot == 0 ? batch.vision : batch.text;
    const Eigen::Index row = next[slot]++;
    std::vector<double> x(src.cols());
    for (Eigen::Index j = 0; j < src.cols(); ++j) x[static_cast<Index>(j)] = src(row, j);
    tokens.push_back({{"modality", modality_name(batch.modality[i])},
                      {"label", batch.labels[i]},
                      {"x", std::move(x)}});
  }
  nlohmann::json rec = {{"schema_version", 1}, {"seed", seed}, {"step", step},
                        {"tokens", std::move(tokens)}};
  os << rec.dump() << '\n';
}

}  // namespace smar
