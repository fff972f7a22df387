#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include <Eigen/QR>

#include "json.hpp"
#include "smar/data.hpp"
#include "smar/error.hpp"

using namespace smar;

namespace {

// One-vs-all least-squares probe with a bias column; returns training accuracy.
double linear_probe_accuracy(const Matrix& x, const std::vector<int>& labels, int classes) {
  Matrix a(x.rows(), x.cols() + 1);
  a << x, Matrix::Ones(x.rows(), 1);
  Matrix y = Matrix::Zero(x.rows(), classes);
  for (Eigen::Index i = 0; i < x.rows(); ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  const Matrix w = a.completeOrthogonalDecomposition().solve(y);
  const Matrix scores = a * w;
  int correct = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index best;
    scores.row(i).maxCoeff(&best);
    correct += best == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(x.rows());
}

std::vector<int> labels_of(const FeatureBatch& b, Modality m) {
  std::vector<int> out;
  for (Index i = 0; i < b.size(); ++i) {
    if (b.modality[i] == m) out.push_back(b.labels[i]);
  }
  return out;
}

}  // namespace

TEST_CASE("batches are a function of seed and step") {
  SynthConfig cfg;
  const auto a = generate_batch(cfg, 7);
  const auto b = generate_batch(cfg, 7);
  CHECK(a.vision == b.vision);
  CHECK(a.text == b.text);
  CHECK(a.modality == b.modality);
  CHECK(a.labels == b.labels);
  CHECK(generate_batch(cfg, 8).vision != a.vision);
  cfg.seed = 2;
  CHECK(generate_batch(cfg, 7).vision != a.vision);
}

TEST_CASE("modality split") {
  SynthConfig cfg;
  cfg.tokens_per_batch = 64;
  cfg.vision_fraction = 0.5;
  const auto b = generate_batch(cfg, 0);
  CHECK(b.count(Modality::kVision) == 32);
  CHECK(b.count(Modality::kText) == 32);
  CHECK(b.vision.rows() == 32);

  cfg.tokens_per_batch = 128;
  cfg.vision_fraction = 0.8;
  CHECK(vision_token_count(cfg) == 102);
  cfg.vision_fraction = 0.001;
  CHECK(vision_token_count(cfg) == 1);
  cfg.vision_fraction = 0.999;
  CHECK(vision_token_count(cfg) == 127);
}

TEST_CASE("labels are linearly decodable without noise") {
  SynthConfig cfg;
  cfg.cluster_spread = 0.0;
  cfg.tokens_per_batch = 256;
  const auto b = generate_batch(cfg, 3);
  CHECK(linear_probe_accuracy(b.vision, labels_of(b, Modality::kVision), 8) == 1.0);
  CHECK(linear_probe_accuracy(b.text, labels_of(b, Modality::kText), 8) == 1.0);
  for (Index i = 0; i < b.size(); ++i) CHECK(b.labels[i] == static_cast<int>(b.cluster[i] % 8));
}

TEST_CASE("modality means are separated by the gap") {
  SynthConfig cfg;
  cfg.modality_gap = 3.0;
  const SynthGenerator gen(cfg);
  const Matrix mv = gen.centers(Modality::kVision).colwise().mean();
  const Matrix mt = gen.centers(Modality::kText).colwise().mean();
  CHECK((mv - mt).norm() == doctest::Approx(3.0).epsilon(1e-12));

  cfg.tokens_per_batch = 4000;
  cfg.vision_fraction = 0.5;
  const auto b = generate_batch(cfg, 0);
  const double empirical = (b.vision.colwise().mean() - b.text.colwise().mean()).norm();
  CHECK(empirical == doctest::Approx(3.0).epsilon(0.15));
}

TEST_CASE("config validation") {
  SynthConfig cfg;
  cfg.vision_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = SynthConfig{};
  cfg.tokens_per_batch = 1;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = SynthConfig{};
  cfg.cluster_spread = -1.0;
  CHECK_THROWS_AS(SynthGenerator{cfg}, ParameterError);
}

TEST_CASE("jsonl export") {
  SynthConfig cfg;
  cfg.tokens_per_batch = 6;
  const auto b = generate_batch(cfg, 4);
  std::ostringstream os;
  write_batch_jsonl(os, b, cfg.seed, 4);
  const auto j = nlohmann::json::parse(os.str());
  CHECK(j["step"] == 4);
  CHECK(j["tokens"].size() == 6);
  CHECK(j["tokens"][0]["x"].size() == 16);
  CHECK(j["tokens"][0]["label"] == b.labels[0]);
}
