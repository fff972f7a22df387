// Command-line front end: train, eval, analyze, gen-data.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smar/analysis.hpp"
#include "smar/data.hpp"
#include "smar/model.hpp"
#include "smar/trainer.hpp"

namespace fs = std::filesystem;

namespace {

// Relative output paths land under $SMAR_OUT_DIR when it is set.
std::string output_path(const std::string& path) {
  const char* dir = std::getenv("SMAR_OUT_DIR");
  if (dir == nullptr || *dir == '\0' || fs::path(path).is_absolute()) return path;
  fs::create_directories(dir);
  return (fs::path(dir) / path).string();
}

smar::TrainConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  auto cfg = smar::TrainConfig::load(path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw smar::ConfigError("--set expects key=value, got " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

// Writes to `path` through a temporary file so failures leave nothing behind.
template <typename Fn>
void write_atomically(const std::string& path, Fn&& fn) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw smar::ConfigError("cannot write " + path);
    fn(os);
    if (!os) throw smar::ConfigError("failed writing " + path);
  }
  fs::rename(tmp, path);
}

int run_train(const std::string& config, const std::vector<std::string>& sets,
              const std::string& checkpoint, const std::string& metrics) {
  const auto cfg = load_config(config, sets);
  const auto ckpt_path = output_path(checkpoint);
  const auto metrics_path = output_path(metrics);
  std::vector<std::string> lines;
  auto result = smar::train(cfg, [&](const smar::StepMetrics& m) {
    lines.push_back(smar::metrics_to_json(m));
    std::cerr << "step " << m.step << " total " << m.total << " acc " << m.accuracy << '\n';
  });
  write_atomically(metrics_path, [&](std::ostream& os) {
    for (const auto& l : lines) os << l << '\n';
  });
  smar::save_checkpoint(ckpt_path, result.model, cfg.to_text());
  std::cout << "checkpoint: " << ckpt_path << "\nmetrics: " << metrics_path << '\n';
  return 0;
}

int run_eval(const std::string& checkpoint, long batches, const std::string& out) {
  const auto text = smar::read_checkpoint_config(checkpoint);
  const auto cfg = smar::TrainConfig::parse(text);
  smar::MoeModel model(cfg.model_dims(), cfg.seed);
  smar::load_checkpoint(checkpoint, model, text);
  const auto n = batches < 0 ? cfg.eval_batches : static_cast<smar::Index>(batches);
  const auto report = smar::evaluate(model, cfg, n);
  if (report.empty()) {
    std::cout << "no evaluation batches\n";
    return 0;
  }
  const auto out_path = output_path(out);
  write_atomically(out_path, [&](std::ostream& os) {
    for (smar::Index b = 0; b < report.batches.size(); ++b) {
      smar::StepMetrics m;
      m.step = b;
      m.layers = report.batches[b];
      os << smar::metrics_to_json(m, "eval") << '\n';
    }
  });
  std::cout << "accuracy " << report.accuracy << '\n';
  const auto means = report.mean_d_by_layer();
  for (smar::Index l = 0; l < means.size(); ++l) {
    std::cout << "layer " << l << " mean d " << means[l] << '\n';
  }
  std::cout << "eval log: " << out_path << '\n';
  return 0;
}

int run_analyze(const std::string& metrics, const std::string& out, double threshold) {
  const auto log = smar::read_routing_log(metrics);
  const auto dir = output_path(out);
  smar::write_report(dir, log, threshold);
  std::cout << "report: " << dir << '\n';
  return 0;
}

int run_gen_data(const std::string& config, const std::vector<std::string>& sets,
                 std::uint64_t start, std::uint64_t count, const std::string& out) {
  const auto cfg = load_config(config, sets);
  const smar::SynthGenerator gen(cfg.synth_config());
  const auto path = output_path(out);
  write_atomically(path, [&](std::ostream& os) {
    for (std::uint64_t s = start; s < start + count; ++s) {
      smar::write_batch_jsonl(os, gen.batch(s), cfg.seed, s);
    }
  });
  std::cout << "batches: " << path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modality-aware MoE routing lab"};
  app.require_subcommand(1);

  std::string config = "default";
  std::vector<std::string> sets;
  std::string checkpoint = "checkpoint.json";
  std::string metrics = "metrics.jsonl";

  auto* train = app.add_subcommand("train", "Train a toy MoE model");
  train->add_option("--config", config, "Config file, or 'default'");
  train->add_option("--set", sets, "Override a config key (key=value)");
  train->add_option("--checkpoint", checkpoint, "Checkpoint output path");
  train->add_option("--metrics", metrics, "Metrics JSONL output path");

  long batches = -1;
  std::string eval_out = "eval.jsonl";
  auto* eval = app.add_subcommand("eval", "Evaluate routing statistics of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to load")->required();
  eval->add_option("--batches", batches, "Evaluation batches (default: eval_batches)");
  eval->add_option("--out", eval_out, "Per-batch routing JSONL output path");

  std::string report_dir = "report";
  double threshold = smar::kDefaultCollapseThreshold;
  auto* analyze = app.add_subcommand("analyze", "Write routing diagnostics as CSV");
  analyze->add_option("--metrics", metrics, "Metrics or eval JSONL")->required();
  analyze->add_option("--out", report_dir, "Output directory");
  analyze->add_option("--collapse-threshold", threshold, "Max-load collapse threshold");

  std::uint64_t start = 0;
  std::uint64_t count = 1;
  std::string data_out = "batches.jsonl";
  auto* gen = app.add_subcommand("gen-data", "Dump synthetic batches as JSONL");
  gen->add_option("--config", config, "Config file, or 'default'");
  gen->add_option("--set", sets, "Override a config key (key=value)");
  gen->add_option("--start", start, "First batch step");
  gen->add_option("--count", count, "Number of batches");
  gen->add_option("--out", data_out, "Output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return run_train(config, sets, checkpoint, metrics);
    if (eval->parsed()) return run_eval(checkpoint, batches, eval_out);
    if (analyze->parsed()) return run_analyze(metrics, report_dir, threshold);
    if (gen->parsed()) return run_gen_data(config, sets, start, count, data_out);
  } catch (const smar::TrainingAborted& e) {
    std::cerr << "error: training aborted: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
