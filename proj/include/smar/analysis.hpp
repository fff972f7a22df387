#pragma once

// Post-hoc routing diagnostics computed from logged per-layer routing
// summaries: distance curves, expert modality preference, and collapse.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "smar/trainer.hpp"

namespace smar {

/// records[r][l] is layer l of record r (one record per logged step or
/// evaluation batch).
using RoutingLog = std::vector<std::vector<LayerRouting>>;

RoutingLog read_routing_log(const std::string& jsonl_path);

struct MrdCurve {
  Index layer = 0;
  double d_min = 0.0;
  double d_mean = 0.0;
  double d_max = 0.0;
  Index samples = 0;
};

/// Min/mean/max of the recorded distances per layer. Layers without any
/// defined distance are omitted; an empty result means no data.
std::vector<MrdCurve> mrd_curves(const RoutingLog& log);

struct ExpertPreference {
  Index layer = 0;
  /// Fraction of the modality's selections that went to each expert;
  /// nullopt when the modality never appears in the log.
  std::optional<std::vector<double>> vision_share;
  std::optional<std::vector<double>> text_share;

  bool partial() const { return !vision_share || !text_share; }
};

std::vector<ExpertPreference> expert_preference(const RoutingLog& log);

struct LayerCollapse {
  Index layer = 0;
  /// Largest fraction of tokens that selected a single expert.
  double max_load = 0.0;
  /// Shannon entropy (nats) of the aggregate selection distribution.
  double entropy = 0.0;
  bool collapsed = false;
};

struct CollapseReport {
  double threshold = 0.0;
  std::vector<LayerCollapse> layers;
  std::vector<Index> collapsed_layers;

  double mean_entropy() const;
};

inline constexpr double kDefaultCollapseThreshold = 0.6;

CollapseReport detect_collapse(const RoutingLog& log,
                               double load_threshold = kDefaultCollapseThreshold);

void write_mrd_curves_csv(std::ostream& os, const std::vector<MrdCurve>& curves);
void write_expert_pref_csv(std::ostream& os, const std::vector<ExpertPreference>& prefs);
void write_collapse_csv(std::ostream& os, const CollapseReport& report);

/// Writes mrd_curves.csv, expert_pref.csv and collapse.csv into `out_dir`.
void write_report(const std::string& out_dir, const RoutingLog& log, double load_threshold);

}  // namespace smar
