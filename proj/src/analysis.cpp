#include "smar/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>

namespace smar {

namespace {

Index layer_count(const RoutingLog& log) {
  Index n = 0;
  for (const auto& rec : log) {
    for (const auto& r : rec) n = std::max(n, r.layer + 1);
  }
  return n;
}

// Sums selection counts of one layer across all records.
struct LayerTotals {
  std::vector<double> vision;
  std::vector<double> text;
  Index tokens_vision = 0;
  Index tokens_text = 0;
};

std::vector<LayerTotals> totals(const RoutingLog& log) {
  std::vector<LayerTotals> out(layer_count(log));
  for (const auto& rec : log) {
    for (const auto& r : rec) {
      auto& t = out[r.layer];
      const Index experts = std::max(r.selections_vision.size(), r.selections_text.size());
      if (t.vision.size() < experts) {
        t.vision.resize(experts, 0.0);
        t.text.resize(experts, 0.0);
      }
      for (Index e = 0; e < r.selections_vision.size(); ++e) t.vision[e] += r.selections_vision[e];
      for (Index e = 0; e < r.selections_text.size(); ++e) t.text[e] += r.selections_text[e];
      t.tokens_vision += r.tokens_vision;
      t.tokens_text += r.tokens_text;
    }
  }
  return out;
}

std::optional<std::vector<double>> normalized(const std::vector<double>& counts) {
  double total = 0.0;
  for (double c : counts) total += c;
  if (total <= 0.0) return std::nullopt;
  std::vector<double> out(counts.size());
  for (Index e = 0; e < counts.size(); ++e) out[e] = counts[e] / total;
  return out;
}

}  // namespace

std::vector<MrdCurve> mrd_curves(const RoutingLog& log) {
  std::vector<MrdCurve> out;
  const Index layers = layer_count(log);
  for (Index l = 0; l < layers; ++l) {
    MrdCurve c;
    c.layer = l;
    c.d_min = std::numeric_limits<double>::infinity();
    c.d_max = -std::numeric_limits<double>::infinity();
    double acc = 0.0;
    for (const auto& rec : log) {
      for (const auto& r : rec) {
        if (r.layer != l || !r.d_sym_kl) continue;
        c.d_min = std::min(c.d_min, *r.d_sym_kl);
        c.d_max = std::max(c.d_max, *r.d_sym_kl);
        acc += *r.d_sym_kl;
        ++c.samples;
      }
    }
    if (c.samples == 0) continue;
    c.d_mean = std::clamp(acc / static_cast<double>(c.samples), c.d_min, c.d_max);
    out.push_back(c);
  }
  return out;
}

std::vector<ExpertPreference> expert_preference(const RoutingLog& log) {
  std::vector<ExpertPreference> out;
  const auto t = totals(log);
  for (Index l = 0; l < t.size(); ++l) {
    ExpertPreference p;
    p.layer = l;
    p.vision_share = normalized(t[l].vision);
    p.text_share = normalized(t[l].text);
    out.push_back(std::move(p));
  }
  return out;
}

double CollapseReport::mean_entropy() const {
  if (layers.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& l : layers) acc += l.entropy;
  return acc / static_cast<double>(layers.size());
}

CollapseReport detect_collapse(const RoutingLog& log, double load_threshold) {
  CollapseReport report;
  report.threshold = load_threshold;
  const auto t = totals(log);
  for (Index l = 0; l < t.size(); ++l) {
    const Index experts = t[l].vision.size();
    if (experts > 0 && !(load_threshold > 1.0 / static_cast<double>(experts) &&
                         load_threshold <= 1.0)) {
      throw ParameterError("detect_collapse: threshold must lie in (1/E, 1]");
    }
    const double tokens = static_cast<double>(t[l].tokens_vision + t[l].tokens_text);
    double selections = 0.0;
    double peak = 0.0;
    for (Index e = 0; e < experts; ++e) {
      const double c = t[l].vision[e] + t[l].text[e];
      selections += c;
      peak = std::max(peak, c);
    }
    LayerCollapse lc;
    lc.layer = l;
    if (tokens > 0.0) lc.max_load = peak / tokens;
    for (Index e = 0; e < experts && selections > 0.0; ++e) {
      const double p = (t[l].vision[e] + t[l].text[e]) / selections;
      if (p > 0.0) lc.entropy -= p * std::log(p);
    }
    lc.collapsed = lc.max_load > load_threshold;
    if (lc.collapsed) report.collapsed_layers.push_back(l);
    report.layers.push_back(lc);
  }
  return report;
}

namespace {

void write_double(std::ostream& os, double v) {
  const auto old = os.precision(17);
  os << v;
  os.precision(old);
}

}  // namespace

void write_mrd_curves_csv(std::ostream& os, const std::vector<MrdCurve>& curves) {
  os << "layer,d_min,d_mean,d_max\n";
  for (const auto& c : curves) {
    os << c.layer << ',';
    write_double(os, c.d_min);
    os << ',';
    write_double(os, c.d_mean);
    os << ',';
    write_double(os, c.d_max);
    os << '\n';
  }
}

void write_expert_pref_csv(std::ostream& os, const std::vector<ExpertPreference>& prefs) {
  os << "layer,expert,vision_share,text_share\n";
  for (const auto& p : prefs) {
    const Index experts = std::max(p.vision_share ? p.vision_share->size() : 0,
                                   p.text_share ? p.text_share->size() : 0);
    for (Index e = 0; e < experts; ++e) {
      os << p.layer << ',' << e << ',';
      // A missing modality is written as an empty field.
      if (p.vision_share) write_double(os, (*p.vision_share)[e]);
      os << ',';
      if (p.text_share) write_double(os, (*p.text_share)[e]);
      os << '\n';
    }
  }
}

void write_collapse_csv(std::ostream& os, const CollapseReport& report) {
  os << "layer,max_load,entropy,flag\n";
  for (const auto& l : report.layers) {
    os << l.layer << ',';
    write_double(os, l.max_load);
    os << ',';
    write_double(os, l.entropy);
    os << ',' << (l.collapsed ? 1 : 0) << '\n';
  }
}

void write_report(const std::string& out_dir, const RoutingLog& log, double load_threshold) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw ConfigError("cannot create report directory " + out_dir + ": " + ec.message());
  auto open = [&](const char* name) {
    std::ofstream os(fs::path(out_dir) / name);
    if (!os) throw ConfigError(std::string("cannot write ") + name + " in " + out_dir);
    return os;
  };
  {
    auto os = open("mrd_curves.csv");
    write_mrd_curves_csv(os, mrd_curves(log));
  }
  {
    auto os = open("expert_pref.csv");
    write_expert_pref_csv(os, expert_preference(log));
  }
  {
    auto os = open("collapse.csv");
    write_collapse_csv(os, detect_collapse(log, load_threshold));
  }
}

RoutingLog read_routing_log(const std::string& jsonl_path) {
  std::ifstream is(jsonl_path);
  if (!is) throw ConfigError("cannot read metrics log " + jsonl_path);
  RoutingLog log;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    log.push_back(metrics_from_json(line).layers);
  }
  return log;
}

}  // namespace smar
