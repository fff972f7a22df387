#pragma once

// Reference MoE forward pass on plain matrices. Every expert runs on every
// token and is masked by the renormalized top-K weights.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "smar/model.hpp"
#include "support/oracles.hpp"

namespace smar::testing {

inline std::map<std::string, Matrix> values(const MoeModel& m) {
  std::map<std::string, Matrix> out;
  for (const auto& p : m.state()) out[p.name] = p.tensor.value();
  return out;
}

inline Matrix dense_forward(const MoeModel& model, const FeatureBatch& b) {
  auto v = values(model);
  const auto& d = model.dims();
  const auto n = static_cast<Eigen::Index>(b.size());
  Matrix h(n, static_cast<Eigen::Index>(d.hidden));
  Eigen::Index iv = 0, it = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (b.modality[static_cast<Index>(i)] == Modality::kVision) {
      h.row(i) = b.vision.row(iv++) * v["proj.vision"];
    } else {
      h.row(i) = b.text.row(it++) * v["proj.text"];
    }
  }
  for (Index l = 0; l < d.layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    const Matrix& gate = v[pre + "router.gate"];
    Matrix next = h;
    for (Eigen::Index i = 0; i < n; ++i) {
      Matrix logit = h.row(i) * gate;
      if (d.modality_bias) {
        logit += b.modality[static_cast<Index>(i)] == Modality::kVision
                     ? v[pre + "router.bias_vision"]
                     : v[pre + "router.bias_text"];
      }
      const double mx = logit.maxCoeff();
      std::vector<double> p(static_cast<std::size_t>(d.experts));
      double z = 0.0;
      for (Index e = 0; e < d.experts; ++e) z += std::exp(logit(0, static_cast<Eigen::Index>(e)) - mx);
      for (Index e = 0; e < d.experts; ++e) {
        p[e] = std::exp(logit(0, static_cast<Eigen::Index>(e)) - mx) / z;
      }
      const auto chosen = sort_top_k(p, d.top_k);
      double s = 0.0;
      for (Index e : chosen) s += p[e];
      for (Index e = 0; e < d.experts; ++e) {
        const bool on = std::find(chosen.begin(), chosen.end(), e) != chosen.end();
        const double w = on ? p[e] / s : 0.0;
        const std::string ex = pre + "experts." + std::to_string(e) + ".";
        const Matrix hid = (h.row(i) * v[ex + "w1"]).cwiseMax(0.0);
        next.row(i) += w * (hid * v[ex + "w2"]);
      }
    }
    h = next;
  }
  return h * v["head"];
}

}  // namespace smar::testing
