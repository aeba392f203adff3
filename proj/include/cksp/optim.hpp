#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cksp/model.hpp"

namespace cksp {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ParamRef {
  std::string path;
  Tensor* tensor = nullptr;
  bool decay = false;
};

/// First and second moment estimates, one buffer per parameter tensor.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

inline std::vector<ParamRef> parameter_groups(CkspModel& model) {
  std::vector<ParamRef> out;
  model.visit_parameters([&](const std::string& path, Tensor& t, ParamKind kind) {
    out.push_back({path, &t, decays(kind)});
  });
  return out;
}

/// One Adam update using the gradients stored on each tensor. L2 decay is
/// coupled: weight_decay * w is added to the gradient of decayed tensors,
/// matching a (weight_decay / 2) * ||w||^2 term in the loss.
inline void adam_step(const std::vector<ParamRef>& params, AdamState& state, double lr, double weight_decay,
                      const AdamConfig& cfg = {}) {
  if (state.m.empty() && state.step == 0) {
    for (const ParamRef& p : params) {
      state.m.emplace_back(p.tensor->numel(), 0.0);
      state.v.emplace_back(p.tensor->numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor->numel() || !params[i].tensor->has_grad()) {
      throw std::invalid_argument("adam_step: state/gradient mismatch for '" + params[i].path + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].tensor;
    auto g = w.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double wd = params[i].decay ? weight_decay : 0.0;
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const double gj = g[j] + wd * w[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

/// lr0 * factor^floor(epoch / every), epochs counted from 0.
inline double step_decay_lr(double lr0, std::size_t epoch, double factor = 0.1, std::size_t every = 20) {
  if (every == 0) throw std::invalid_argument("learning-rate step must be positive");
  return lr0 * std::pow(factor, static_cast<double>(epoch / every));
}

}  // namespace cksp
