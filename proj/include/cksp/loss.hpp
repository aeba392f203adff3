#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cksp/ops.hpp"

namespace cksp {

struct LossConfig {
  double focal_gamma = 2.0;
  double cb_beta = 0.999;
  bool normalize_weights = true;  // rescale so weights sum to k

  void validate() const {
    if (!(focal_gamma >= 0.0)) throw std::invalid_argument("focal gamma must be non-negative");
    if (!(cb_beta >= 0.0 && cb_beta < 1.0)) throw std::invalid_argument("class-balance beta must be in [0,1)");
  }
};

/// Effective-number class weights (1 - beta) / (1 - beta^n). Empty classes
/// are treated as having one sample so the weight stays finite.
inline std::vector<double> class_balanced_weights(const std::vector<std::size_t>& counts, double beta,
                                                  bool normalize = true) {
  if (counts.empty()) throw std::invalid_argument("class_balanced_weights: no classes");
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("class-balance beta must be in [0,1)");
  std::vector<double> w(counts.size());
  double total = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double n = static_cast<double>(std::max<std::size_t>(counts[c], 1));
    w[c] = (1.0 - beta) / (1.0 - std::pow(beta, n));
    total += w[c];
  }
  if (normalize) {
    for (double& v : w) v *= static_cast<double>(counts.size()) / total;
  }
  return w;
}

/// Mean over rows of w[y] * (1 - p_y)^gamma * (-log p_y).
inline Var cb_focal_loss(const Var& logits, const std::vector<std::size_t>& labels, const std::vector<double>& weights,
                         double gamma) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("cb_focal_loss: logits must be [b,k], got " + shape_str(s));
  if (labels.size() != s[0]) throw ShapeError("cb_focal_loss: one label per row required");
  if (weights.size() != s[1]) throw ShapeError("cb_focal_loss: one weight per class required");
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal gamma must be non-negative");
  Tensor row_weights({s[0]});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= s[1]) {
      throw std::out_of_range("label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(s[1]) + ")");
    }
    row_weights[i] = -weights[labels[i]] / static_cast<double>(s[0]);
  }
  Tape& tape = logits.tape();
  Var log_p = ops::gather_rows(ops::log_softmax(logits), labels);
  Var per_row = log_p;
  if (gamma != 0.0) per_row = ops::mul(ops::pow(ops::affine(ops::exp(log_p), -1.0, 1.0), gamma), log_p);
  return ops::sum(ops::mul(per_row, tape.constant(std::move(row_weights))));
}

/// Plain average of one loss per species.
inline Var total_loss(const std::map<std::size_t, Var>& per_species, std::size_t num_species) {
  if (num_species == 0) throw std::invalid_argument("total_loss: no species");
  for (std::size_t s = 0; s < num_species; ++s) {
    if (!per_species.contains(s)) throw std::invalid_argument("total_loss: missing loss for species " + std::to_string(s));
  }
  if (per_species.size() != num_species) throw std::invalid_argument("total_loss: unexpected species in loss map");
  auto it = per_species.begin();
  Var sum = it->second;
  for (++it; it != per_species.end(); ++it) sum = ops::add(sum, it->second);
  return ops::scale(sum, 1.0 / static_cast<double>(num_species));
}

}  // namespace cksp
