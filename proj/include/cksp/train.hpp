#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cksp/batching.hpp"
#include "cksp/loss.hpp"
#include "cksp/metrics.hpp"
#include "cksp/model.hpp"
#include "cksp/optim.hpp"

namespace cksp {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 0;  // 0 selects the largest multiple of the species count not above 256
  double lr0 = 1e-4;
  double lr_decay = 0.1;
  std::size_t lr_step = 20;
  double weight_decay = 0.06;
  std::uint64_t seed = 0;
  double data_fraction = 1.0;
  bool equalize = true;
  LossConfig loss;
  AdamConfig adam;
  std::size_t eval_chunk = 512;

  std::size_t resolved_batch_size(std::size_t species) const {
    return batch_size == 0 ? BatchStream::default_batch_size(species, 256) : batch_size;
  }

  void validate() const {
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    if (!(lr0 > 0.0)) throw std::invalid_argument("lr0 must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("lr_decay must be in (0,1]");
    if (lr_step == 0) throw std::invalid_argument("lr_step must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw std::invalid_argument("data_fraction must be in (0,1]");
    if (eval_chunk == 0) throw std::invalid_argument("eval_chunk must be positive");
    loss.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr0", c.lr0},
                     {"lr_decay", c.lr_decay},
                     {"lr_step", c.lr_step},
                     {"weight_decay", c.weight_decay},
                     {"seed", c.seed},
                     {"data_fraction", c.data_fraction},
                     {"equalize", c.equalize},
                     {"focal_gamma", c.loss.focal_gamma},
                     {"cb_beta", c.loss.cb_beta},
                     {"normalize_class_weights", c.loss.normalize_weights},
                     {"adam_beta1", c.adam.beta1},
                     {"adam_beta2", c.adam.beta2},
                     {"adam_eps", c.adam.eps},
                     {"eval_chunk", c.eval_chunk}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("lr0", c.lr0);
  get("lr_decay", c.lr_decay);
  get("lr_step", c.lr_step);
  get("weight_decay", c.weight_decay);
  get("seed", c.seed);
  get("data_fraction", c.data_fraction);
  get("equalize", c.equalize);
  get("focal_gamma", c.loss.focal_gamma);
  get("cb_beta", c.loss.cb_beta);
  get("normalize_class_weights", c.loss.normalize_weights);
  get("adam_beta1", c.adam.beta1);
  get("adam_beta2", c.adam.beta2);
  get("adam_eps", c.adam.eps);
  get("eval_chunk", c.eval_chunk);
}

struct CurvePoint {
  std::size_t epoch = 0;
  std::size_t species = 0;  // model species index
  std::string split;        // "train" or "val"
  double accuracy = 0.0;
  double loss = 0.0;
};

inline std::string curves_csv(const std::vector<CurvePoint>& curves, const std::vector<std::string>& species_names = {}) {
  std::string out = "epoch,species,split,accuracy,loss\n";
  for (const auto& p : curves) {
    const std::string sp = p.species < species_names.size() ? species_names[p.species] : std::to_string(p.species);
    nlohmann::json acc = p.accuracy, loss = p.loss;
    out += std::to_string(p.epoch) + "," + sp + "," + p.split + "," + acc.dump() + "," + loss.dump() + "\n";
  }
  return out;
}

/// Which rows of a WindowSet a model species trains and validates on.
struct SpeciesData {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_train_accuracy = 0.0;
  double mean_val_accuracy = 0.0;
  bool improved = false;
};

struct TrainResult {
  CkspModel best;
  std::size_t best_epoch = 0;
  double best_val_accuracy = -1.0;
  std::vector<CurvePoint> curves;
  std::vector<std::vector<double>> class_weights;    // per model species
  std::vector<std::vector<std::size_t>> train_pools;  // after equalization
  std::size_t steps = 0;
};

/// Input batch [n,3,1,L] for the listed windows, in order.
inline Tensor gather_inputs(const WindowSet& data, const std::vector<std::size_t>& rows) {
  std::vector<const SampleWindow*> ptrs;
  ptrs.reserve(rows.size());
  for (std::size_t r : rows) ptrs.push_back(&data.windows.at(r));
  return stack_windows(ptrs);
}

struct SpeciesEvaluation {
  std::vector<std::size_t> truth;
  std::vector<std::size_t> predicted;
  double loss = 0.0;  // mean class-balanced focal loss
  double accuracy = 0.0;
};

/// Inference-mode predictions for windows routed through model species `s`.
inline SpeciesEvaluation evaluate_species(CkspModel& model, const WindowSet& data, const std::vector<std::size_t>& rows,
                                          std::size_t s, const std::vector<double>& weights, double focal_gamma,
                                          std::size_t chunk = 512) {
  SpeciesEvaluation ev;
  if (rows.empty()) return ev;
  const std::size_t k = model.config().classes_per_species.at(s);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::size_t end = std::min(rows.size(), start + chunk);
    std::vector<std::size_t> part(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                  rows.begin() + static_cast<std::ptrdiff_t>(end));
    Tape tape;
    ForwardOutput out = model.forward(tape, tape.constant(gather_inputs(data, part)), {{s, 0, part.size()}},
                                      Mode::Inference);
    const Tensor& logits = out.logits.front().value();
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < part.size(); ++i) {
      const std::size_t label = data.windows[part[i]].label;
      const double* row = &logits.data()[i * k];
      const std::size_t pred = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      ev.truth.push_back(label);
      ev.predicted.push_back(pred);
      labels.push_back(label);
      if (pred == label) ++correct;
    }
    loss_sum += cb_focal_loss(out.logits.front(), labels, weights, focal_gamma).value().item() *
                static_cast<double>(part.size());
  }
  ev.loss = loss_sum / static_cast<double>(rows.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(rows.size());
  return ev;
}

namespace detail {

inline std::string first_non_finite(CkspModel& model) {
  std::string found;
  model.visit_parameters([&](const std::string& path, Tensor& t, ParamKind) {
    if (found.empty() && !t.is_finite()) found = path + " (value)";
  });
  model.visit_parameters([&](const std::string& path, Tensor& t, ParamKind) {
    if (!found.empty()) return;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) {
        found = path + " (gradient)";
        return;
      }
    }
  });
  return found.empty() ? "loss" : found;
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochSummary&)>;

/// Train `model` (modified in place) and return the snapshot with the best
/// mean per-species validation accuracy. `species[s]` lists the rows that
/// model species s trains and validates on.
inline TrainResult train(CkspModel& model, const WindowSet& data, const std::vector<SpeciesData>& species,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const std::size_t S = model.num_species();
  if (species.size() != S) throw std::invalid_argument("train: need training data for every model species");
  std::vector<std::vector<std::size_t>> pools;
  for (const auto& sd : species) pools.push_back(sd.train);
  const LabelOf label_of = labels_of(data);
  for (std::size_t s = 0; s < S; ++s) {
    if (pools[s].empty()) throw std::invalid_argument("train: species " + std::to_string(s) + " has no training data");
    for (std::size_t r : pools[s]) {
      if (data.windows.at(r).label >= model.config().classes_per_species[s]) {
        throw std::invalid_argument("train: window label exceeds the head size of species " + std::to_string(s));
      }
    }
  }
  if (cfg.equalize && S > 1) pools = equalize_species(pools, label_of, mix_seed(cfg.seed, 7));

  TrainResult result{model, 0, -1.0, {}, {}, pools, 0};
  for (std::size_t s = 0; s < S; ++s) {
    std::vector<std::size_t> counts(model.config().classes_per_species[s], 0);
    for (std::size_t r : pools[s]) ++counts[data.windows[r].label];
    result.class_weights.push_back(class_balanced_weights(counts, cfg.loss.cb_beta, cfg.loss.normalize_weights));
  }

  const std::size_t batch_size = cfg.resolved_batch_size(S);
  BatchStream stream(pools, batch_size, mix_seed(cfg.seed, 13));
  if (stream.batches_per_epoch() == 0) {
    throw std::invalid_argument("train: the smallest species pool is smaller than one sub-batch of " +
                                std::to_string(stream.per_species()));
  }
  const auto params = parameter_groups(model);
  AdamState opt;
  const double gamma = cfg.loss.focal_gamma;
  double best_score = -1.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = step_decay_lr(cfg.lr0, epoch, cfg.lr_decay, cfg.lr_step);
    std::vector<double> loss_sum(S, 0.0);
    std::vector<std::size_t> correct(S, 0), seen(S, 0);
    const auto batches = stream.epoch(epoch);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<std::size_t> rows;
      std::vector<Segment> segments;
      for (std::size_t s = 0; s < S; ++s) {
        const auto& sub = batches[b].per_species[s];
        segments.push_back({s, rows.size(), rows.size() + sub.size()});
        rows.insert(rows.end(), sub.begin(), sub.end());
      }
      Tape tape;
      ForwardOutput out = model.forward(tape, tape.constant(gather_inputs(data, rows)), segments, Mode::Training);
      std::map<std::size_t, Var> losses;
      for (std::size_t s = 0; s < S; ++s) {
        const auto& sub = batches[b].per_species[s];
        std::vector<std::size_t> labels;
        for (std::size_t r : sub) labels.push_back(data.windows[r].label);
        Var ls = cb_focal_loss(out.logits[s], labels, result.class_weights[s], gamma);
        losses.emplace(s, ls);
        loss_sum[s] += ls.value().item() * static_cast<double>(sub.size());
        const Tensor& lg = out.logits[s].value();
        const std::size_t k = lg.dim(1);
        for (std::size_t i = 0; i < sub.size(); ++i) {
          const double* row = &lg.data()[i * k];
          if (static_cast<std::size_t>(std::max_element(row, row + k) - row) == labels[i]) ++correct[s];
        }
        seen[s] += sub.size();
      }
      Var total = total_loss(losses, S);
      model.zero_grad();
      tape.backward(total);
      const std::string before = detail::first_non_finite(model);
      if (!std::isfinite(total.value().item()) || before != "loss") {
        throw TrainingError("non-finite loss or gradient at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b) + "; first offending tensor: " + before);
      }
      adam_step(params, opt, lr, cfg.weight_decay, cfg.adam);
      ++result.steps;
      const std::string bad = detail::first_non_finite(model);
      if (bad != "loss") {
        throw TrainingError("non-finite parameter after update at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b) + ": " + bad);
      }
    }

    EpochSummary summary;
    summary.epoch = epoch;
    summary.lr = lr;
    bool has_val = false;
    for (std::size_t s = 0; s < S; ++s) {
      const double train_acc = seen[s] ? static_cast<double>(correct[s]) / static_cast<double>(seen[s]) : 0.0;
      const double train_loss = seen[s] ? loss_sum[s] / static_cast<double>(seen[s]) : 0.0;
      result.curves.push_back({epoch, s, "train", train_acc, train_loss});
      summary.mean_train_accuracy += train_acc / static_cast<double>(S);
      if (!species[s].val.empty()) {
        has_val = true;
        const auto ev = evaluate_species(model, data, species[s].val, s, result.class_weights[s], gamma, cfg.eval_chunk);
        result.curves.push_back({epoch, s, "val", ev.accuracy, ev.loss});
        summary.mean_val_accuracy += ev.accuracy / static_cast<double>(S);
      }
    }
    // without validation data the last epoch wins
    const double score = has_val ? summary.mean_val_accuracy : static_cast<double>(epoch);
    if (score > best_score) {
      best_score = score;
      result.best_val_accuracy = has_val ? summary.mean_val_accuracy : 0.0;
      result.best_epoch = epoch;
      result.best = model;
      summary.improved = true;
    }
    if (on_epoch) on_epoch(summary);
  }
  return result;
}

}  // namespace cksp
