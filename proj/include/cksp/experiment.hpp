#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cksp/folds.hpp"
#include "cksp/metrics.hpp"
#include "cksp/model.hpp"
#include "cksp/train.hpp"

namespace cksp {

/// How a run maps data onto models: one joint model over all species, or
/// an independent single-species model per species.
enum class RunKind { Joint, SingleNet };

struct ExperimentConfig {
  ModelConfig model;  // classes_per_species is filled from the data
  TrainConfig train;
  RunKind kind = RunKind::Joint;
  std::optional<std::size_t> only_species;  // SingleNet: restrict to one species
  std::size_t folds = 5;
  std::optional<std::uint64_t> fold_seed;  // defaults to train.seed
  bool standardize = true;
  Averaging averaging = Averaging::Macro;

  std::uint64_t resolved_fold_seed() const { return fold_seed.value_or(train.seed); }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"train", c.train},
                     {"kind", c.kind == RunKind::Joint ? "joint" : "single_net"},
                     {"folds", c.folds},
                     {"standardize", c.standardize},
                     {"averaging", c.averaging == Averaging::Macro ? "macro" : "weighted"}};
  j["only_species"] = c.only_species ? nlohmann::json(*c.only_species) : nlohmann::json(nullptr);
  j["fold_seed"] = c.fold_seed ? nlohmann::json(*c.fold_seed) : nlohmann::json(nullptr);
}

/// Sections and keys may be omitted; absent values keep their defaults.
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
  static const std::set<std::string> known{"model", "train", "kind", "folds", "standardize",
                                           "averaging", "only_species", "fold_seed", "rotations"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("unknown experiment config key '" + key + "'");
  }
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("kind")) {
    const auto k = j.at("kind").get<std::string>();
    if (k == "joint") c.kind = RunKind::Joint;
    else if (k == "single_net") c.kind = RunKind::SingleNet;
    else throw std::invalid_argument("unknown run kind '" + k + "' (expected joint|single_net)");
  }
  if (j.contains("folds")) j.at("folds").get_to(c.folds);
  if (j.contains("standardize")) j.at("standardize").get_to(c.standardize);
  if (j.contains("averaging")) {
    const auto a = j.at("averaging").get<std::string>();
    if (a == "macro") c.averaging = Averaging::Macro;
    else if (a == "weighted") c.averaging = Averaging::Weighted;
    else throw std::invalid_argument("unknown averaging '" + a + "' (expected macro|weighted)");
  }
  if (j.contains("only_species") && !j.at("only_species").is_null()) c.only_species = j.at("only_species").get<std::size_t>();
  if (j.contains("fold_seed") && !j.at("fold_seed").is_null()) c.fold_seed = j.at("fold_seed").get<std::uint64_t>();
}

/// Test-set result of one trained model for one dataset species.
struct SpeciesResult {
  std::size_t species = 0;  // dataset species id
  Metrics test;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
};

struct RotationResult {
  std::size_t rotation = 0;
  std::vector<SpeciesResult> species;
  std::vector<TrainResult> runs;  // one per trained model
  std::vector<std::vector<std::size_t>> model_species;  // dataset species served by each run
  std::vector<Standardizer> standardizers;               // one per run
};

struct SpeciesAggregate {
  std::size_t species = 0;
  MeanStd accuracy, precision, recall, f1;
  ConfusionMatrix confusion;  // summed over rotations
};

struct CvReport {
  std::vector<RotationResult> rotations;
  std::vector<SpeciesAggregate> aggregate;
};

/// Copy of the dataset with `st` applied to every window.
inline WindowSet standardized_copy(const WindowSet& data, const Standardizer& st) {
  WindowSet out;
  out.species = data.species;
  out.windows.reserve(data.windows.size());
  for (const SampleWindow& w : data.windows) {
    SampleWindow c = w;
    c.data = st.apply(w.data);
    out.windows.push_back(std::move(c));
  }
  return out;
}

inline std::vector<std::size_t> rows_of_species(const WindowSet& data, const std::vector<std::size_t>& rows, std::size_t s) {
  std::vector<std::size_t> out;
  for (std::size_t r : rows) {
    if (data.windows.at(r).species_id == s) out.push_back(r);
  }
  return out;
}

/// Train and test on one fold rotation of `split`.
inline RotationResult run_split(const WindowSet& data, const Split& split, std::size_t rotation, const ExperimentConfig& cfg,
                                const EpochCallback& on_epoch = {}) {
  const std::size_t S_data = data.species.size();
  if (S_data == 0) throw std::invalid_argument("dataset has no species");
  const std::vector<std::size_t> train_rows =
      scarcity_view(data, split.train, cfg.train.data_fraction, mix_seed(cfg.train.seed, 17));

  std::vector<std::vector<std::size_t>> groups;
  if (cfg.kind == RunKind::Joint) {
    std::vector<std::size_t> all(S_data);
    for (std::size_t s = 0; s < S_data; ++s) all[s] = s;
    groups.push_back(all);
  } else if (cfg.only_species) {
    if (*cfg.only_species >= S_data) throw std::out_of_range("unknown species id " + std::to_string(*cfg.only_species));
    groups.push_back({*cfg.only_species});
  } else {
    for (std::size_t s = 0; s < S_data; ++s) groups.push_back({s});
  }
  const std::size_t joint_batch = cfg.train.resolved_batch_size(S_data);
  if (joint_batch % S_data != 0) {
    throw std::invalid_argument("batch size " + std::to_string(joint_batch) + " is not divisible by the species count " +
                                std::to_string(S_data) + "; use " +
                                std::to_string(BatchStream::default_batch_size(S_data, joint_batch)));
  }
  const std::size_t joint_per_species = joint_batch / S_data;

  RotationResult result;
  result.rotation = rotation;
  for (const auto& group : groups) {
    std::vector<std::size_t> group_train;
    std::vector<SpeciesData> sd;
    for (std::size_t s : group) {
      SpeciesData d{rows_of_species(data, train_rows, s), rows_of_species(data, split.val, s)};
      if (d.train.empty()) throw std::invalid_argument("species '" + data.species[s].name + "' has no training windows");
      group_train.insert(group_train.end(), d.train.begin(), d.train.end());
      sd.push_back(std::move(d));
    }
    Standardizer st;
    if (cfg.standardize) st = Standardizer::fit(data, group_train);
    const WindowSet prepared = cfg.standardize ? standardized_copy(data, st) : data;

    ModelConfig mc = cfg.model;
    mc.classes_per_species.clear();
    for (std::size_t s : group) mc.classes_per_species.push_back(data.species[s].num_classes());
    mc.input_length = data.windows.empty() ? mc.input_length : data.windows.front().data.dim(2);
    mc.seed = mix_seed(cfg.train.seed, rotation, 3);
    if (cfg.kind == RunKind::SingleNet) {
      mc.use_spconv = false;
      mc.use_sbn = false;
    }
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(cfg.train.seed, rotation, 5);
    // Single-species models use the joint model's per-species sub-batch; any
    // sub-batch is shrunk so the smallest pool still yields one batch.
    const std::size_t per_species =
        cfg.kind == RunKind::SingleNet ? joint_per_species : tc.resolved_batch_size(group.size()) / group.size();
    std::size_t smallest = sd.front().train.size();
    for (const auto& d : sd) smallest = std::min(smallest, d.train.size());
    tc.batch_size = std::max<std::size_t>(2, std::min(per_species, smallest)) * group.size();

    CkspModel model(mc);
    TrainResult tr = train(model, prepared, sd, tc, on_epoch);
    for (std::size_t m = 0; m < group.size(); ++m) {
      const std::size_t s = group[m];
      const auto test_rows = rows_of_species(data, split.test, s);
      SpeciesResult sr;
      sr.species = s;
      sr.best_epoch = tr.best_epoch;
      sr.best_val_accuracy = tr.best_val_accuracy;
      if (!test_rows.empty()) {
        const auto ev = evaluate_species(tr.best, prepared, test_rows, m, tr.class_weights[m],
                                         tc.loss.focal_gamma, tc.eval_chunk);
        sr.test = compute_metrics(ev.truth, ev.predicted, data.species[s].num_classes(), cfg.averaging);
      } else {
        sr.test = metrics_from_confusion(ConfusionMatrix(data.species[s].num_classes()), cfg.averaging);
      }
      result.species.push_back(std::move(sr));
    }
    result.runs.push_back(std::move(tr));
    result.model_species.push_back(group);
    result.standardizers.push_back(st);
  }
  std::sort(result.species.begin(), result.species.end(),
            [](const SpeciesResult& a, const SpeciesResult& b) { return a.species < b.species; });
  return result;
}

inline std::vector<SpeciesAggregate> aggregate_rotations(const WindowSet& data, const std::vector<RotationResult>& rotations) {
  std::vector<SpeciesAggregate> out;
  for (std::size_t s = 0; s < data.species.size(); ++s) {
    std::vector<double> acc, prec, rec, f1;
    SpeciesAggregate agg;
    agg.species = s;
    agg.confusion = ConfusionMatrix(data.species[s].num_classes());
    for (const auto& rot : rotations) {
      for (const auto& sr : rot.species) {
        if (sr.species != s) continue;
        acc.push_back(sr.test.accuracy);
        prec.push_back(sr.test.precision);
        rec.push_back(sr.test.recall);
        f1.push_back(sr.test.f1);
        agg.confusion += sr.test.confusion;
      }
    }
    if (acc.empty()) continue;
    agg.accuracy = mean_std(acc);
    agg.precision = mean_std(prec);
    agg.recall = mean_std(rec);
    agg.f1 = mean_std(f1);
    out.push_back(std::move(agg));
  }
  return out;
}

/// Stratified k-fold cross-validation; `rotations` empty means all k.
inline CvReport run_cv(const WindowSet& data, const ExperimentConfig& cfg, std::vector<std::size_t> rotations = {},
                       const EpochCallback& on_epoch = {}) {
  const FoldPlan plan = stratified_folds(data, cfg.folds, cfg.resolved_fold_seed());
  if (rotations.empty()) {
    for (std::size_t i = 0; i < cfg.folds; ++i) rotations.push_back(i);
  }
  CvReport report;
  for (std::size_t r : rotations) report.rotations.push_back(run_split(data, plan.rotation(r), r, cfg, on_epoch));
  report.aggregate = aggregate_rotations(data, report.rotations);
  return report;
}

inline nlohmann::json to_json(const CvReport& report, const WindowSet& data) {
  auto ms = [](const MeanStd& m) { return nlohmann::json{{"mean", m.mean}, {"std", m.std}}; };
  nlohmann::json rotations = nlohmann::json::array();
  for (const auto& rot : report.rotations) {
    nlohmann::json species = nlohmann::json::object();
    for (const auto& sr : rot.species) {
      nlohmann::json m = to_json(sr.test);
      m["best_epoch"] = sr.best_epoch;
      m["best_val_accuracy"] = sr.best_val_accuracy;
      species[data.species[sr.species].name] = m;
    }
    rotations.push_back({{"rotation", rot.rotation}, {"species", species}});
  }
  nlohmann::json aggregate = nlohmann::json::object();
  for (const auto& agg : report.aggregate) {
    aggregate[data.species[agg.species].name] = {{"accuracy", ms(agg.accuracy)},
                                                 {"precision", ms(agg.precision)},
                                                 {"recall", ms(agg.recall)},
                                                 {"f1", ms(agg.f1)},
                                                 {"confusion", agg.confusion.rows()}};
  }
  return {{"rotations", rotations}, {"aggregate", aggregate}};
}

}  // namespace cksp
