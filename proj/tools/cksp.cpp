#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "cksp.hpp"
#include "cli_support.hpp"

namespace fs = std::filesystem;
using namespace cksp;
using cli::UserError;

namespace {

// ---------------------------------------------------------------- prepare

struct PrepareArgs {
  std::string dataset;
  std::string in;
  std::string out;
  std::string synth_spec;
  std::optional<std::uint64_t> seed;
  std::size_t length = kDefaultTargetLength;
  double window_seconds = 2.0;
};

nlohmann::json window_summary(const WindowSet& set) {
  nlohmann::json species = nlohmann::json::array();
  for (std::size_t s = 0; s < set.species.size(); ++s) {
    std::map<std::string, std::size_t> per_class;
    std::set<std::size_t> native;
    std::size_t n = 0;
    for (const auto& w : set.windows) {
      if (w.species_id != s) continue;
      ++n;
      ++per_class[set.species[s].classes.at(w.label)];
      native.insert(w.native_length);
    }
    species.push_back({{"name", set.species[s].name},
                       {"classes", set.species[s].classes},
                       {"windows", n},
                       {"windows_per_class", per_class},
                       {"native_lengths", native}});
  }
  return {{"total_windows", set.windows.size()}, {"species", species}};
}

int cmd_prepare(const PrepareArgs& a) {
  cli::RunManifest manifest;
  manifest.command = "prepare";
  manifest.seed = a.seed.value_or(0);
  nlohmann::json report;
  WindowSet set;
  if (a.dataset == "synthetic") {
    SyntheticSpec spec = a.synth_spec.empty() ? default_synthetic_spec() : SyntheticSpec{};
    if (!a.synth_spec.empty()) {
      try {
        spec = cli::read_json_file(a.synth_spec).get<SyntheticSpec>();
      } catch (const nlohmann::json::exception& e) {
        throw UserError(a.synth_spec + ": " + e.what());
      }
      manifest.inputs.emplace_back(a.synth_spec, cli::file_hash(a.synth_spec));
    }
    if (a.seed) spec.seed = *a.seed;
    manifest.seed = spec.seed;
    manifest.config = {{"dataset", "synthetic"}, {"spec", spec}};
    spec.window_seconds = a.window_seconds;
    PreprocessReport pre;
    try {
      SyntheticDataset ds = generate(spec);
      set = build_window_set(ds.species, std::move(ds.recordings), spec.window_seconds, a.length, &pre);
    } catch (const std::invalid_argument& e) {
      throw UserError(e.what());
    }
    report = {{"dropped_windows", pre.dropped_windows}, {"windows_per_class", pre.windows_per_class}};
  } else {
    if (a.in.empty()) throw UserError("--in is required for --dataset " + a.dataset);
    IngestResult r;
    if (a.dataset == "csv") {
      r = ingest_canonical_csv(a.in);
      manifest.inputs.emplace_back(a.in, cli::file_hash(a.in));
    } else {
      r = ingest_public_dataset(*parse_public_dataset(a.dataset), a.in);
      std::vector<std::string> files;
      for (const auto& e : fs::recursive_directory_iterator(a.in))
        if (e.is_regular_file()) files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) manifest.inputs.emplace_back(f, cli::file_hash(f));
    }
    manifest.config = {{"dataset", a.dataset}};
    set = build_window_set(r.species, std::move(r.recordings), a.window_seconds, a.length, &r.report.windows);
    report = r.report.to_json();
  }
  manifest.config["target_length"] = a.length;
  manifest.config["window_seconds"] = a.window_seconds;
  if (set.windows.empty()) throw UserError("no complete windows could be cut from the input");
  report["summary"] = window_summary(set);

  const fs::path out = a.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_archive(set, out);
  const fs::path report_path = out.string() + ".report.json";
  const fs::path manifest_path = out.string() + ".manifest.json";
  cli::write_json(report_path, report);
  manifest.outputs = {out.string(), report_path.string()};
  manifest.write(manifest_path);
  std::cout << "wrote " << set.windows.size() << " windows over " << set.species.size() << " species to " << out.string()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

std::string model_tag(const WindowSet& data, const RotationResult& rot, std::size_t m) {
  const auto& group = rot.model_species.at(m);
  if (group.size() == data.species.size() && group.size() > 1) return "joint";
  std::string tag;
  for (std::size_t s : group) tag += (tag.empty() ? "" : "+") + data.species.at(s).name;
  return tag;
}

nlohmann::json standardizer_json(const Standardizer& st) { return {{"mean", st.mean}, {"stddev", st.stddev}}; }

/// Write every artifact of one cross-validated run into `dir`.
std::vector<std::string> write_run_outputs(const fs::path& dir, const WindowSet& data, CvReport& report,
                                           const nlohmann::json& config_echo) {
  std::vector<std::string> outputs;
  std::vector<std::string> names;
  for (const auto& sp : data.species) names.push_back(sp.name);
  for (auto& rot : report.rotations) {
    for (std::size_t m = 0; m < rot.runs.size(); ++m) {
      const std::string tag = "rot" + std::to_string(rot.rotation) + "_" + model_tag(data, rot, m);
      std::vector<std::string> model_names;
      for (std::size_t s : rot.model_species[m]) model_names.push_back(names.at(s));
      const fs::path ckpt = dir / "checkpoints" / (tag + ".json");
      fs::create_directories(ckpt.parent_path());
      save_checkpoint(rot.runs[m].best, ckpt,
                      {{"species", model_names},
                       {"standardizer", standardizer_json(rot.standardizers[m])},
                       {"best_epoch", rot.runs[m].best_epoch},
                       {"best_val_accuracy", rot.runs[m].best_val_accuracy}});
      const fs::path curves = dir / "curves" / (tag + ".csv");
      cli::write_text(curves, curves_csv(rot.runs[m].curves, model_names));
      const fs::path bn = dir / "bn_stats" / (tag + ".csv");
      cli::write_text(bn, bn_stats_csv(bn_stats_export(rot.runs[m].best), model_names));
      outputs.insert(outputs.end(), {ckpt.string(), curves.string(), bn.string()});
    }
  }
  nlohmann::json metrics = to_json(report, data);
  metrics["config"] = config_echo;
  nlohmann::json species = nlohmann::json::array();
  for (const auto& sp : data.species) species.push_back({{"name", sp.name}, {"classes", sp.classes}});
  metrics["dataset"] = {{"species", species}, {"windows", data.windows.size()}};
  const fs::path metrics_path = dir / "metrics.json";
  cli::write_json(metrics_path, metrics);
  outputs.push_back(metrics_path.string());
  for (const auto& agg : report.aggregate) {
    const auto& sp = data.species.at(agg.species);
    const fs::path p = dir / ("confusion_" + sp.name + ".csv");
    cli::write_text(p, agg.confusion.to_percentage_csv(sp.classes));
    outputs.push_back(p.string());
  }
  return outputs;
}

void print_summary(const WindowSet& data, const CvReport& report, const std::string& label) {
  for (const auto& agg : report.aggregate) {
    std::cout << label << " " << data.species.at(agg.species).name << ": accuracy " << 100.0 * agg.accuracy.mean
              << " f1 " << 100.0 * agg.f1.mean << " (" << report.rotations.size() << " rotation(s))\n";
  }
}

CvReport run_checked(const WindowSet& data, const ExperimentConfig& cfg, const std::vector<std::size_t>& rotations) {
  try {
    return run_cv(data, cfg, rotations);
  } catch (const std::invalid_argument& e) {
    throw UserError(e.what());
  } catch (const std::out_of_range& e) {
    throw UserError(e.what());
  }
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> data;
  std::string out;
  std::vector<std::string> overrides;
  std::string ablate;
  std::string single_net;
};

std::optional<std::size_t> species_by_name(const WindowSet& data, const std::string& name) {
  for (std::size_t s = 0; s < data.species.size(); ++s)
    if (data.species[s].name == name) return s;
  return std::nullopt;
}

int cmd_train(const TrainArgs& a) {
  cli::RunManifest manifest;
  manifest.command = "train";
  cli::LoadedConfig lc = cli::load_config(a.config, a.overrides);
  if (!a.config.empty()) manifest.inputs.emplace_back(a.config, cli::file_hash(a.config));
  const WindowSet data = cli::load_archives(a.data, manifest);
  ExperimentConfig cfg = lc.experiment;
  if (!a.single_net.empty()) {
    if (!a.ablate.empty()) throw UserError("--single-net and --ablate cannot be combined");
    cfg.kind = RunKind::SingleNet;
    if (a.single_net != "all") {
      const auto s = species_by_name(data, a.single_net);
      if (!s) throw UserError("unknown species '" + a.single_net + "'");
      cfg.only_species = *s;
    }
  }
  manifest.config = cfg;
  manifest.config["rotations"] = lc.rotations;
  manifest.seed = cfg.train.seed;
  const fs::path out = a.out;
  fs::create_directories(out);

  if (a.ablate.empty()) {
    CvReport report = run_checked(data, cfg, lc.rotations);
    manifest.outputs = write_run_outputs(out, data, report, manifest.config);
    print_summary(data, report, cfg.kind == RunKind::Joint ? "cksp" : "single-net");
  } else {
    bool grid_spconv = false, grid_sbn = false;
    std::stringstream ss(a.ablate);
    for (std::string item; std::getline(ss, item, ',');) {
      if (item == "no-spconv") grid_spconv = true;
      else if (item == "no-sbn") grid_sbn = true;
      else throw UserError("unknown ablation '" + item + "' (expected no-spconv and/or no-sbn)");
    }
    std::string csv = "variant,use_spconv,use_sbn,species,metric,mean,std\n";
    for (bool spconv : grid_spconv ? std::vector<bool>{true, false} : std::vector<bool>{true}) {
      for (bool sbn : grid_sbn ? std::vector<bool>{true, false} : std::vector<bool>{true}) {
        ExperimentConfig v = cfg;
        v.model = ablation_variant(cfg.model, spconv, sbn, cfg.model.branch);
        const std::string variant = std::string(spconv ? "spconv" : "nospconv") + "_" + (sbn ? "sbn" : "nosbn");
        nlohmann::json echo = v;
        echo["rotations"] = lc.rotations;
        CvReport report = run_checked(data, v, lc.rotations);
        auto outs = write_run_outputs(out / variant, data, report, echo);
        manifest.outputs.insert(manifest.outputs.end(), outs.begin(), outs.end());
        print_summary(data, report, variant);
        for (const auto& agg : report.aggregate) {
          const std::string name = data.species.at(agg.species).name;
          for (auto [metric, ms] : {std::pair{"accuracy", agg.accuracy}, {"precision", agg.precision},
                                    {"recall", agg.recall}, {"f1", agg.f1}}) {
            csv += variant + "," + (spconv ? "1" : "0") + "," + (sbn ? "1" : "0") + "," + name + "," + metric + "," +
                   nlohmann::json(ms.mean).dump() + "," + nlohmann::json(ms.std).dump() + "\n";
          }
        }
      }
    }
    cli::write_text(out / "ablation.csv", csv);
    manifest.outputs.push_back((out / "ablation.csv").string());
  }
  manifest.write(out / "manifest.json");
  return 0;
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
  std::string config;
  std::vector<std::string> data;
  std::string out;
  std::vector<std::string> overrides;
  std::vector<std::size_t> ranks;
  std::vector<double> fractions;
  bool frconv = false;
  bool single_net_baseline = false;
  std::size_t jobs = 1;
};

struct SweepPoint {
  std::string var;
  std::string value;
  ExperimentConfig cfg;
};

std::string number_text(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

int cmd_sweep(const SweepArgs& a) {
  if (a.ranks.empty() && a.fractions.empty() && !a.frconv) throw UserError("nothing to sweep: give --rank, --fraction or --frconv");
  cli::RunManifest manifest;
  manifest.command = "sweep";
  cli::LoadedConfig lc = cli::load_config(a.config, a.overrides);
  if (!a.config.empty()) manifest.inputs.emplace_back(a.config, cli::file_hash(a.config));
  const WindowSet data = cli::load_archives(a.data, manifest);
  const ExperimentConfig base = lc.experiment;
  manifest.config = lc.echo;
  manifest.config["sweep"] = {{"rank", a.ranks}, {"fraction", a.fractions}, {"frconv", a.frconv},
                              {"single_net_baseline", a.single_net_baseline}};
  manifest.seed = base.train.seed;

  std::vector<SweepPoint> points;
  for (std::size_t r : a.ranks) {
    SweepPoint p{"rank", std::to_string(r), base};
    p.cfg.model.rank = r;
    p.cfg.model.branch = BranchKind::LowRank;
    points.push_back(p);
  }
  if (a.frconv) {
    SweepPoint p{"rank", "frconv", base};
    p.cfg.model.branch = BranchKind::FullRank;
    points.push_back(p);
  }
  for (double f : a.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw UserError("fraction " + number_text(f) + " is outside (0,1]");
    SweepPoint p{"fraction", number_text(f), base};
    p.cfg.train.data_fraction = f;
    points.push_back(p);
    if (a.single_net_baseline) {
      SweepPoint b{"fraction_single_net", number_text(f), p.cfg};
      b.cfg.kind = RunKind::SingleNet;
      points.push_back(b);
    }
  }

  std::vector<std::optional<CvReport>> reports(points.size());
  std::vector<std::string> errors(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        reports[i] = run_checked(data, points[i].cfg, lc.rotations);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::max<std::size_t>(1, std::min(a.jobs, points.size())); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!errors[i].empty()) throw UserError(points[i].var + "=" + points[i].value + ": " + errors[i]);
  }

  const fs::path out = a.out;
  fs::create_directories(out);
  std::string csv = "sweep_var,value,species,metric,mean,std\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    const CvReport& rep = *reports[i];
    for (const auto& agg : rep.aggregate) {
      for (auto [metric, ms] : {std::pair{"accuracy", agg.accuracy}, {"precision", agg.precision},
                                {"recall", agg.recall}, {"f1", agg.f1}}) {
        csv += points[i].var + "," + points[i].value + "," + data.species.at(agg.species).name + "," + metric + "," +
               nlohmann::json(ms.mean).dump() + "," + nlohmann::json(ms.std).dump() + "\n";
      }
    }
    nlohmann::json m = to_json(rep, data);
    m["config"] = points[i].cfg;
    const fs::path p = out / "points" / (points[i].var + "_" + points[i].value + ".json");
    cli::write_json(p, m);
    manifest.outputs.push_back(p.string());
    std::cout << points[i].var << "=" << points[i].value << " done\n";
  }
  cli::write_text(out / "sweep.csv", csv);
  manifest.outputs.push_back((out / "sweep.csv").string());
  manifest.write(out / "manifest.json");
  return 0;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& scale, double step, double tol) {
  if (scale != "tiny") throw UserError("unknown scale '" + scale + "' (available: tiny)");
  const GradCheckSuiteResult r = run_gradcheck_suite(step, tol);
  std::cout << std::left << std::setw(20) << "operator" << std::setw(10) << "checked" << std::setw(16) << "max_rel_error"
            << "status\n";
  for (const auto& e : r.entries) {
    std::cout << std::left << std::setw(20) << e.name << std::setw(10) << e.report.checked << std::setw(16)
              << e.report.max_rel_error << (e.report.passed() ? "pass" : "FAIL") << "\n";
  }
  std::cout << (r.passed() ? "all gradient checks passed" : "gradient check FAILED") << " (max relative error "
            << r.max_rel_error() << ", tolerance " << tol << ")\n";
  return r.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-species activity recognition with shared and species-specific parameters"};
  app.set_version_flag("--version", cli::version_string());
  app.require_subcommand(1);

  PrepareArgs pa;
  auto* prepare = app.add_subcommand("prepare", "Ingest, window and resample a dataset into a window archive");
  prepare->add_option("--dataset", pa.dataset, "Source kind")
      ->required()
      ->check(CLI::IsMember({"horse", "sheep", "cattle", "csv", "synthetic"}));
  prepare->add_option("--in", pa.in, "Input CSV file (csv) or directory (horse|sheep|cattle)");
  prepare->add_option("--out", pa.out, "Output archive path")->required();
  prepare->add_option("--synth-spec", pa.synth_spec, "Synthetic generator spec (JSON)");
  prepare->add_option("--seed", pa.seed, "Synthetic generator seed");
  prepare->add_option("--length", pa.length, "Timesteps per window after resampling")->check(CLI::PositiveNumber);
  prepare->add_option("--window-seconds", pa.window_seconds, "Window duration in seconds")->check(CLI::PositiveNumber);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Cross-validated training with checkpoints, curves and metrics");
  train->add_option("--config", ta.config, "Experiment config (JSON); defaults apply when omitted");
  train->add_option("--data", ta.data, "Window archive(s)")->required();
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--set", ta.overrides, "Config override section.key=value (repeatable)");
  train->add_option("--ablate", ta.ablate, "Comma list of no-spconv,no-sbn: grid over the listed modules");
  train->add_option("--single-net", ta.single_net, "Train one single-species baseline (species name, or 'all')");

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "Rank, FRConv and data-fraction sweeps to a tidy CSV");
  sweep->add_option("--config", sa.config, "Experiment config (JSON)");
  sweep->add_option("--data", sa.data, "Window archive(s)")->required();
  sweep->add_option("--out", sa.out, "Output directory")->required();
  sweep->add_option("--set", sa.overrides, "Config override section.key=value (repeatable)");
  sweep->add_option("--rank", sa.ranks, "Ranks, e.g. 2,4,8,12,16")->delimiter(',');
  sweep->add_option("--fraction", sa.fractions, "Training fractions, e.g. 0.75,0.5,0.25,0.10")->delimiter(',');
  sweep->add_flag("--frconv", sa.frconv, "Add the full-rank branch comparator");
  sweep->add_flag("--single-net-baseline", sa.single_net_baseline, "Also run Single-Net at every fraction");
  sweep->add_option("--jobs", sa.jobs, "Worker threads, one run per worker")->check(CLI::PositiveNumber);

  std::string scale = "tiny";
  double step = 1e-5, tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every operator and the full model");
  gradcheck->add_option("--scale", scale, "Problem size (tiny)");
  gradcheck->add_option("--step", step, "Central-difference step")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tol", tol, "Maximum relative error")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*prepare) return cmd_prepare(pa);
    if (*train) return cmd_train(ta);
    if (*sweep) return cmd_sweep(sa);
    if (*gradcheck) return cmd_gradcheck(scale, step, tol);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IngestError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ArchiveError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
