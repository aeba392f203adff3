#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cksp/model.hpp"

namespace cksp {

struct BnStatsRow {
  std::size_t layer = 0;  // 0 = stem, then blocks, last = fully connected
  std::string layer_name;
  std::size_t species = 0;
  bool shared = false;  // the layer has one state used by every species
  double mean_of_running_mean = 0.0;
  double mean_of_running_var = 0.0;
};

/// Channel-averaged running statistics per normalization layer and species.
inline std::vector<BnStatsRow> bn_stats_export(CkspModel& model) {
  std::vector<BnStatsRow> rows;
  std::size_t layer = 0;
  model.for_each_norm([&](const std::string& name, SbnLayer& bn) {
    for (std::size_t s = 0; s < model.num_species(); ++s) {
      const BnState& st = bn.state_for(s);
      BnStatsRow r;
      r.layer = layer;
      r.layer_name = name;
      r.species = s;
      r.shared = !bn.per_species();
      for (double v : st.running_mean.data()) r.mean_of_running_mean += v;
      for (double v : st.running_var.data()) r.mean_of_running_var += v;
      r.mean_of_running_mean /= static_cast<double>(st.running_mean.numel());
      r.mean_of_running_var /= static_cast<double>(st.running_var.numel());
      rows.push_back(r);
    }
    ++layer;
  });
  return rows;
}

inline std::string bn_stats_csv(const std::vector<BnStatsRow>& rows, const std::vector<std::string>& species_names = {}) {
  std::string out = "layer,layer_name,species,shared,mean_running_mean,mean_running_var\n";
  for (const auto& r : rows) {
    const std::string sp = r.species < species_names.size() ? species_names[r.species] : std::to_string(r.species);
    out += std::to_string(r.layer) + "," + r.layer_name + "," + sp + "," + (r.shared ? "1" : "0") + "," +
           nlohmann::json(r.mean_of_running_mean).dump() + "," + nlohmann::json(r.mean_of_running_var).dump() + "\n";
  }
  return out;
}

/// Across-species variance of the channel-averaged running mean, per layer.
inline std::vector<double> interspecies_divergence(const std::vector<BnStatsRow>& rows) {
  std::vector<double> out;
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    double mean = 0.0;
    while (j < rows.size() && rows[j].layer == rows[i].layer) mean += rows[j++].mean_of_running_mean;
    mean /= static_cast<double>(j - i);
    double var = 0.0;
    for (std::size_t t = i; t < j; ++t) var += (rows[t].mean_of_running_mean - mean) * (rows[t].mean_of_running_mean - mean);
    out.push_back(var / static_cast<double>(j - i));
    i = j;
  }
  return out;
}

}  // namespace cksp
