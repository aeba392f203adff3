#pragma once

#include <algorithm>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cksp/batching.hpp"
#include "cksp/preprocessing.hpp"

namespace cksp {

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// k disjoint folds of window indices, stratified by (species, class).
struct FoldPlan {
  std::size_t k = 5;
  std::vector<std::vector<std::size_t>> folds;

  /// Rotation i: test = fold i, validation = fold (i+1) mod k, train = rest.
  Split rotation(std::size_t i) const {
    if (i >= k) throw std::out_of_range("rotation " + std::to_string(i) + " out of range for " + std::to_string(k) + " folds");
    Split s;
    const std::size_t v = (i + 1) % k;
    for (std::size_t f = 0; f < k; ++f) {
      auto& dst = f == i ? s.test : (f == v ? s.val : s.train);
      dst.insert(dst.end(), folds[f].begin(), folds[f].end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
  }
};

/// Seeded shuffle inside each (species, class) stratum, then round-robin
/// dealing. The dealing position carries over between strata so fold sizes
/// stay within one of each other overall as well as per class.
inline FoldPlan stratified_folds(const WindowSet& set, std::size_t k = 5, std::uint64_t seed = 0) {
  if (k < 3) throw std::invalid_argument("stratified_folds: train/validation/test rotation needs at least 3 folds");
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < set.windows.size(); ++i) {
    strata[{set.windows[i].species_id, set.windows[i].label}].push_back(i);
  }
  for (std::size_t s = 0; s < set.species.size(); ++s) {
    for (std::size_t c = 0; c < set.species[s].num_classes(); ++c) {
      const auto it = strata.find({s, c});
      const std::size_t n = it == strata.end() ? 0 : it->second.size();
      if (n > 0 && n < k) {
        throw std::invalid_argument("species '" + set.species[s].name + "' class '" + set.species[s].classes[c] +
                                    "' has " + std::to_string(n) + " windows; stratified " + std::to_string(k) +
                                    "-fold splitting needs at least " + std::to_string(k));
      }
    }
  }
  FoldPlan plan;
  plan.k = k;
  plan.folds.assign(k, {});
  std::size_t cursor = 0;
  for (auto& [key, members] : strata) {
    std::mt19937_64 rng(mix_seed(seed, key.first, key.second));
    seeded_shuffle(members, rng);
    for (std::size_t idx : members) {
      plan.folds[cursor % k].push_back(idx);
      ++cursor;
    }
  }
  for (auto& f : plan.folds) std::sort(f.begin(), f.end());
  return plan;
}

/// Stratified per-class subsample of a training split: round(fraction * n)
/// windows per (species, class). Smaller fractions give subsets of larger
/// ones under the same seed.
inline std::vector<std::size_t> scarcity_view(const WindowSet& set, const std::vector<std::size_t>& train, double fraction,
                                              std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must be in (0,1]");
  if (fraction == 1.0) return train;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> strata;
  for (std::size_t i : train) strata[{set.windows.at(i).species_id, set.windows[i].label}].push_back(i);
  std::vector<std::size_t> out;
  for (auto& [key, members] : strata) {
    const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    if (keep == 0) {
      throw std::invalid_argument("fraction " + std::to_string(fraction) + " leaves no windows for species '" +
                                  set.species.at(key.first).name + "' class '" +
                                  set.species[key.first].classes.at(key.second) + "'");
    }
    std::sort(members.begin(), members.end());
    std::mt19937_64 rng(mix_seed(seed, key.first, key.second + 1000));
    seeded_shuffle(members, rng);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace cksp
