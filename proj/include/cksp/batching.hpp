#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cksp/preprocessing.hpp"

namespace cksp {

using LabelOf = std::function<std::size_t(std::size_t)>;

inline LabelOf labels_of(const WindowSet& set) {
  return [&set](std::size_t i) { return set.windows.at(i).label; };
}

/// splitmix64 finalizer, used to derive independent RNG streams from a seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1) + 0xBF58476D1CE4E5B9ULL * (c + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Fisher-Yates with our own index draw so results do not depend on the
/// standard library's shuffle implementation.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

/// Group indices by class, preserving input order within each class.
inline std::map<std::size_t, std::vector<std::size_t>> group_by_class(const std::vector<std::size_t>& indices,
                                                                      const LabelOf& label_of) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i : indices) by_class[label_of(i)].push_back(i);
  return by_class;
}

/// Largest-remainder split of `total` across classes proportional to their
/// sizes; remainders are broken by class id.
inline std::map<std::size_t, std::size_t> proportional_quota(const std::map<std::size_t, std::vector<std::size_t>>& by_class,
                                                             std::size_t total) {
  std::size_t n = 0;
  for (const auto& [c, v] : by_class) n += v.size();
  std::map<std::size_t, std::size_t> quota;
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (const auto& [c, v] : by_class) {
    const double exact = static_cast<double>(total) * static_cast<double>(v.size()) / static_cast<double>(n);
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++quota[remainders[i].second];
  return quota;
}

/// Keep a seeded, class-stratified subset of `total` indices. The result is
/// sorted ascending.
inline std::vector<std::size_t> stratified_sample(const std::vector<std::size_t>& indices, const LabelOf& label_of,
                                                  std::size_t total, std::uint64_t seed) {
  if (total >= indices.size()) {
    std::vector<std::size_t> all = indices;
    std::sort(all.begin(), all.end());
    return all;
  }
  auto by_class = group_by_class(indices, label_of);
  const auto quota = proportional_quota(by_class, total);
  std::vector<std::size_t> out;
  for (auto& [c, members] : by_class) {
    std::sort(members.begin(), members.end());
    std::mt19937_64 rng(mix_seed(seed, c));
    seeded_shuffle(members, rng);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(quota.at(c)));
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Downsample every species' pool to the size of the smallest one.
inline std::vector<std::vector<std::size_t>> equalize_species(const std::vector<std::vector<std::size_t>>& pools,
                                                              const LabelOf& label_of, std::uint64_t seed) {
  if (pools.empty()) throw std::invalid_argument("equalize_species: no species");
  std::size_t smallest = pools.front().size();
  for (std::size_t s = 0; s < pools.size(); ++s) {
    if (pools[s].empty()) throw std::invalid_argument("equalize_species: species " + std::to_string(s) + " has no data");
    smallest = std::min(smallest, pools[s].size());
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < pools.size(); ++s) {
    out.push_back(stratified_sample(pools[s], label_of, smallest, mix_seed(seed, s, 101)));
  }
  return out;
}

/// One training step's worth of data: `per_species[s]` holds the window
/// indices of species s, all sub-batches the same size.
struct BalancedBatch {
  std::vector<std::vector<std::size_t>> per_species;
};

/// Epoch-wise balanced batches. Each epoch reshuffles every pool with a
/// stream derived from (seed, epoch, species), so any epoch can be replayed
/// on its own.
class BatchStream {
 public:
  BatchStream(std::vector<std::vector<std::size_t>> pools, std::size_t batch_size, std::uint64_t seed)
      : pools_(std::move(pools)), seed_(seed) {
    if (pools_.empty()) throw std::invalid_argument("make_batches: no species pools");
    if (batch_size == 0 || batch_size % pools_.size() != 0) {
      throw std::invalid_argument("batch size " + std::to_string(batch_size) + " is not divisible by the species count " +
                                  std::to_string(pools_.size()) + "; use a multiple such as " +
                                  std::to_string(default_batch_size(pools_.size(), std::max<std::size_t>(batch_size, pools_.size()))));
    }
    per_species_ = batch_size / pools_.size();
    std::size_t shortest = pools_.front().size();
    for (const auto& p : pools_) shortest = std::min(shortest, p.size());
    batches_per_epoch_ = shortest / per_species_;
  }

  /// Largest multiple of `species` not above `requested`.
  static std::size_t default_batch_size(std::size_t species, std::size_t requested = 256) {
    if (species == 0) throw std::invalid_argument("species count must be positive");
    return std::max<std::size_t>(species, requested / species * species);
  }

  std::size_t per_species() const { return per_species_; }
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::size_t num_species() const { return pools_.size(); }

  std::vector<BalancedBatch> epoch(std::size_t e) const {
    std::vector<std::vector<std::size_t>> order = pools_;
    for (std::size_t s = 0; s < order.size(); ++s) {
      std::mt19937_64 rng(mix_seed(seed_, e, s));
      seeded_shuffle(order[s], rng);
    }
    std::vector<BalancedBatch> batches(batches_per_epoch_);
    for (std::size_t b = 0; b < batches_per_epoch_; ++b) {
      for (std::size_t s = 0; s < order.size(); ++s) {
        auto first = order[s].begin() + static_cast<std::ptrdiff_t>(b * per_species_);
        batches[b].per_species.emplace_back(first, first + static_cast<std::ptrdiff_t>(per_species_));
      }
    }
    return batches;
  }

 private:
  std::vector<std::vector<std::size_t>> pools_;
  std::uint64_t seed_;
  std::size_t per_species_ = 0;
  std::size_t batches_per_epoch_ = 0;
};

inline BatchStream make_batches(std::vector<std::vector<std::size_t>> pools, std::size_t batch_size, std::uint64_t seed) {
  return BatchStream(std::move(pools), batch_size, seed);
}

}  // namespace cksp
