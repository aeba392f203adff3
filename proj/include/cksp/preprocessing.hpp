#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "cksp/tensor.hpp"

namespace cksp {

inline constexpr std::size_t kAxes = 3;
inline constexpr std::size_t kDefaultTargetLength = 50;

struct SpeciesInfo {
  std::string name;
  std::vector<std::string> classes;

  std::size_t num_classes() const { return classes.size(); }
};

/// Label id used for timesteps whose activity is outside the species' class set.
inline constexpr int kExcludedLabel = -1;

struct RawRecording {
  std::size_t species_id = 0;
  double sampling_rate_hz = 0.0;
  std::array<std::vector<double>, kAxes> channels;
  std::vector<int> labels;
  std::string subject_id;

  std::size_t length() const { return labels.size(); }

  void validate() const {
    for (const auto& ch : channels) {
      if (ch.size() != labels.size()) {
        throw std::invalid_argument("recording '" + subject_id + "': channel and label arrays differ in length");
      }
    }
    if (!(sampling_rate_hz > 0.0)) {
      throw std::invalid_argument("recording '" + subject_id + "': sampling rate must be positive");
    }
  }
};

struct SampleWindow {
  Tensor data;  // [1,3,L]
  std::size_t species_id = 0;
  std::size_t label = 0;
  std::string subject_id;
  std::size_t native_length = 0;  // timesteps before resampling
};

/// A dataset of preprocessed windows plus the species/class tables they index.
struct WindowSet {
  std::vector<SpeciesInfo> species;
  std::vector<SampleWindow> windows;

  std::vector<std::size_t> indices_of_species(std::size_t s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      if (windows[i].species_id == s) out.push_back(i);
    }
    return out;
  }
};

struct RawWindow {
  Tensor data;  // [1,3,n]
  std::size_t label = 0;
};

struct WindowingResult {
  std::vector<RawWindow> windows;
  std::size_t dropped = 0;  // windows whose majority label is excluded
};

inline std::size_t window_length(double rate_hz, double seconds) {
  const auto n = static_cast<long long>(std::llround(rate_hz * seconds));
  if (n < 1) throw std::invalid_argument("window duration shorter than one sample");
  return static_cast<std::size_t>(n);
}

/// Majority label of a span; ties go to the lowest class id, and the
/// excluded label only wins with a strict majority over every class.
inline int majority_label(std::span<const int> labels) {
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  int best = kExcludedLabel;
  std::size_t best_count = 0;
  for (const auto& [label, count] : counts) {
    if (label == kExcludedLabel) continue;
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  }
  const auto excluded = counts.find(kExcludedLabel);
  if (excluded != counts.end() && excluded->second > best_count) return kExcludedLabel;
  return best;
}

/// Split a recording into non-overlapping windows of round(seconds * rate)
/// steps. The trailing partial window is discarded.
inline WindowingResult window(const RawRecording& rec, double seconds = 2.0) {
  rec.validate();
  if (rec.length() == 0) throw std::invalid_argument("recording '" + rec.subject_id + "' is empty");
  const std::size_t len = window_length(rec.sampling_rate_hz, seconds);
  WindowingResult result;
  for (std::size_t start = 0; start + len <= rec.length(); start += len) {
    const int label = majority_label(std::span<const int>(rec.labels).subspan(start, len));
    if (label == kExcludedLabel) {
      ++result.dropped;
      continue;
    }
    Tensor data({1, kAxes, len});
    for (std::size_t a = 0; a < kAxes; ++a) {
      for (std::size_t t = 0; t < len; ++t) data[a * len + t] = rec.channels[a][start + t];
    }
    result.windows.push_back({std::move(data), static_cast<std::size_t>(label)});
  }
  return result;
}

/// Per-channel linear interpolation of a [1,3,n] window onto `target`
/// uniformly spaced positions spanning [0, n-1].
inline Tensor resample(const Tensor& window, std::size_t target = kDefaultTargetLength) {
  const Shape& s = window.shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("resample: expected [1,c,n], got " + shape_str(s));
  const std::size_t channels = s[1], n = s[2];
  if (n < 2) throw ShapeError("resample: need at least 2 timesteps, got " + std::to_string(n));
  if (target < 2) throw ShapeError("resample: target length must be at least 2");
  Tensor out({1, channels, target});
  for (std::size_t c = 0; c < channels; ++c) {
    const double* x = &window.data()[c * n];
    double* y = &out.data()[c * target];
    for (std::size_t j = 0; j < target; ++j) {
      const double pos = static_cast<double>(j * (n - 1)) / static_cast<double>(target - 1);
      auto i0 = static_cast<std::size_t>(pos);
      if (i0 >= n - 1) {
        y[j] = x[n - 1];
        continue;
      }
      const double frac = pos - static_cast<double>(i0);
      y[j] = frac == 0.0 ? x[i0] : x[i0] + frac * (x[i0 + 1] - x[i0]);
    }
  }
  return out;
}

inline Tensor resample_to_50(const Tensor& window) { return resample(window, 50); }

/// Per-channel affine standardization fitted on a set of windows.
struct Standardizer {
  std::array<double, kAxes> mean{0.0, 0.0, 0.0};
  std::array<double, kAxes> stddev{1.0, 1.0, 1.0};

  static Standardizer fit(const WindowSet& set, std::span<const std::size_t> indices) {
    std::array<double, kAxes> sum{}, sq{};
    std::size_t count = 0;
    for (std::size_t idx : indices) {
      const Tensor& t = set.windows.at(idx).data;
      const std::size_t len = t.dim(2);
      for (std::size_t a = 0; a < kAxes; ++a)
        for (std::size_t j = 0; j < len; ++j) sum[a] += t[a * len + j];
      count += len;
    }
    Standardizer st;
    if (count == 0) return st;
    for (std::size_t a = 0; a < kAxes; ++a) st.mean[a] = sum[a] / static_cast<double>(count);
    for (std::size_t idx : indices) {
      const Tensor& t = set.windows.at(idx).data;
      const std::size_t len = t.dim(2);
      for (std::size_t a = 0; a < kAxes; ++a)
        for (std::size_t j = 0; j < len; ++j) {
          const double d = t[a * len + j] - st.mean[a];
          sq[a] += d * d;
        }
    }
    for (std::size_t a = 0; a < kAxes; ++a) {
      const double sd = std::sqrt(sq[a] / static_cast<double>(count));
      st.stddev[a] = sd > 1e-12 ? sd : 1.0;
    }
    return st;
  }

  Tensor apply(const Tensor& t) const {
    Tensor out = t;
    const std::size_t len = t.dim(2);
    for (std::size_t a = 0; a < kAxes; ++a)
      for (std::size_t j = 0; j < len; ++j) out[a * len + j] = (t[a * len + j] - mean[a]) / stddev[a];
    return out;
  }
};

struct PreprocessReport {
  std::size_t dropped_windows = 0;
  std::map<std::string, std::map<std::string, std::size_t>> windows_per_class;  // species -> class -> count
};

/// Window, resample and collect recordings into a WindowSet. Output order is
/// (species, subject, window index).
inline WindowSet build_window_set(const std::vector<SpeciesInfo>& species, std::vector<RawRecording> recordings,
                                  double seconds, std::size_t target_length, PreprocessReport* report = nullptr) {
  std::stable_sort(recordings.begin(), recordings.end(), [](const RawRecording& a, const RawRecording& b) {
    return std::tie(a.species_id, a.subject_id) < std::tie(b.species_id, b.subject_id);
  });
  WindowSet set;
  set.species = species;
  for (const RawRecording& rec : recordings) {
    if (rec.species_id >= species.size()) throw std::invalid_argument("recording references unknown species id");
    if (rec.length() == 0) continue;
    WindowingResult w = window(rec, seconds);
    if (report) report->dropped_windows += w.dropped;
    for (RawWindow& raw : w.windows) {
      if (raw.label >= species[rec.species_id].num_classes()) {
        throw std::invalid_argument("window label out of range for species '" + species[rec.species_id].name + "'");
      }
      SampleWindow sw;
      sw.native_length = raw.data.dim(2);
      sw.data = resample(raw.data, target_length);
      sw.species_id = rec.species_id;
      sw.label = raw.label;
      sw.subject_id = rec.subject_id;
      if (report) ++report->windows_per_class[species[rec.species_id].name][species[rec.species_id].classes[raw.label]];
      set.windows.push_back(std::move(sw));
    }
  }
  return set;
}

}  // namespace cksp
