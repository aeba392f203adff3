#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cksp/batching.hpp"
#include "cksp/ingest.hpp"
#include "cksp/preprocessing.hpp"

namespace cksp {

enum class MotifFamily { SineBurst, SquareBurst, DampedOscillation };

/// A parametric waveform laid onto the three axes with fixed weights.
struct Motif {
  MotifFamily family = MotifFamily::SineBurst;
  double frequency_hz = 1.0;
  double amplitude = 1.0;
  std::array<double, 3> axis_weights{1.0, 0.0, 0.0};
  double decay_per_s = 1.5;  // damped oscillation only
};

/// Per-species rendering of the shared motif pool.
struct SyntheticSpecies {
  std::string name;
  double rate_hz = 25.0;
  std::vector<std::size_t> class_motifs;  // one motif id per class
  std::vector<std::string> class_names;
  double amplitude_scale = 1.0;  // gain on everything except gravity
  double frequency_scale = 1.0;
  double rotation_rad = 0.0;  // rotation of the x/y axes
  std::array<double, 3> gravity{0.0, 0.0, 1.0};
};

struct SyntheticSpec {
  std::vector<Motif> motifs;
  std::vector<SyntheticSpecies> species;
  double noise_sigma = 0.3;
  double amplitude_jitter = 0.2;   // relative, uniform
  double frequency_jitter = 0.1;   // relative, uniform
  double phase_jitter = 1.0;       // fraction of a full cycle
  double distractor_amplitude = 0.3;
  double burst_min_s = 0.8;
  double burst_max_s = 1.6;
  double window_seconds = 2.0;
  std::size_t windows_per_class = 200;
  std::size_t subjects_per_species = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (species.empty()) throw std::invalid_argument("synthetic spec: no species");
    if (windows_per_class == 0) throw std::invalid_argument("synthetic spec: windows_per_class must be positive");
    if (subjects_per_species == 0) throw std::invalid_argument("synthetic spec: subjects_per_species must be positive");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("synthetic spec: noise sigma must be non-negative");
    if (!(burst_min_s > 0.0 && burst_min_s <= burst_max_s && burst_max_s <= window_seconds)) {
      throw std::invalid_argument("synthetic spec: burst duration range must lie within the window");
    }
    std::vector<std::set<std::size_t>> users(motifs.size());
    for (std::size_t s = 0; s < species.size(); ++s) {
      const auto& sp = species[s];
      if (sp.class_motifs.empty()) throw std::invalid_argument("synthetic spec: species '" + sp.name + "' has no classes");
      if (sp.class_names.size() != sp.class_motifs.size()) {
        throw std::invalid_argument("synthetic spec: species '" + sp.name + "' needs one name per class");
      }
      if (!(sp.rate_hz > 0.0)) throw std::invalid_argument("synthetic spec: species '" + sp.name + "' rate must be positive");
      std::set<std::size_t> seen;
      for (std::size_t m : sp.class_motifs) {
        if (m >= motifs.size()) throw std::invalid_argument("synthetic spec: unknown motif id " + std::to_string(m));
        if (!seen.insert(m).second) {
          throw std::invalid_argument("synthetic spec: species '" + sp.name + "' maps two classes to one motif");
        }
        users[m].insert(s);
      }
    }
    bool shared = false;
    for (const auto& u : users) shared = shared || u.size() >= 2;
    if (species.size() >= 2 && !shared) throw std::invalid_argument("synthetic spec: no motif is shared by two species");
  }
};

inline const char* to_string(MotifFamily f) {
  switch (f) {
    case MotifFamily::SineBurst: return "sine_burst";
    case MotifFamily::SquareBurst: return "square_burst";
    case MotifFamily::DampedOscillation: return "damped_oscillation";
  }
  return "?";
}

inline MotifFamily parse_motif_family(const std::string& s) {
  if (s == "sine_burst") return MotifFamily::SineBurst;
  if (s == "square_burst") return MotifFamily::SquareBurst;
  if (s == "damped_oscillation") return MotifFamily::DampedOscillation;
  throw std::invalid_argument("unknown motif family '" + s + "'");
}

/// Three species sampled at 100, 12.5 and 25 Hz, five classes each, drawn
/// from six motifs of three families. Four motifs are common to all three
/// species. Each species renders them with its own tempo, x/y rotation, gain
/// and gravity direction.
inline SyntheticSpec default_synthetic_spec(std::uint64_t seed = 0) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.motifs = {
      {MotifFamily::SineBurst, 1.0, 1.0, {1.0, 0.3, 0.0}, 0.0},
      {MotifFamily::SineBurst, 2.5, 0.8, {0.2, 1.0, 0.2}, 0.0},
      {MotifFamily::SquareBurst, 1.5, 0.9, {0.5, 0.5, 0.5}, 0.0},
      {MotifFamily::SquareBurst, 0.5, 1.0, {0.0, 0.4, 1.0}, 0.0},
      {MotifFamily::DampedOscillation, 3.0, 1.4, {1.0, 0.0, 0.6}, 1.5},
      {MotifFamily::DampedOscillation, 1.2, 1.2, {0.3, 1.0, 0.0}, 1.0},
  };
  spec.species = {
      {"synth_a", 100.0, {0, 1, 2, 3, 4}, {"graze", "gallop", "walk", "stand", "trot"}, 1.0, 1.0, 0.0, {0.0, 0.0, 1.0}},
      {"synth_b", 12.5, {0, 1, 2, 3, 5}, {"graze", "run", "walk", "lie", "ruminate"}, 0.6, 0.8, 0.3, {0.2, 0.0, 0.9}},
      {"synth_c", 25.0, {0, 1, 2, 3, 4}, {"graze", "run", "walk", "rest", "shake"}, 1.6, 1.25, -0.3, {0.0, 0.3, 0.8}},
  };
  return spec;
}

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  nlohmann::json motifs = nlohmann::json::array();
  for (const auto& m : s.motifs) {
    motifs.push_back({{"family", to_string(m.family)},
                      {"frequency_hz", m.frequency_hz},
                      {"amplitude", m.amplitude},
                      {"axis_weights", m.axis_weights},
                      {"decay_per_s", m.decay_per_s}});
  }
  nlohmann::json species = nlohmann::json::array();
  for (const auto& sp : s.species) {
    species.push_back({{"name", sp.name},
                       {"rate_hz", sp.rate_hz},
                       {"class_motifs", sp.class_motifs},
                       {"class_names", sp.class_names},
                       {"amplitude_scale", sp.amplitude_scale},
                       {"frequency_scale", sp.frequency_scale},
                       {"rotation_rad", sp.rotation_rad},
                       {"gravity", sp.gravity}});
  }
  j = nlohmann::json{{"motifs", motifs},
                     {"species", species},
                     {"noise_sigma", s.noise_sigma},
                     {"amplitude_jitter", s.amplitude_jitter},
                     {"frequency_jitter", s.frequency_jitter},
                     {"phase_jitter", s.phase_jitter},
                     {"distractor_amplitude", s.distractor_amplitude},
                     {"burst_min_s", s.burst_min_s},
                     {"burst_max_s", s.burst_max_s},
                     {"window_seconds", s.window_seconds},
                     {"windows_per_class", s.windows_per_class},
                     {"subjects_per_species", s.subjects_per_species},
                     {"seed", s.seed}};
}

/// Keys left out keep the values of the default spec.
inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s = default_synthetic_spec(j.value("seed", std::uint64_t{0}));
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
  };
  get("noise_sigma", s.noise_sigma);
  get("amplitude_jitter", s.amplitude_jitter);
  get("frequency_jitter", s.frequency_jitter);
  get("phase_jitter", s.phase_jitter);
  get("distractor_amplitude", s.distractor_amplitude);
  get("burst_min_s", s.burst_min_s);
  get("burst_max_s", s.burst_max_s);
  get("window_seconds", s.window_seconds);
  get("windows_per_class", s.windows_per_class);
  get("subjects_per_species", s.subjects_per_species);
  if (j.contains("motifs")) {
    s.motifs.clear();
    for (const auto& m : j.at("motifs")) {
      Motif mo;
      mo.family = parse_motif_family(m.at("family").get<std::string>());
      mo.frequency_hz = m.at("frequency_hz").get<double>();
      mo.amplitude = m.value("amplitude", 1.0);
      if (m.contains("axis_weights")) m.at("axis_weights").get_to(mo.axis_weights);
      mo.decay_per_s = m.value("decay_per_s", 1.5);
      s.motifs.push_back(mo);
    }
  }
  if (j.contains("species")) {
    s.species.clear();
    for (const auto& sp : j.at("species")) {
      SyntheticSpecies o;
      o.name = sp.at("name").get<std::string>();
      o.rate_hz = sp.at("rate_hz").get<double>();
      sp.at("class_motifs").get_to(o.class_motifs);
      if (sp.contains("class_names")) {
        sp.at("class_names").get_to(o.class_names);
      } else {
        for (std::size_t c = 0; c < o.class_motifs.size(); ++c) o.class_names.push_back("class" + std::to_string(c));
      }
      o.amplitude_scale = sp.value("amplitude_scale", 1.0);
      o.frequency_scale = sp.value("frequency_scale", 1.0);
      o.rotation_rad = sp.value("rotation_rad", 0.0);
      if (sp.contains("gravity")) sp.at("gravity").get_to(o.gravity);
      s.species.push_back(std::move(o));
    }
  }
}

struct SyntheticDataset {
  std::vector<SpeciesInfo> species;
  std::vector<RawRecording> recordings;
};

namespace detail {

inline double motif_value(const Motif& m, double t_since_start, double freq, double phase) {
  const double w = 2.0 * std::numbers::pi * freq * t_since_start + phase;
  switch (m.family) {
    case MotifFamily::SineBurst: return std::sin(w);
    case MotifFamily::SquareBurst: return std::sin(w) >= 0.0 ? 1.0 : -1.0;
    case MotifFamily::DampedOscillation: return std::exp(-m.decay_per_s * t_since_start) * std::sin(w);
  }
  return 0.0;
}

}  // namespace detail

/// Render one window of `class_id` for species `sp`. Burst placement, phase,
/// amplitude and frequency jitter, distractor and noise are drawn from `rng`.
inline std::array<std::vector<double>, 3> render_window(const SyntheticSpec& spec, const SyntheticSpecies& sp,
                                                        std::size_t class_id, std::mt19937_64& rng) {
  const Motif& m = spec.motifs.at(sp.class_motifs.at(class_id));
  const std::size_t n = window_length(sp.rate_hz, spec.window_seconds);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double amp = m.amplitude * (1.0 + spec.amplitude_jitter * (2.0 * unit(rng) - 1.0));
  const double freq = m.frequency_hz * sp.frequency_scale * (1.0 + spec.frequency_jitter * (2.0 * unit(rng) - 1.0));
  const double phase = 2.0 * std::numbers::pi * spec.phase_jitter * unit(rng);
  const double burst = spec.burst_min_s + (spec.burst_max_s - spec.burst_min_s) * unit(rng);
  const double start = (spec.window_seconds - burst) * unit(rng);
  const double d_freq = 0.2 + 0.6 * unit(rng);
  const double d_phase = 2.0 * std::numbers::pi * unit(rng);
  const std::size_t d_axis = static_cast<std::size_t>(rng() % 3);
  const double c = std::cos(sp.rotation_rad), s = std::sin(sp.rotation_rad);
  const std::array<double, 3> axes{c * m.axis_weights[0] - s * m.axis_weights[1],
                                   s * m.axis_weights[0] + c * m.axis_weights[1], m.axis_weights[2]};
  std::array<std::vector<double>, 3> out;
  for (auto& ch : out) ch.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sp.rate_hz;
    const bool on = t >= start && t < start + burst;
    const double v = on ? amp * detail::motif_value(m, t - start, freq, phase) : 0.0;
    const double distractor = spec.distractor_amplitude * std::sin(2.0 * std::numbers::pi * d_freq * t + d_phase);
    for (std::size_t a = 0; a < 3; ++a) {
      out[a][i] = axes[a] * v + (a == d_axis ? distractor : 0.0);
    }
  }
  for (std::size_t a = 0; a < 3; ++a)
    for (double& x : out[a]) {
      const double eps = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise(rng) : 0.0;
      x = sp.gravity[a] + sp.amplitude_scale * (x + eps);
    }
  return out;
}

/// Seeded dataset: each species gets `subjects_per_species` recordings made
/// of back-to-back single-class windows, `windows_per_class` per class in
/// total, so windowing recovers exactly those windows.
inline SyntheticDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  for (std::size_t s = 0; s < spec.species.size(); ++s) {
    const auto& sp = spec.species[s];
    ds.species.push_back({sp.name, sp.class_names});
    std::mt19937_64 rng(mix_seed(spec.seed, s, 0x5EED));
    std::vector<std::size_t> schedule;
    for (std::size_t c = 0; c < sp.class_motifs.size(); ++c)
      for (std::size_t i = 0; i < spec.windows_per_class; ++i) schedule.push_back(c);
    seeded_shuffle(schedule, rng);
    std::vector<RawRecording> recs(spec.subjects_per_species);
    for (std::size_t k = 0; k < recs.size(); ++k) {
      recs[k].species_id = s;
      recs[k].sampling_rate_hz = sp.rate_hz;
      recs[k].subject_id = sp.name + "_subject" + std::to_string(k);
    }
    for (std::size_t i = 0; i < schedule.size(); ++i) {
      RawRecording& rec = recs[i % recs.size()];
      const auto win = render_window(spec, sp, schedule[i], rng);
      for (std::size_t a = 0; a < 3; ++a) rec.channels[a].insert(rec.channels[a].end(), win[a].begin(), win[a].end());
      rec.labels.insert(rec.labels.end(), win[0].size(), static_cast<int>(schedule[i]));
    }
    for (auto& r : recs) {
      if (!r.labels.empty()) ds.recordings.push_back(std::move(r));
    }
  }
  return ds;
}

/// Canonical CSV rows, t in seconds.
inline void write_canonical_csv(const SyntheticDataset& ds, std::ostream& out) {
  out << kCanonicalHeader << '\n';
  out.precision(17);
  for (const auto& rec : ds.recordings) {
    const auto& sp = ds.species.at(rec.species_id);
    for (std::size_t i = 0; i < rec.length(); ++i) {
      out << sp.name << ',' << rec.subject_id << ',' << rec.sampling_rate_hz << ','
          << static_cast<double>(i) / rec.sampling_rate_hz << ','
          << rec.channels[0][i] << ',' << rec.channels[1][i] << ',' << rec.channels[2][i] << ','
          << sp.classes.at(static_cast<std::size_t>(rec.labels[i])) << '\n';
    }
  }
}

inline void write_canonical_csv(const SyntheticDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_canonical_csv(ds, out);
}

/// Windowed and resampled form of a synthetic dataset.
inline WindowSet synthetic_window_set(const SyntheticSpec& spec, std::size_t target_length = kDefaultTargetLength,
                                      PreprocessReport* report = nullptr) {
  SyntheticDataset ds = generate(spec);
  return build_window_set(ds.species, std::move(ds.recordings), spec.window_seconds, target_length, report);
}

}  // namespace cksp
