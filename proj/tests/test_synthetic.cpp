#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>

#include "cksp/folds.hpp"
#include "cksp/ingest.hpp"
#include "cksp/synthetic.hpp"

using namespace cksp;

namespace {

SyntheticSpec small_spec(std::uint64_t seed = 5) {
  SyntheticSpec spec = default_synthetic_spec(seed);
  spec.windows_per_class = 10;
  return spec;
}

SyntheticSpec noiseless(SyntheticSpec spec) {
  spec.noise_sigma = 0.0;
  spec.amplitude_jitter = 0.0;
  spec.frequency_jitter = 0.0;
  spec.phase_jitter = 0.0;
  spec.distractor_amplitude = 0.0;
  spec.burst_min_s = spec.burst_max_s = spec.window_seconds;
  return spec;
}

std::map<std::size_t, std::size_t> per_class(const WindowSet& set, const std::vector<std::size_t>& rows, std::size_t s) {
  std::map<std::size_t, std::size_t> out;
  for (std::size_t r : rows)
    if (set.windows[r].species_id == s) ++out[set.windows[r].label];
  return out;
}

}  // namespace

TEST(SyntheticSpec, DefaultIsValidAndSharesMotifs) {
  const SyntheticSpec spec = default_synthetic_spec();
  EXPECT_NO_THROW(spec.validate());
  ASSERT_EQ(spec.species.size(), 3u);
  std::map<std::size_t, std::size_t> users;
  for (const auto& sp : spec.species)
    for (std::size_t m : sp.class_motifs) ++users[m];
  EXPECT_TRUE(std::any_of(users.begin(), users.end(), [](const auto& kv) { return kv.second >= 2; }));
}

TEST(SyntheticSpec, DegenerateSpecsAreRejected) {
  SyntheticSpec spec = small_spec();
  spec.windows_per_class = 0;
  EXPECT_THROW(generate(spec), std::invalid_argument);
  spec = small_spec();
  spec.species[1].class_motifs.clear();
  spec.species[1].class_names.clear();
  EXPECT_THROW(generate(spec), std::invalid_argument);
  spec = small_spec();
  spec.species.clear();
  EXPECT_THROW(generate(spec), std::invalid_argument);
  spec = small_spec();
  spec.species.resize(2);
  spec.motifs.push_back(spec.motifs.front());
  spec.species[0].class_motifs = {0, 1};
  spec.species[0].class_names = {"x", "y"};
  spec.species[1].class_motifs = {2, 3};
  spec.species[1].class_names = {"x", "y"};
  EXPECT_THROW(generate(spec), std::invalid_argument);
}

TEST(SyntheticSpec, JsonRoundTrip) {
  SyntheticSpec spec = default_synthetic_spec(17);
  spec.noise_sigma = 0.45;
  spec.species[2].rotation_rad = 0.25;
  nlohmann::json j = spec;
  const SyntheticSpec back = j.get<SyntheticSpec>();
  EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
}

TEST(Generate, SameSeedIsBitIdentical) {
  const auto a = generate(small_spec(9)), b = generate(small_spec(9)), c = generate(small_spec(10));
  ASSERT_EQ(a.recordings.size(), b.recordings.size());
  for (std::size_t i = 0; i < a.recordings.size(); ++i) {
    EXPECT_EQ(a.recordings[i].channels, b.recordings[i].channels);
    EXPECT_EQ(a.recordings[i].labels, b.recordings[i].labels);
  }
  EXPECT_NE(a.recordings.front().channels, c.recordings.front().channels);
}

TEST(Generate, NoiselessClassWindowsAreIdentical) {
  const WindowSet set = synthetic_window_set(noiseless(small_spec()));
  std::map<std::pair<std::size_t, std::size_t>, const SampleWindow*> first;
  for (const auto& w : set.windows) {
    auto [it, fresh] = first.try_emplace({w.species_id, w.label}, &w);
    if (!fresh) {
      EXPECT_TRUE(std::equal(w.data.data().begin(), w.data.data().end(), it->second->data.data().begin()));
    }
  }
}

TEST(Generate, NoiselessWindowsDifferAcrossSpeciesOnlyByTransform) {
  SyntheticSpec spec = noiseless(small_spec());
  spec.species.resize(2);
  for (auto& sp : spec.species) {
    sp.rate_hz = 25.0;
    sp.class_motifs = {0, 2};
    sp.class_names = {"a", "b"};
    sp.frequency_scale = 1.0;
    sp.rotation_rad = 0.0;
    sp.gravity = {0.0, 0.0, 1.0};
    sp.amplitude_scale = 1.0;
  }
  spec.species[1].amplitude_scale = 2.0;
  const WindowSet set = synthetic_window_set(spec);
  const SampleWindow* a = nullptr;
  const SampleWindow* b = nullptr;
  for (const auto& w : set.windows) {
    if (w.label != 1) continue;
    (w.species_id == 0 ? a : b) = &w;
  }
  ASSERT_TRUE(a && b);
  const std::size_t len = a->data.dim(2);
  for (std::size_t ax = 0; ax < 3; ++ax) {
    const double g = ax == 2 ? 1.0 : 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      EXPECT_NEAR(b->data[ax * len + t] - g, 2.0 * (a->data[ax * len + t] - g), 1e-12);
    }
  }
}

TEST(Generate, NativeWindowLengthsFollowSamplingRates) {
  SyntheticSpec spec = small_spec();
  spec.species[0].rate_hz = 100.0;
  spec.species[1].rate_hz = 25.0;
  spec.species[2].rate_hz = 12.5;
  const WindowSet set = synthetic_window_set(spec);
  const std::size_t expected[3] = {200, 50, 25};
  for (const auto& w : set.windows) {
    EXPECT_EQ(w.native_length, expected[w.species_id]);
    EXPECT_EQ(w.data.shape(), (Shape{1, 3, 50}));
  }
}

TEST(Generate, WindowingRecoversEveryRenderedWindow) {
  const SyntheticSpec spec = small_spec();
  PreprocessReport report;
  const WindowSet set = synthetic_window_set(spec, 50, &report);
  EXPECT_EQ(report.dropped_windows, 0u);
  for (std::size_t s = 0; s < spec.species.size(); ++s) {
    const auto counts = per_class(set, set.indices_of_species(s), s);
    ASSERT_EQ(counts.size(), spec.species[s].class_motifs.size());
    for (const auto& [c, n] : counts) EXPECT_EQ(n, spec.windows_per_class);
  }
}

TEST(Generate, CanonicalCsvRoundTripsThroughIngest) {
  const SyntheticSpec spec = small_spec(3);
  const SyntheticDataset ds = generate(spec);
  const auto path = std::filesystem::temp_directory_path() / "cksp_synthetic_roundtrip.csv";
  write_canonical_csv(ds, path);
  const IngestResult in = ingest_canonical_csv(path);
  std::filesystem::remove(path);
  ASSERT_EQ(in.species.size(), ds.species.size());
  ASSERT_EQ(in.recordings.size(), ds.recordings.size());
  for (std::size_t i = 0; i < ds.recordings.size(); ++i) {
    const auto& a = ds.recordings[i];
    const auto it = std::find_if(in.recordings.begin(), in.recordings.end(),
                                 [&](const RawRecording& r) { return r.subject_id == a.subject_id; });
    ASSERT_NE(it, in.recordings.end());
    EXPECT_EQ(in.species[it->species_id].name, ds.species[a.species_id].name);
    EXPECT_DOUBLE_EQ(it->sampling_rate_hz, a.sampling_rate_hz);
    ASSERT_EQ(it->length(), a.length());
    for (std::size_t ax = 0; ax < 3; ++ax) EXPECT_EQ(it->channels[ax], a.channels[ax]);
    for (std::size_t t = 0; t < a.length(); ++t) {
      EXPECT_EQ(in.species[it->species_id].classes.at(static_cast<std::size_t>(it->labels[t])),
                ds.species[a.species_id].classes.at(static_cast<std::size_t>(a.labels[t])));
    }
  }
}

TEST(ScarcityView, FullFractionIsIdentity) {
  const WindowSet set = synthetic_window_set(small_spec());
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < set.windows.size(); i += 2) train.push_back(i);
  EXPECT_EQ(scarcity_view(set, train, 1.0, 4), train);
}

TEST(ScarcityView, QuarterOfHundredPerClassKeepsTwentyFive) {
  SyntheticSpec spec = small_spec();
  spec.windows_per_class = 100;
  const WindowSet set = synthetic_window_set(spec);
  std::vector<std::size_t> all(set.windows.size());
  std::iota(all.begin(), all.end(), 0);
  const auto kept = scarcity_view(set, all, 0.25, 8);
  for (std::size_t s = 0; s < spec.species.size(); ++s)
    for (const auto& [c, n] : per_class(set, kept, s)) EXPECT_EQ(n, 25u);
}

TEST(ScarcityView, FractionsAreNested) {
  const WindowSet set = synthetic_window_set(default_synthetic_spec(2));
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < set.windows.size(); ++i)
    if (i % 5 != 0) train.push_back(i);
  std::vector<std::size_t> previous = train;
  for (double f : {0.75, 0.5, 0.25, 0.10}) {
    const auto kept = scarcity_view(set, train, f, 31);
    EXPECT_TRUE(std::includes(previous.begin(), previous.end(), kept.begin(), kept.end())) << f;
    EXPECT_TRUE(std::includes(train.begin(), train.end(), kept.begin(), kept.end()));
    previous = kept;
  }
}

TEST(ScarcityView, RejectsBadFractions) {
  const WindowSet set = synthetic_window_set(small_spec());
  std::vector<std::size_t> train{0, 1, 2};
  EXPECT_THROW(scarcity_view(set, train, 0.0, 0), std::invalid_argument);
  EXPECT_THROW(scarcity_view(set, train, 1.5, 0), std::invalid_argument);
  EXPECT_THROW(scarcity_view(set, train, 0.01, 0), std::invalid_argument);
}
