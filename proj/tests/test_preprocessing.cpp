#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "cksp/archive.hpp"
#include "cksp/ingest.hpp"
#include "cksp/preprocessing.hpp"

using namespace cksp;
namespace fs = std::filesystem;

namespace {

RawRecording recording(double rate, std::size_t n, int label = 0) {
  RawRecording r;
  r.sampling_rate_hz = rate;
  r.subject_id = "s";
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < kAxes; ++a) r.channels[a].push_back(static_cast<double>(i) + 0.1 * static_cast<double>(a));
    r.labels.push_back(label);
  }
  return r;
}

Tensor ramp_window(std::size_t n, double slope, double offset) {
  Tensor t({1, 3, n});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) t[c * n + i] = slope * (static_cast<double>(c) + 1.0) * static_cast<double>(i) + offset;
  return t;
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("cksp_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path write(const std::string& name, const std::string& content) const {
    fs::path p = path_ / name;
    fs::create_directories(p.parent_path());
    std::ofstream(p) << content;
    return p;
  }

 private:
  fs::path path_;
};

}  // namespace

TEST(Window, NonOverlappingCounts) {
  auto w = window(recording(100.0, 600));
  ASSERT_EQ(w.windows.size(), 3u);
  for (const auto& rw : w.windows) EXPECT_EQ(rw.data.shape(), (Shape{1, 3, 200}));
  EXPECT_EQ(w.windows[1].data[0], 200.0);

  auto sheep = window(recording(12.5, 25));
  ASSERT_EQ(sheep.windows.size(), 1u);
  EXPECT_EQ(sheep.windows[0].data.dim(2), 25u);

  // Trailing partial window is dropped: floor(len / window_len).
  for (std::size_t n : {49u, 50u, 99u, 151u}) EXPECT_EQ(window(recording(25.0, n)).windows.size(), n / 50);
}

TEST(Window, MajorityLabel) {
  EXPECT_EQ(majority_label(std::vector<int>{0, 0, 1}), 0);
  EXPECT_EQ(majority_label(std::vector<int>{2, 1, 1, 2}), 1);  // tie -> lowest id
  EXPECT_EQ(majority_label(std::vector<int>{-1, -1, 3}), kExcludedLabel);
  EXPECT_EQ(majority_label(std::vector<int>{-1, 3}), 3);

  RawRecording r = recording(1.5, 3);
  r.labels = {0, 0, 1};
  auto w = window(r, 2.0);
  ASSERT_EQ(w.windows.size(), 1u);
  EXPECT_EQ(w.windows[0].label, 0u);

  r.labels = {-1, -1, 1};
  auto dropped = window(r, 2.0);
  EXPECT_TRUE(dropped.windows.empty());
  EXPECT_EQ(dropped.dropped, 1u);
}

TEST(Window, EmptyRecordingIsAnError) {
  RawRecording r;
  r.sampling_rate_hz = 25.0;
  EXPECT_THROW(window(r), std::invalid_argument);
}

TEST(Resample, NativeLengthsMapToFifty) {
  for (std::size_t n : {200u, 25u, 50u}) {
    Tensor out = resample_to_50(ramp_window(n, 0.3, -1.0));
    EXPECT_EQ(out.shape(), (Shape{1, 3, 50}));
  }
}

TEST(Resample, IdentityAtFifty) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Tensor t({1, 3, 50});
  for (double& v : t.values()) v = g(rng);
  EXPECT_EQ(max_abs_diff(resample_to_50(t).data(), t.data()), 0.0);
}

TEST(Resample, ExactOnAffineSignals) {
  for (std::size_t n : {2u, 7u, 25u, 49u, 51u, 200u, 333u}) {
    Tensor in = ramp_window(n, 1.0, 0.0);
    Tensor out = resample(in, 50);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 50; ++j) {
        const double pos = static_cast<double>(j) * static_cast<double>(n - 1) / 49.0;
        EXPECT_NEAR(out[c * 50 + j], (static_cast<double>(c) + 1.0) * pos, 1e-12) << "n=" << n;
      }
  }
}

TEST(Resample, EndpointsAndConvexBounds) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::uniform_int_distribution<std::size_t> len(2, 300);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = len(rng);
    Tensor in({1, 3, n});
    for (double& v : in.values()) v = u(rng);
    Tensor out = resample(in, 50);
    for (std::size_t c = 0; c < 3; ++c) {
      const double* x = &in.data()[c * n];
      const double* y = &out.data()[c * 50];
      EXPECT_EQ(y[0], x[0]);
      EXPECT_EQ(y[49], x[n - 1]);
      const auto [mn, mx] = std::minmax_element(x, x + n);
      for (std::size_t j = 0; j < 50; ++j) {
        EXPECT_GE(y[j], *mn);
        EXPECT_LE(y[j], *mx);
        EXPECT_TRUE(std::isfinite(y[j]));
      }
    }
  }
}

TEST(Resample, RejectsShortInput) { EXPECT_THROW(resample(Tensor({1, 3, 1}), 50), ShapeError); }

TEST(Standardizer, ZeroMeanUnitVariance) {
  WindowSet set;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(3.0, 2.0);
  for (int i = 0; i < 10; ++i) {
    SampleWindow w;
    w.data = Tensor({1, 3, 50});
    for (double& v : w.data.values()) v = g(rng);
    set.windows.push_back(w);
  }
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), 0);
  auto st = Standardizer::fit(set, idx);
  std::array<double, 3> sum{}, sq{};
  for (const auto& w : set.windows) {
    Tensor z = st.apply(w.data);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t j = 0; j < 50; ++j) {
        sum[a] += z[a * 50 + j];
        sq[a] += z[a * 50 + j] * z[a * 50 + j];
      }
  }
  for (std::size_t a = 0; a < 3; ++a) {
    EXPECT_NEAR(sum[a] / 500.0, 0.0, 1e-12);
    EXPECT_NEAR(sq[a] / 500.0, 1.0, 1e-12);
  }
}

TEST(CanonicalCsv, TwoRowFile) {
  TempDir dir;
  auto p = dir.write("a.csv", "species,subject,rate_hz,t,ax,ay,az,label\n"
                              "goat,g1,25,0.00,0.1,0.2,0.3,walk\n"
                              "goat,g1,25,0.04,0.4,0.5,0.6,walk\n");
  auto r = ingest_canonical_csv(p);
  ASSERT_EQ(r.recordings.size(), 1u);
  EXPECT_EQ(r.recordings[0].length(), 2u);
  EXPECT_EQ(r.recordings[0].channels[2][1], 0.6);
  ASSERT_EQ(r.species.size(), 1u);
  EXPECT_EQ(r.species[0].classes, std::vector<std::string>{"walk"});
}

TEST(CanonicalCsv, EmptyAfterHeader) {
  TempDir dir;
  auto p = dir.write("a.csv", "species,subject,rate_hz,t,ax,ay,az,label\n");
  auto r = ingest_canonical_csv(p);
  EXPECT_TRUE(r.recordings.empty());
  EXPECT_TRUE(r.species.empty());
}

TEST(CanonicalCsv, ShuffledTimeNamesGroup) {
  TempDir dir;
  auto p = dir.write("a.csv", "species,subject,rate_hz,t,ax,ay,az,label\n"
                              "goat,g1,25,0.04,0,0,0,walk\n"
                              "goat,g2,25,0.00,0,0,0,walk\n"
                              "goat,g1,25,0.00,0,0,0,walk\n");
  try {
    ingest_canonical_csv(p);
    FAIL() << "expected monotonicity error";
  } catch (const IngestError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-monotone"), std::string::npos);
    EXPECT_NE(msg.find("subject=g1"), std::string::npos);
    EXPECT_NE(msg.find(":4:"), std::string::npos);
  }
}

TEST(CanonicalCsv, MalformedInput) {
  TempDir dir;
  EXPECT_THROW(ingest_canonical_csv(dir.write("m.csv", "species,subject,t,ax,ay,az,label\n")), IngestError);
  try {
    ingest_canonical_csv(dir.write("n.csv", "species,subject,rate_hz,t,ax,ay,az,label\n"
                                            "goat,g1,25,0.0,abc,0,0,walk\n"));
    FAIL();
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  EXPECT_THROW(ingest_canonical_csv(dir.path() / "missing.csv"), IngestError);
}

TEST(CanonicalCsv, BuiltinSpeciesUseActivityMaps) {
  TempDir dir;
  auto p = dir.write("a.csv", "species,subject,rate_hz,t,ax,ay,az,label\n"
                              "sheep,s1,12.5,0.00,0,0,0,scratching\n"
                              "sheep,s1,12.5,0.08,0,0,0,resting\n"
                              "sheep,s1,12.5,0.16,0,0,0,flying\n");
  auto r = ingest_canonical_csv(p);
  ASSERT_EQ(r.species.size(), 1u);
  EXPECT_EQ(r.species[0].name, "sheep");
  EXPECT_EQ(r.recordings[0].labels, (std::vector<int>{1, 2, kExcludedLabel}));
  EXPECT_EQ(r.report.excluded_rows.at("flying"), 1u);
}

TEST(PublicDataset, SheepMergesActivities) {
  TempDir dir;
  dir.write("sheep/s01.csv", "timestamp,ax,ay,az,label\n"
                             "0,1,2,3,scratching\n"
                             "1,1,2,3,walking\n"
                             "2,1,2,3,Resting\n"
                             "3,1,2,3,standing\n"
                             "4,1,2,3,grazing\n");
  auto r = ingest_public_dataset(PublicDataset::Sheep, dir.path() / "sheep");
  ASSERT_EQ(r.recordings.size(), 1u);
  EXPECT_EQ(r.recordings[0].sampling_rate_hz, 12.5);
  EXPECT_EQ(r.recordings[0].labels, (std::vector<int>{1, 1, 2, 2, 0}));
  EXPECT_EQ(r.species[0].classes, (std::vector<std::string>{"grazing", "active", "inactive"}));
}

TEST(PublicDataset, HorseExcludesOtherActivitiesAndCountsThem) {
  TempDir dir;
  std::string body = "Ax,Ay,Az,Gx,Gy,Gz,label\n";
  for (int i = 0; i < 200; ++i) body += "0.1,0.2,0.3,0,0,0,walking-rider\n";
  for (int i = 0; i < 200; ++i) body += "0.1,0.2,0.3,0,0,0,head-shake\n";
  dir.write("horse/subject_1.csv", body);
  auto r = ingest_public_dataset(PublicDataset::Horse, dir.path() / "horse");
  EXPECT_EQ(r.report.excluded_rows.at("head-shake"), 200u);
  EXPECT_EQ(r.report.class_rows.at("horse").at("walking"), 200u);
  PreprocessReport pre;
  WindowSet set = build_window_set(r.species, r.recordings, 2.0, 50, &pre);
  ASSERT_EQ(set.windows.size(), 1u);
  EXPECT_EQ(set.windows[0].native_length, 200u);
  EXPECT_EQ(set.windows[0].label, 4u);
  EXPECT_EQ(pre.dropped_windows, 1u);
}

TEST(PublicDataset, MissingDirectory) {
  EXPECT_THROW(ingest_public_dataset(PublicDataset::Cattle, "/nonexistent/cattle"), IngestError);
}

TEST(Pipeline, IngestWindowResampleYieldsFiniteFixedShape) {
  TempDir dir;
  std::string body = "species,subject,rate_hz,t,ax,ay,az,label\n";
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  for (int i = 0; i < 1000; ++i) {
    body += "horse,h1,100," + std::to_string(i * 0.01) + "," + std::to_string(g(rng)) + "," + std::to_string(g(rng)) +
            "," + std::to_string(g(rng)) + "," + (i < 500 ? "grazing" : "trotting") + "\n";
  }
  for (int i = 0; i < 100; ++i) {
    body += "cattle,c1,25," + std::to_string(i * 0.04) + ",1,2,3,ruminating\n";
  }
  auto r = ingest_canonical_csv(dir.write("p.csv", body));
  WindowSet set = build_window_set(r.species, r.recordings, 2.0, 50);
  ASSERT_EQ(set.windows.size(), 5u + 2u);
  for (const auto& w : set.windows) {
    EXPECT_EQ(w.data.shape(), (Shape{1, 3, 50}));
    EXPECT_TRUE(w.data.is_finite());
  }
  // Species sorted by name: cattle first.
  EXPECT_EQ(set.species[0].name, "cattle");
  EXPECT_EQ(set.windows.front().species_id, 0u);
}

TEST(Archive, RoundTripIsBitExact) {
  WindowSet set;
  set.species = {{"a", {"x", "y"}}, {"b", {"p", "q", "r"}}};
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  for (int i = 0; i < 7; ++i) {
    SampleWindow w;
    w.data = Tensor({1, 3, 50});
    for (double& v : w.data.values()) v = g(rng);
    w.species_id = static_cast<std::size_t>(i % 2);
    w.label = static_cast<std::size_t>(i % 2);
    w.subject_id = "subj" + std::to_string(i);
    w.native_length = 25 + static_cast<std::size_t>(i);
    set.windows.push_back(w);
  }
  TempDir dir;
  write_archive(set, dir.path() / "w.bin");
  WindowSet back = read_archive(dir.path() / "w.bin");
  ASSERT_EQ(back.windows.size(), set.windows.size());
  EXPECT_EQ(back.species[1].classes, set.species[1].classes);
  for (std::size_t i = 0; i < set.windows.size(); ++i) {
    EXPECT_EQ(back.windows[i].subject_id, set.windows[i].subject_id);
    EXPECT_EQ(back.windows[i].native_length, set.windows[i].native_length);
    EXPECT_EQ(std::memcmp(back.windows[i].data.data().data(), set.windows[i].data.data().data(), 150 * sizeof(double)), 0);
  }
  auto bytes = encode_archive(set);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "CKSPWARC");
  bytes[0] = 'X';
  EXPECT_THROW(decode_archive(bytes), ArchiveError);
  auto truncated = encode_archive(set);
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(decode_archive(truncated), ArchiveError);
}
