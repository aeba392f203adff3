#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cksp/preprocessing.hpp"

namespace cksp {

/// Input data problems (bad files, malformed rows). Messages carry file and
/// line context where available.
class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PublicDataset { Horse, Sheep, Cattle };

inline std::string to_string(PublicDataset kind) {
  switch (kind) {
    case PublicDataset::Horse: return "horse";
    case PublicDataset::Sheep: return "sheep";
    case PublicDataset::Cattle: return "cattle";
  }
  return "unknown";
}

inline std::optional<PublicDataset> parse_public_dataset(std::string_view name) {
  if (name == "horse") return PublicDataset::Horse;
  if (name == "sheep") return PublicDataset::Sheep;
  if (name == "cattle") return PublicDataset::Cattle;
  return std::nullopt;
}

/// Class table and raw-activity mapping for one of the public datasets.
struct ActivityMap {
  SpeciesInfo species;
  double sampling_rate_hz = 0.0;
  std::map<std::string, std::size_t> raw_to_class;

  std::optional<std::size_t> lookup(const std::string& raw) const {
    auto it = raw_to_class.find(raw);
    if (it == raw_to_class.end()) return std::nullopt;
    return it->second;
  }
};

inline ActivityMap activity_map(PublicDataset kind) {
  ActivityMap m;
  switch (kind) {
    case PublicDataset::Horse:
      m.species = {"horse", {"grazing", "galloping", "standing", "trotting", "walking"}};
      m.sampling_rate_hz = 100.0;
      m.raw_to_class = {{"grazing", 0},          {"galloping", 1},      {"galloping-natural", 1},
                        {"galloping-rider", 1},  {"standing", 2},       {"trotting", 3},
                        {"trotting-natural", 3}, {"trotting-rider", 3}, {"walking", 4},
                        {"walking-natural", 4},  {"walking-rider", 4}};
      break;
    case PublicDataset::Sheep:
      m.species = {"sheep", {"grazing", "active", "inactive"}};
      m.sampling_rate_hz = 12.5;
      m.raw_to_class = {{"grazing", 0},  {"active", 1},   {"walking", 1}, {"scratching", 1},
                        {"inactive", 2}, {"standing", 2}, {"resting", 2}};
      break;
    case PublicDataset::Cattle:
      m.species = {"cattle", {"grazing", "moving", "resting", "ruminating", "salting"}};
      m.sampling_rate_hz = 25.0;
      m.raw_to_class = {{"grazing", 0}, {"moving", 1}, {"resting", 2}, {"ruminating", 3}, {"salting", 4}};
      break;
  }
  return m;
}

struct IngestReport {
  std::map<std::string, std::size_t> recordings;                         // species -> recordings
  std::map<std::string, std::size_t> rows;                               // species -> rows kept
  std::map<std::string, std::map<std::string, std::size_t>> class_rows;  // species -> class -> rows
  std::map<std::string, std::size_t> excluded_rows;                      // raw label -> rows
  PreprocessReport windows;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["recordings"] = recordings;
    j["rows"] = rows;
    j["class_rows"] = class_rows;
    j["excluded_rows"] = excluded_rows;
    j["windows_per_class"] = windows.windows_per_class;
    j["dropped_windows"] = windows.dropped_windows;
    return j;
  }
};

struct IngestResult {
  std::vector<SpeciesInfo> species;
  std::vector<RawRecording> recordings;
  IngestReport report;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line) + ": ";
}

/// Finds the first header column matching any of the aliases (case-insensitive).
inline std::optional<std::size_t> find_column(const std::vector<std::string>& header,
                                              std::initializer_list<std::string_view> aliases) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string h = lower(header[i]);
    for (auto a : aliases) {
      if (h == a) return i;
    }
  }
  return std::nullopt;
}

/// Orders label strings numerically when they are all integers, lexically otherwise.
inline std::vector<std::string> sorted_labels(const std::set<std::string>& labels) {
  std::vector<std::string> out(labels.begin(), labels.end());
  const bool numeric = std::all_of(out.begin(), out.end(), [](const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
  });
  if (numeric) {
    std::sort(out.begin(), out.end(), [](const std::string& a, const std::string& b) {
      return a.size() != b.size() ? a.size() < b.size() : a < b;
    });
  }
  return out;
}

}  // namespace detail

inline constexpr std::string_view kCanonicalHeader = "species,subject,rate_hz,t,ax,ay,az,label";

/// Read the canonical CSV (`species,subject,rate_hz,t,ax,ay,az,label`).
/// Rows are grouped by (species, subject); t must increase strictly within a
/// group in file order. Species named horse/sheep/cattle use the built-in
/// class tables; any other species gets its sorted distinct labels.
inline IngestResult ingest_canonical_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IngestError(path.string() + ": file is empty (missing header)");
  const auto header = detail::split_csv_line(line);
  const std::vector<std::string> required{"species", "subject", "rate_hz", "t", "ax", "ay", "az", "label"};
  std::vector<std::size_t> col(required.size());
  for (std::size_t i = 0; i < required.size(); ++i) {
    auto it = std::find(header.begin(), header.end(), required[i]);
    if (it == header.end()) throw IngestError(detail::where(path, 1) + "missing column '" + required[i] + "'");
    col[i] = static_cast<std::size_t>(it - header.begin());
  }
  const std::size_t max_col = *std::max_element(col.begin(), col.end());

  struct Row {
    double t, ax, ay, az, rate;
    std::string label;
    std::size_t line;
  };
  std::map<std::pair<std::string, std::string>, std::vector<Row>> groups;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() <= max_col) {
      throw IngestError(detail::where(path, lineno) + "expected " + std::to_string(header.size()) + " fields, got " +
                        std::to_string(f.size()));
    }
    Row r{};
    const char* names[] = {"rate_hz", "t", "ax", "ay", "az"};
    double* dst[] = {&r.rate, &r.t, &r.ax, &r.ay, &r.az};
    const std::size_t idx[] = {col[2], col[3], col[4], col[5], col[6]};
    for (int k = 0; k < 5; ++k) {
      auto v = detail::parse_double(f[idx[k]]);
      if (!v) throw IngestError(detail::where(path, lineno) + "cannot parse " + names[k] + " value '" + f[idx[k]] + "'");
      *dst[k] = *v;
    }
    if (!(r.rate > 0.0)) throw IngestError(detail::where(path, lineno) + "rate_hz must be positive");
    if (f[col[0]].empty()) throw IngestError(detail::where(path, lineno) + "empty species");
    r.label = f[col[7]];
    r.line = lineno;
    auto& group = groups[{f[col[0]], f[col[1]]}];
    if (!group.empty()) {
      if (!(r.t > group.back().t)) {
        throw IngestError(detail::where(path, lineno) + "non-monotone t in group (species=" + f[col[0]] +
                          ", subject=" + f[col[1]] + ")");
      }
      if (r.rate != group.back().rate) {
        throw IngestError(detail::where(path, lineno) + "rate_hz changes within group (species=" + f[col[0]] +
                          ", subject=" + f[col[1]] + ")");
      }
    }
    group.push_back(std::move(r));
  }

  // Species tables, in sorted name order.
  std::map<std::string, std::set<std::string>> labels_by_species;
  for (const auto& [key, rows] : groups) {
    auto& labels = labels_by_species[key.first];
    for (const Row& r : rows) labels.insert(r.label);
  }
  IngestResult result;
  std::map<std::string, std::size_t> species_index;
  std::map<std::string, std::optional<ActivityMap>> builtin;
  for (const auto& [name, labels] : labels_by_species) {
    species_index[name] = result.species.size();
    if (auto kind = parse_public_dataset(name)) {
      builtin[name] = activity_map(*kind);
      result.species.push_back(builtin[name]->species);
    } else {
      builtin[name] = std::nullopt;
      result.species.push_back({name, detail::sorted_labels(labels)});
    }
  }
  for (auto& [key, rows] : groups) {
    const std::size_t s = species_index.at(key.first);
    const SpeciesInfo& info = result.species[s];
    RawRecording rec;
    rec.species_id = s;
    rec.subject_id = key.second;
    rec.sampling_rate_hz = rows.front().rate;
    for (const Row& r : rows) {
      rec.channels[0].push_back(r.ax);
      rec.channels[1].push_back(r.ay);
      rec.channels[2].push_back(r.az);
      int label = kExcludedLabel;
      if (const auto& map = builtin.at(key.first)) {
        if (auto c = map->lookup(detail::lower(r.label))) label = static_cast<int>(*c);
      } else {
        auto it = std::find(info.classes.begin(), info.classes.end(), r.label);
        label = static_cast<int>(it - info.classes.begin());
      }
      if (label == kExcludedLabel) {
        ++result.report.excluded_rows[r.label];
      } else {
        ++result.report.rows[info.name];
        ++result.report.class_rows[info.name][info.classes[static_cast<std::size_t>(label)]];
      }
      rec.labels.push_back(label);
    }
    ++result.report.recordings[info.name];
    result.recordings.push_back(std::move(rec));
  }
  return result;
}

/// Read one of the public releases laid out as a directory of per-subject
/// CSV files (searched recursively). Each file needs a header with the three
/// accelerometer axes and an activity column; other columns are ignored.
/// Activities outside the species' class set are excluded and counted.
inline IngestResult ingest_public_dataset(PublicDataset kind, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IngestError("dataset directory not found: " + dir.string());
  const ActivityMap map = activity_map(kind);
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && detail::lower(entry.path().extension().string()) == ".csv") {
      files.push_back(entry.path());
    }
  }
  if (files.empty()) throw IngestError("no CSV files under " + dir.string());
  std::sort(files.begin(), files.end());

  IngestResult result;
  result.species.push_back(map.species);
  for (const fs::path& file : files) {
    std::ifstream in(file);
    if (!in) throw IngestError("cannot open " + file.string());
    std::string line;
    if (!std::getline(in, line)) continue;
    const auto header = detail::split_csv_line(line);
    const auto cx = detail::find_column(header, {"ax", "accx", "acc_x", "accelerometer_x", "x"});
    const auto cy = detail::find_column(header, {"ay", "accy", "acc_y", "accelerometer_y", "y"});
    const auto cz = detail::find_column(header, {"az", "accz", "acc_z", "accelerometer_z", "z"});
    const auto cl = detail::find_column(header, {"label", "activity", "behaviour", "behavior"});
    if (!cx || !cy || !cz || !cl) {
      throw IngestError(detail::where(file, 1) + "header needs accelerometer x/y/z and label columns");
    }
    const std::size_t need = std::max({*cx, *cy, *cz, *cl});
    RawRecording rec;
    rec.species_id = 0;
    rec.sampling_rate_hz = map.sampling_rate_hz;
    rec.subject_id = fs::relative(file, dir).replace_extension().generic_string();
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (detail::trim(line).empty()) continue;
      auto f = detail::split_csv_line(line);
      if (f.size() <= need) throw IngestError(detail::where(file, lineno) + "too few fields");
      const std::size_t cols[] = {*cx, *cy, *cz};
      for (std::size_t a = 0; a < kAxes; ++a) {
        auto p = detail::parse_double(f[cols[a]]);
        if (!p) throw IngestError(detail::where(file, lineno) + "cannot parse acceleration '" + f[cols[a]] + "'");
        rec.channels[a].push_back(*p);
      }
      const std::string raw = detail::lower(f[*cl]);
      if (auto c = map.lookup(raw)) {
        rec.labels.push_back(static_cast<int>(*c));
        ++result.report.rows[map.species.name];
        ++result.report.class_rows[map.species.name][map.species.classes[*c]];
      } else {
        rec.labels.push_back(kExcludedLabel);
        ++result.report.excluded_rows[raw.empty() ? "(empty)" : raw];
      }
    }
    if (rec.length() == 0) continue;
    ++result.report.recordings[map.species.name];
    result.recordings.push_back(std::move(rec));
  }
  return result;
}

}  // namespace cksp
