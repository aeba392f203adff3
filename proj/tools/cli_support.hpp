#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cksp/archive.hpp"
#include "cksp/experiment.hpp"

#ifndef CKSP_VERSION
#define CKSP_VERSION "0.0.0"
#endif
#ifndef CKSP_GIT_REVISION
#define CKSP_GIT_REVISION "unknown"
#endif

namespace cksp::cli {

/// Bad input from the user: missing files, malformed configs, unknown keys.
/// Mapped to exit code 2.
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string version_string() { return std::string(CKSP_VERSION) + "+" + CKSP_GIT_REVISION; }

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UserError(path.string() + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string file_hash(const std::filesystem::path& path) {
  try {
    return hex64(fnv1a64(detail::read_file_bytes(path)));
  } catch (const ArchiveError& e) {
    throw UserError(e.what());
  }
}

namespace detail {

inline void check_known_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix) {
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!known.contains(key)) throw UserError("unknown config key '" + path + "'");
    if (value.is_object() && known.at(key).is_object()) check_known_keys(value, known.at(key), path);
  }
}

inline nlohmann::json parse_override_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    return text;
  }
}

}  // namespace detail

/// Every accepted config key with its default value.
inline nlohmann::json default_config_json() {
  nlohmann::json j = ExperimentConfig{};
  j["rotations"] = nlohmann::json::array();
  return j;
}

/// Apply `section.key=value` overrides (value parsed as JSON, else taken as
/// a string) on top of a config document.
inline nlohmann::json apply_overrides(nlohmann::json config, const std::vector<std::string>& overrides) {
  const nlohmann::json known = default_config_json();
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UserError("override '" + o + "' is not of the form key=value");
    std::string pointer = "/" + o.substr(0, eq);
    for (char& c : pointer)
      if (c == '.') c = '/';
    const nlohmann::json::json_pointer ptr(pointer);
    if (!known.contains(ptr)) throw UserError("unknown config key '" + o.substr(0, eq) + "'");
    config[ptr] = detail::parse_override_value(o.substr(eq + 1));
  }
  return config;
}

struct LoadedConfig {
  ExperimentConfig experiment;
  std::vector<std::size_t> rotations;
  nlohmann::json echo;  // resolved config, all keys
};

/// Config file (optional) merged with overrides, validated against the key set.
inline LoadedConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json doc = path.empty() ? nlohmann::json::object() : read_json_file(path);
  if (!doc.is_object()) throw UserError("config must be a JSON object");
  detail::check_known_keys(doc, default_config_json(), "");
  doc = apply_overrides(std::move(doc), overrides);
  LoadedConfig out;
  try {
    out.experiment = doc.get<ExperimentConfig>();
    if (doc.contains("rotations")) doc.at("rotations").get_to(out.rotations);
    out.experiment.train.validate();
  } catch (const nlohmann::json::exception& e) {
    throw UserError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw UserError(std::string("config: ") + e.what());
  }
  for (std::size_t r : out.rotations) {
    if (r >= out.experiment.folds) throw UserError("rotation " + std::to_string(r) + " is not below folds");
  }
  out.echo = out.experiment;
  out.echo["rotations"] = out.rotations;
  return out;
}

/// Manifest written next to every artifact set. Only the two timestamps
/// vary between identical invocations.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, content hash
  std::vector<std::string> outputs;
  std::string started_at = utc_timestamp();
  std::string finished_at;

  nlohmann::json to_json() const {
    nlohmann::json in = nlohmann::json::array();
    for (const auto& [p, h] : inputs) in.push_back({{"path", p}, {"fnv1a64", h}});
    return {{"command", command}, {"config", config},          {"seed", seed},
            {"version", version_string()}, {"inputs", in}, {"outputs", outputs},
            {"started_at", started_at},    {"finished_at", finished_at}};
  }

  void write(const std::filesystem::path& path) {
    finished_at = utc_timestamp();
    write_json(path, to_json());
  }
};

/// Read and merge one or more window archives.
inline WindowSet load_archives(const std::vector<std::string>& paths, RunManifest& manifest) {
  std::vector<WindowSet> parts;
  for (const auto& p : paths) {
    try {
      parts.push_back(read_archive(p));
    } catch (const ArchiveError& e) {
      throw UserError(e.what());
    }
    manifest.inputs.emplace_back(p, file_hash(p));
  }
  WindowSet data;
  try {
    data = parts.size() == 1 ? std::move(parts.front()) : merge_window_sets(parts);
  } catch (const ArchiveError& e) {
    throw UserError(e.what());
  }
  if (data.windows.empty()) throw UserError("no windows in the given archives");
  return data;
}

}  // namespace cksp::cli
