#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "cksp/model.hpp"

namespace cksp {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kCheckpointFormat = "cksp-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return nlohmann::json{{"shape", t.shape()}, {"data", t.values()}};
}

inline void tensor_from_json(const nlohmann::json& j, const std::string& path, Tensor& dst) {
  const auto shape = j.at("shape").get<Shape>();
  if (shape != dst.shape()) {
    throw CheckpointError("tensor '" + path + "' has shape " + shape_str(shape) + ", model expects " +
                          shape_str(dst.shape()));
  }
  const auto& data = j.at("data");
  if (!data.is_array() || data.size() != dst.numel()) throw CheckpointError("tensor '" + path + "' has wrong size");
  for (std::size_t i = 0; i < dst.numel(); ++i) {
    if (!data[i].is_number()) throw CheckpointError("tensor '" + path + "' holds a non-numeric value");
    dst[i] = data[i].get<double>();
  }
}

}  // namespace detail

/// Serialize config, parameters and running statistics. `extra` carries
/// caller metadata (e.g. the input standardizer) verbatim.
inline nlohmann::json checkpoint_to_json(CkspModel& model, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json params = nlohmann::json::object();
  model.visit_parameters([&](const std::string& path, Tensor& t, ParamKind) { params[path] = detail::tensor_to_json(t); });
  nlohmann::json buffers = nlohmann::json::object();
  model.visit_buffers([&](const std::string& path, Tensor& t) { buffers[path] = detail::tensor_to_json(t); });
  return nlohmann::json{{"format", kCheckpointFormat},
                        {"version", kCheckpointVersion},
                        {"config", model.config()},
                        {"parameters", std::move(params)},
                        {"buffers", std::move(buffers)},
                        {"extra", extra}};
}

/// Copy tensors from a checkpoint document into an existing model; every
/// path must be present on both sides.
inline void load_state(CkspModel& model, const nlohmann::json& doc) {
  auto load_group = [&](const char* group, auto&& visit) {
    const auto& g = doc.at(group);
    std::size_t seen = 0;
    visit([&](const std::string& path, Tensor& t) {
      if (!g.contains(path)) throw CheckpointError(std::string(group) + " entry '" + path + "' missing from checkpoint");
      detail::tensor_from_json(g.at(path), path, t);
      ++seen;
    });
    if (seen != g.size()) throw CheckpointError(std::string("checkpoint has unknown ") + group + " entries");
  };
  load_group("parameters", [&](auto&& fn) {
    model.visit_parameters([&](const std::string& p, Tensor& t, ParamKind) { fn(p, t); });
  });
  load_group("buffers", [&](auto&& fn) { model.visit_buffers(fn); });
}

inline CkspModel model_from_checkpoint(const nlohmann::json& doc) {
  if (doc.value("format", "") != kCheckpointFormat) throw CheckpointError("not a CKSP checkpoint");
  if (doc.value("version", 0) != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
  CkspModel model(doc.at("config").get<ModelConfig>());
  load_state(model, doc);
  return model;
}

inline void save_checkpoint(CkspModel& model, const std::filesystem::path& path,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out << checkpoint_to_json(model, extra).dump();
}

inline nlohmann::json read_checkpoint_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

inline CkspModel load_checkpoint(const std::filesystem::path& path) {
  return model_from_checkpoint(read_checkpoint_json(path));
}

}  // namespace cksp
