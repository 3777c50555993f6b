#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgstyle/config.hpp"
#include "dgstyle/model.hpp"
#include "dgstyle/srm_fl.hpp"

namespace dgstyle {

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

/// Tensor as {shape, dtype, data}; data holds the raw little-endian bytes so
/// a save/load round trip is bit-exact.
template <typename T>
nlohmann::json tensor_to_json(const Tensor<T>& t) {
  std::vector<std::uint8_t> bytes(t.size() * sizeof(T));
  if (!bytes.empty()) std::memcpy(bytes.data(), t.data().data(), bytes.size());
  return {{"shape", t.shape()}, {"dtype", dtype_name<T>()}, {"data", nlohmann::json::binary(std::move(bytes))}};
}

template <typename T>
void tensor_from_json(const nlohmann::json& j, const Tensor<T>& dst, const std::string& name) {
  if (j.at("dtype").get<std::string>() != dtype_name<T>()) {
    throw IoError("checkpoint: tensor '" + name + "' has dtype " + j.at("dtype").get<std::string>());
  }
  if (j.at("shape").get<Shape>() != dst.shape()) {
    throw ShapeError("checkpoint: tensor '" + name + "' has shape " + to_string(j.at("shape").get<Shape>()) +
                     ", expected " + to_string(dst.shape()));
  }
  const auto& bytes = j.at("data").get_binary();
  if (bytes.size() != dst.size() * sizeof(T)) throw IoError("checkpoint: tensor '" + name + "' truncated");
  if (!bytes.empty()) std::memcpy(dst.mutable_data().data(), bytes.data(), bytes.size());
}

template <typename T>
nlohmann::json values_to_json(const std::vector<T>& v) {
  return tensor_to_json(Tensor<T>({v.size()}, v));
}

template <typename T>
struct Checkpoint {
  TrainConfig config;
  ModelState<T> state;
  std::optional<StyleNets<T>> nets;
};

template <typename T>
nlohmann::json checkpoint_to_json(const TrainConfig& cfg, const ModelState<T>& state, const StyleNets<T>* nets) {
  nlohmann::json j;
  j["format"] = "dgstyle-checkpoint-1";
  j["config"] = cfg;
  j["step"] = state.step;
  auto dump_params = [](const ModelParams<T>& p) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [name, t] : p.named_parameters()) out[name] = tensor_to_json(t);
    return out;
  };
  j["live"] = dump_params(state.live);
  j["ema"] = dump_params(state.ema);
  j["running"] = nlohmann::json::object();
  for (std::size_t s = 0; s < kStages; ++s)
    for (std::size_t b = 0; b < state.running[s].size(); ++b) {
      const auto& rs = state.running[s][b];
      if (rs.mean.empty()) continue;
      const auto prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      j["running"][prefix + ".mean"] = values_to_json(rs.mean);
      j["running"][prefix + ".var"] = values_to_json(rs.var);
    }
  if (nets) {
    j["style_nets"] = nlohmann::json::object();
    for (const auto& [name, t] : nets->named_parameters()) j["style_nets"][name] = tensor_to_json(t);
  } else {
    j["style_nets"] = nullptr;
  }
  return j;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const ModelState<T>& state,
                     const StyleNets<T>* nets) {
  const auto bytes = nlohmann::json::to_cbor(checkpoint_to_json(cfg, state, nets));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("checkpoint: write failed for " + path.string());
}

inline nlohmann::json read_checkpoint_json(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::from_cbor(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: " + path.string() + " is not a valid checkpoint (" + e.what() + ")");
  }
  if (!j.is_object() || j.value("format", "") != "dgstyle-checkpoint-1") {
    throw IoError("checkpoint: unknown format in " + path.string());
  }
  return j;
}

/// Precision recorded in a checkpoint's config, so callers can pick T.
inline Precision checkpoint_precision(const std::filesystem::path& path) {
  return read_checkpoint_json(path).at("config").get<TrainConfig>().precision;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const auto j = read_checkpoint_json(path);
  Checkpoint<T> ck;
  ck.config = j.at("config").get<TrainConfig>();
  Rng scratch(0);
  ck.state = model_init<T>(ck.config.backbone, scratch);
  ck.state.step = j.at("step").get<std::uint64_t>();
  auto load_params = [](const nlohmann::json& src, const ModelParams<T>& dst) {
    for (const auto& [name, t] : dst.named_parameters()) {
      if (!src.contains(name)) throw IoError("checkpoint: missing tensor '" + name + "'");
      tensor_from_json(src.at(name), t, name);
    }
  };
  load_params(j.at("live"), ck.state.live);
  load_params(j.at("ema"), ck.state.ema);
  for (std::size_t s = 0; s < kStages; ++s)
    for (std::size_t b = 0; b < ck.state.running[s].size(); ++b) {
      auto& rs = ck.state.running[s][b];
      if (rs.mean.empty()) continue;
      const auto prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      Tensor<T> mean({rs.mean.size()}, rs.mean), var({rs.var.size()}, rs.var);
      tensor_from_json(j.at("running").at(prefix + ".mean"), mean, prefix + ".mean");
      tensor_from_json(j.at("running").at(prefix + ".var"), var, prefix + ".var");
      rs.mean.assign(mean.data().begin(), mean.data().end());
      rs.var.assign(var.data().begin(), var.data().end());
    }
  if (!j.at("style_nets").is_null()) {
    const auto& fl = ck.config.srm_fl;
    const auto channels = ck.config.backbone.stage_channels[static_cast<std::size_t>(fl.insertion_stage) - 1];
    auto nets = style_nets_init<T>(channels, fl.reduction, scratch, true, fl.variant);
    for (const auto& [name, t] : nets.named_parameters()) {
      if (!j.at("style_nets").contains(name)) throw IoError("checkpoint: missing tensor '" + name + "'");
      tensor_from_json(j.at("style_nets").at(name), t, name);
    }
    ck.nets = std::move(nets);
  }
  return ck;
}

}  // namespace dgstyle
