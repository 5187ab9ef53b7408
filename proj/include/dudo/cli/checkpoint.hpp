// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints: one .ddut file per parameter plus an index.json listing names,
// shapes and the config hash they were trained under.

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dudo/cli/config.hpp"
#include "dudo/mrisim/tensor_io.hpp"

namespace dudo {

inline constexpr const char* kCheckpointIndex = "index.json";

inline std::string param_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%05zu.ddut", i);
  return buf;
}

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const ParamStore<T>& params, const RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory '" + dir.string() + "': " + ec.message());
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string file = param_file_name(i);
    save_tensor(dir / file, params.value_at(i));
    entries.push_back({{"name", params.names()[i]}, {"shape", params.value_at(i).shape()}, {"file", file}});
  }
  nlohmann::ordered_json index{{"format", 1},
                               {"precision", to_string(cfg.precision)},
                               {"config_hash", config_hash(cfg)},
                               {"config", to_json(cfg)},
                               {"params", entries}};
  std::ofstream out(dir / kCheckpointIndex);
  out << index.dump(2) << "\n";
  if (!out) throw IoError("cannot write '" + (dir / kCheckpointIndex).string() + "'");
}

/// Loads parameters into a freshly initialised model for `cfg`. Every name and
/// shape must match; tensors are converted to T.
template <class T>
ParamStore<T> load_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg) {
  const auto index_path = dir / kCheckpointIndex;
  std::ifstream in(index_path);
  if (!in) throw IoError("cannot open checkpoint index '" + index_path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("corrupt checkpoint index '" + index_path.string() + "': " + e.what());
  }
  if (!index.contains("params") || !index["params"].is_array()) {
    throw IoError("checkpoint index '" + index_path.string() + "' has no params list");
  }
  ParamStore<T> store = make_model<T>(cfg.model, cfg.train.seed);
  const auto& entries = index["params"];
  if (entries.size() != store.size()) {
    throw ConfigError("checkpoint has " + std::to_string(entries.size()) + " tensors but the configured model has " +
                      std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const std::string name = e.value("name", "");
    if (name != store.names()[i]) {
      throw ConfigError("checkpoint tensor " + std::to_string(i) + " is '" + name + "', model expects '" +
                        store.names()[i] + "'");
    }
    Tensor<T> t = load_tensor_as<T>(dir / e.value("file", param_file_name(i)));
    if (t.shape() != store.value_at(i).shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                        shape_str(store.value_at(i).shape()));
    }
    store.value_at(i) = std::move(t);
  }
  return store;
}

}  // namespace dudo
