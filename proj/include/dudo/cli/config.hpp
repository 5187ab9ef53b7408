// SPDX-License-Identifier: Apache-2.0
//
// Run configuration as JSON. Every field is optional and defaults to the
// reference configuration; unknown keys are errors.

#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dudo/traineval/evaluate.hpp"

namespace dudo {

enum class Precision { kF32, kF64 };

inline std::string to_string(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::kF32;
  if (s == "f64") return Precision::kF64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::string output_dir = "runs/default";
  Precision precision = Precision::kF32;

  void validate() const {
    model.validate();
    train.validate();
    eval.validate();
    for (double a : eval.accels) {
      const std::size_t acs = acs_columns(train.image_size, train.acs_frac);
      if (static_cast<std::size_t>(std::lround(static_cast<double>(train.image_size) / a)) < acs) {
        throw ConfigError("eval.accels: " + std::to_string(a) + "x is infeasible with the ACS block");
      }
    }
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

using json = nlohmann::ordered_json;

/// Reads fields from one JSON object and reports the first problem with a line number.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path, const std::string& text) : obj_(obj), path_(std::move(path)), text_(text) {
    if (!obj_.is_object()) fail(path_, "expected an object");
  }

  template <class V>
  void read(const char* key, V& dst) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    convert(*it, dst, key);
  }

  template <class F>
  void read_with(const char* key, F&& parse) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      parse(*it);
    } catch (const ConfigError& e) {
      fail(key, e.what());
    } catch (const json::exception& e) {
      fail(key, e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) fail(it.key(), "unknown key '" + it.key() + "' in " + (path_.empty() ? "<root>" : path_));
    }
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError("config line " + std::to_string(line_of(key)) + ": " + qualified(key) + ": " + msg);
  }

 private:
  std::size_t line_of(const std::string& key) const {
    const std::size_t pos = text_.find("\"" + key + "\"");
    if (pos == std::string::npos) return 1;
    return 1 + static_cast<std::size_t>(std::count(text_.begin(), text_.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
  }

  template <class V>
  void convert(const json& j, V& dst, const char* key) {
    if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) fail(key, "expected a boolean");
      dst = j.get<bool>();
    } else if constexpr (std::is_integral_v<V>) {
      if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0)) {
        fail(key, "expected a non-negative integer");
      }
      dst = static_cast<V>(j.get<std::uint64_t>());
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!j.is_number()) fail(key, "expected a number");
      dst = j.get<double>();
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!j.is_string()) fail(key, "expected a string");
      dst = j.get<std::string>();
    } else {
      static_assert(sizeof(V) == 0, "unsupported field type");
    }
  }

  const json& obj_;
  std::string path_;
  const std::string& text_;
  std::set<std::string> seen_;
};

inline void read_backbone(const json& j, const std::string& path, const std::string& text, XBBConfig& c) {
  ObjectReader r(j, path, text);
  r.read("G0", c.G0);
  r.read("G", c.G);
  r.read("D", c.D);
  r.read("C", c.C);
  r.read("alpha", c.alpha);
  r.read("window", c.window);
  r.read("heads", c.heads);
  r.read_with("variant", [&](const json& v) { c.variant = parse_block_variant(v.get<std::string>()); });
  r.finish();
}

inline json backbone_json(const XBBConfig& c) {
  return json{{"G0", c.G0}, {"G", c.G},           {"D", c.D},         {"C", c.C},
              {"alpha", c.alpha}, {"window", c.window}, {"heads", c.heads}, {"variant", to_string(c.variant)}};
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  using detail::json;
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  detail::ObjectReader r(root, "", text);
  if (const json* m = r.child("model")) {
    detail::ObjectReader mr(*m, "model", text);
    mr.read("n_recurrent", cfg.model.n_recurrent);
    if (const json* b = mr.child("image")) detail::read_backbone(*b, "model.image", text, cfg.model.image);
    if (const json* b = mr.child("kspace")) detail::read_backbone(*b, "model.kspace", text, cfg.model.kspace);
    mr.read_with("c2f_windows", [&](const json& v) {
      if (!v.is_array()) throw ConfigError("expected an array of two window sizes");
      cfg.model.c2f_windows = v.get<std::vector<std::size_t>>();
    });
    mr.read("c2f_heads", cfg.model.c2f_heads);
    mr.read_with("fusion", [&](const json& v) { cfg.model.fusion = parse_fusion(v.get<std::string>()); });
    mr.read_with("encoder", [&](const json& v) { cfg.model.encoder = parse_encoder(v.get<std::string>()); });
    mr.read_with("layout", [&](const json& v) { cfg.model.layout = parse_layout(v.get<std::string>()); });
    mr.read("share_recurrent_params", cfg.model.share_recurrent_params);
    mr.read("cb_depth", cfg.model.cb_depth);
    mr.finish();
  }
  if (const json* t = r.child("train")) {
    detail::ObjectReader tr(*t, "train", text);
    tr.read("lr", cfg.train.lr);
    tr.read("beta1", cfg.train.beta1);
    tr.read("beta2", cfg.train.beta2);
    tr.read("eps", cfg.train.eps);
    tr.read("batch_size", cfg.train.batch_size);
    tr.read("steps", cfg.train.steps);
    tr.read_with("accel_range", [&](const json& v) {
      if (!v.is_array() || v.size() != 2) throw ConfigError("expected [min, max]");
      cfg.train.accel_min = v[0].get<double>();
      cfg.train.accel_max = v[1].get<double>();
    });
    tr.read("acs_frac", cfg.train.acs_frac);
    tr.read_with("ref_probs", [&](const json& v) {
      if (!v.is_array() || v.size() != 3) throw ConfigError("expected [HQ, LQ, absent] probabilities");
      for (std::size_t i = 0; i < 3; ++i) cfg.train.ref_probs[i] = v[i].get<double>();
    });
    tr.read("seed", cfg.train.seed);
    tr.read("image_size", cfg.train.image_size);
    tr.read_with("loss", [&](const json& v) { cfg.train.loss = parse_loss_kind(v.get<std::string>()); });
    tr.read("clip_norm", cfg.train.clip_norm);
    tr.finish();
  }
  if (const json* e = r.child("eval")) {
    detail::ObjectReader er(*e, "eval", text);
    er.read("n_cases", cfg.eval.n_cases);
    er.read_with("conditions", [&](const json& v) {
      if (!v.is_array()) throw ConfigError("expected an array of HQ, LQ, absent");
      cfg.eval.conditions.clear();
      for (const auto& s : v) cfg.eval.conditions.push_back(parse_ref_quality(s.get<std::string>()));
    });
    er.read_with("accels", [&](const json& v) {
      if (!v.is_array()) throw ConfigError("expected an array of accelerations");
      cfg.eval.accels = v.get<std::vector<double>>();
    });
    er.read("seed", cfg.eval.seed);
    er.finish();
  }
  r.read("output_dir", cfg.output_dir);
  r.read_with("precision", [&](const json& v) { cfg.precision = parse_precision(v.get<std::string>()); });
  r.finish();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Complete document with every default materialised.
inline nlohmann::ordered_json to_json(const RunConfig& c) {
  using detail::json;
  json conditions = json::array();
  for (RefQuality q : c.eval.conditions) conditions.push_back(to_string(q));
  return json{
      {"model",
       {{"n_recurrent", c.model.n_recurrent},
        {"image", detail::backbone_json(c.model.image)},
        {"kspace", detail::backbone_json(c.model.kspace)},
        {"c2f_windows", c.model.c2f_windows},
        {"c2f_heads", c.model.c2f_heads},
        {"fusion", to_string(c.model.fusion)},
        {"encoder", to_string(c.model.encoder)},
        {"layout", to_string(c.model.layout)},
        {"share_recurrent_params", c.model.share_recurrent_params},
        {"cb_depth", c.model.cb_depth}}},
      {"train",
       {{"lr", c.train.lr},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"eps", c.train.eps},
        {"batch_size", c.train.batch_size},
        {"steps", c.train.steps},
        {"accel_range", {c.train.accel_min, c.train.accel_max}},
        {"acs_frac", c.train.acs_frac},
        {"ref_probs", c.train.ref_probs},
        {"seed", c.train.seed},
        {"image_size", c.train.image_size},
        {"loss", to_string(c.train.loss)},
        {"clip_norm", c.train.clip_norm}}},
      {"eval",
       {{"n_cases", c.eval.n_cases}, {"conditions", conditions}, {"accels", c.eval.accels}, {"seed", c.eval.seed}}},
      {"output_dir", c.output_dir},
      {"precision", to_string(c.precision)}};
}

inline std::string serialize(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

/// FNV-1a of the canonical serialisation.
inline std::string config_hash(const RunConfig& c) {
  Fnv1a h;
  h.update(to_json(c).dump());
  return hex64(h.digest());
}

}  // namespace dudo
