// SPDX-License-Identifier: Apache-2.0

#include "textprune/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace textprune {

namespace {

// Parsed text yields unsigned numbers, values built in code may be signed.
bool is_count(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

using nlohmann::json;

// Reads the keys of one section and complains about anything left over.
class Section {
 public:
  Section(const json& doc, std::string name) : name_(std::move(name)) {
    if (!doc.contains(name_)) return;
    obj_ = &doc.at(name_);
    if (!obj_->is_object()) fail("", "must be an object");
  }

  template <typename Fn>
  void read(const std::string& key, Fn&& fn) {
    seen_.insert(key);
    if (obj_ == nullptr || !obj_->contains(key)) return;
    try {
      fn(obj_->at(key));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      fail(key, e.what());
    }
  }

  void size(const std::string& key, std::size_t& out) {
    read(key, [&](const json& v) {
      if (!is_count(v)) fail(key, "expected a non-negative integer");
      out = v.get<std::size_t>();
    });
  }
  void u64(const std::string& key, std::uint64_t& out) {
    read(key, [&](const json& v) {
      if (!is_count(v)) fail(key, "expected a non-negative integer");
      out = v.get<std::uint64_t>();
    });
  }
  void u8(const std::string& key, std::uint8_t& out) {
    read(key, [&](const json& v) {
      if (!is_count(v) || v.get<std::uint64_t>() > 255) fail(key, "expected an integer in [0, 255]");
      out = static_cast<std::uint8_t>(v.get<std::uint64_t>());
    });
  }
  void real(const std::string& key, double& out) {
    read(key, [&](const json& v) {
      if (!v.is_number()) fail(key, "expected a number");
      out = v.get<double>();
    });
  }
  void opt_size(const std::string& key, std::optional<std::size_t>& out) {
    read(key, [&](const json& v) {
      if (v.is_null()) {
        out.reset();
        return;
      }
      if (!is_count(v)) fail(key, "expected a non-negative integer or null");
      out = v.get<std::size_t>();
    });
  }

  void finish() const {
    if (obj_ == nullptr) return;
    for (const auto& [key, value] : obj_->items()) {
      if (!seen_.count(key)) fail(key, "unknown key");
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError("config: " + name_ + (key.empty() ? "" : "." + key) + ": " + msg);
  }

 private:
  std::string name_;
  const json* obj_ = nullptr;
  std::set<std::string> seen_;
};

ShapeKind shape_from_string(const std::string& s) {
  if (s == "rectangle") return ShapeKind::Rectangle;
  if (s == "circle") return ShapeKind::Circle;
  if (s == "triangle") return ShapeKind::Triangle;
  throw ConfigError("unknown shape '" + s + "'");
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    train.validate();
    data.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (data.canvas != model.image_size) {
    throw ConfigError("config: data.canvas (" + std::to_string(data.canvas) + ") must equal model.image_size (" +
                      std::to_string(model.image_size) + ")");
  }
  const Vocabulary vocab;
  for (const auto& color : data.palette) {
    if (vocab.id(color.name) == Vocabulary::kUnk) {
      throw ConfigError("config: palette color '" + color.name + "' is not in the vocabulary");
    }
  }
  if (model.vocab_size < vocab.size()) {
    throw ConfigError("config: model.vocab_size must be at least " + std::to_string(vocab.size()));
  }
}

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (key != "model" && key != "train" && key != "data") throw ConfigError("config: unknown section '" + key + "'");
  }
  RunConfig cfg;

  Section m(doc, "model");
  auto& mc = cfg.model;
  m.size("image_size", mc.image_size);
  m.size("patch_size", mc.patch_size);
  m.size("channels", mc.channels);
  m.size("visual_layers", mc.visual_layers);
  m.size("text_layers", mc.text_layers);
  m.size("fusion_layers", mc.fusion_layers);
  m.size("dim", mc.dim);
  m.size("heads", mc.heads);
  m.size("ffn_dim", mc.ffn_dim);
  m.size("detect_location", mc.detect_location);
  m.real("keep_ratio", mc.keep_ratio);
  m.read("mode", [&](const json& v) {
    try {
      mc.mode = detector_mode_from_string(v.get<std::string>());
    } catch (const Error& e) {
      m.fail("mode", e.what());
    }
  });
  m.size("vocab_size", mc.vocab_size);
  m.size("max_text_len", mc.max_text_len);
  m.finish();

  Section t(doc, "train");
  auto& tc = cfg.train;
  t.size("steps", tc.steps);
  t.size("pair_batch", tc.pair_batch);
  t.size("object_batch", tc.object_batch);
  t.real("learning_rate", tc.learning_rate);
  t.opt_size("warmup_steps", tc.warmup_steps);
  t.real("weight_decay", tc.weight_decay);
  t.real("beta1", tc.beta1);
  t.real("beta2", tc.beta2);
  t.real("adam_eps", tc.adam_eps);
  t.u64("seed", tc.seed);
  t.opt_size("fallback_steps", tc.fallback_steps);
  t.read("switch_rule", [&](const json& v) {
    const auto s = v.get<std::string>();
    if (s == "step") tc.switch_rule = SwitchRule::Step;
    else if (s == "loss_ema") tc.switch_rule = SwitchRule::LossEma;
    else t.fail("switch_rule", "expected \"step\" or \"loss_ema\"");
  });
  t.real("switch_threshold", tc.switch_threshold);
  t.size("ema_window", tc.ema_window);
  t.size("eval_interval", tc.eval_interval);
  t.size("eval_scenes", tc.eval_scenes);
  t.size("checkpoint_interval", tc.checkpoint_interval);
  t.finish();

  Section d(doc, "data");
  auto& dc = cfg.data;
  d.size("canvas", dc.canvas);
  d.size("min_objects", dc.min_objects);
  d.size("max_objects", dc.max_objects);
  d.size("min_size", dc.min_size);
  d.size("max_size", dc.max_size);
  d.real("max_overlap", dc.max_overlap);
  d.u8("background_min", dc.background_min);
  d.u8("background_max", dc.background_max);
  d.read("palette", [&](const json& v) {
    if (!v.is_array()) d.fail("palette", "expected an array of {name, rgb}");
    dc.palette.clear();
    for (const auto& entry : v) {
      if (!entry.is_object() || entry.size() != 2 || !entry.contains("name") || !entry.contains("rgb")) {
        d.fail("palette", "each entry needs exactly the keys name and rgb");
      }
      PaletteColor c;
      c.name = entry.at("name").get<std::string>();
      const auto& rgb = entry.at("rgb");
      if (!rgb.is_array() || rgb.size() != 3) d.fail("palette", "rgb must hold three integers");
      for (std::size_t i = 0; i < 3; ++i) {
        if (!rgb[i].is_number_unsigned() || rgb[i].get<std::uint64_t>() > 255) d.fail("palette", "rgb values must lie in [0, 255]");
        c.rgb[i] = static_cast<std::uint8_t>(rgb[i].get<std::uint64_t>());
      }
      dc.palette.push_back(std::move(c));
    }
  });
  d.read("shapes", [&](const json& v) {
    if (!v.is_array()) d.fail("shapes", "expected an array of shape names");
    dc.shapes.clear();
    for (const auto& s : v) dc.shapes.push_back(shape_from_string(s.get<std::string>()));
  });
  d.finish();

  cfg.validate();
  // Materialize derived defaults so the echoed config is complete.
  tc.warmup_steps = tc.warmup();
  tc.fallback_steps = tc.fallback_switch();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(doc);
}

json to_json(const RunConfig& cfg) {
  const auto& mc = cfg.model;
  const auto& tc = cfg.train;
  const auto& dc = cfg.data;
  json palette = json::array();
  for (const auto& c : dc.palette) palette.push_back({{"name", c.name}, {"rgb", {c.rgb[0], c.rgb[1], c.rgb[2]}}});
  json shapes = json::array();
  for (auto s : dc.shapes) shapes.push_back(shape_name(s));
  return {
      {"model",
       {{"image_size", mc.image_size},
        {"patch_size", mc.patch_size},
        {"channels", mc.channels},
        {"visual_layers", mc.visual_layers},
        {"text_layers", mc.text_layers},
        {"fusion_layers", mc.fusion_layers},
        {"dim", mc.dim},
        {"heads", mc.heads},
        {"ffn_dim", mc.ffn_dim},
        {"detect_location", mc.detect_location},
        {"keep_ratio", mc.keep_ratio},
        {"mode", to_string(mc.mode)},
        {"vocab_size", mc.vocab_size},
        {"max_text_len", mc.max_text_len}}},
      {"train",
       {{"steps", tc.steps},
        {"pair_batch", tc.pair_batch},
        {"object_batch", tc.object_batch},
        {"learning_rate", tc.learning_rate},
        {"warmup_steps", tc.warmup()},
        {"weight_decay", tc.weight_decay},
        {"beta1", tc.beta1},
        {"beta2", tc.beta2},
        {"adam_eps", tc.adam_eps},
        {"seed", tc.seed},
        {"fallback_steps", tc.fallback_switch()},
        {"switch_rule", tc.switch_rule == SwitchRule::Step ? "step" : "loss_ema"},
        {"switch_threshold", tc.switch_threshold},
        {"ema_window", tc.ema_window},
        {"eval_interval", tc.eval_interval},
        {"eval_scenes", tc.eval_scenes},
        {"checkpoint_interval", tc.checkpoint_interval}}},
      {"data",
       {{"canvas", dc.canvas},
        {"min_objects", dc.min_objects},
        {"max_objects", dc.max_objects},
        {"min_size", dc.min_size},
        {"max_size", dc.max_size},
        {"max_overlap", dc.max_overlap},
        {"background_min", dc.background_min},
        {"background_max", dc.background_max},
        {"palette", palette},
        {"shapes", shapes}}},
  };
}

}  // namespace textprune
