// SPDX-License-Identifier: Apache-2.0
//
// JSON run configuration with sections `model`, `train` and `data`. Every
// section is optional; unknown keys and ill-typed values are rejected.

#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "textprune/model.hpp"
#include "textprune/synth.hpp"
#include "textprune/trainer.hpp"

namespace textprune {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SceneSpec data;

  // Cross-section checks (e.g. canvas vs image size) plus each section's own.
  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

// Effective configuration with all defaults materialized.
nlohmann::json to_json(const RunConfig& config);

}  // namespace textprune
