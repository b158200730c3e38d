#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"
#include "panelglmm/simulate.hpp"

namespace panelglmm {

struct OutputPaths {
  std::optional<std::string> path;   // main output (fit.json, data.csv, study_result.json)
  std::optional<std::string> truth;  // simulate: truth.json
  std::optional<std::string> csv;    // study: flattened CSV
};

/// Configuration of the fit and fit-hd commands.
struct RunConfig {
  FamilyLink family = FamilyLink::poisson_log();
  // Prepend a column of ones to the CSV features. It is left unpenalized
  // unless fit.penalize_intercept is set or a penalty mask is given.
  bool intercept = true;
  FitConfig fit;
  SCConfig sc;
  std::uint64_t seed = 1;
  int threads = 1;
  OutputPaths output;
};

struct SimulateConfig {
  SimSpec spec;
  OutputPaths output;
};

struct StudyRunConfig {
  StudyConfig study;
  OutputPaths output;
};

/// Parses JSON text; syntax errors raise ConfigError.
nlohmann::json parse_json_text(const std::string& text);

// Every parser rejects unknown keys and wrongly typed values with ConfigError
// naming the offending key path, and validates the result before returning.
RunConfig parse_run_config(const nlohmann::json& doc);
SimulateConfig parse_simulate_config(const nlohmann::json& doc);
StudyRunConfig parse_study_config(const nlohmann::json& doc);

}  // namespace panelglmm
