#pragma once

#include <cstdint>
#include <exception>
#include <optional>
#include <string>
#include <vector>

namespace panelglmm {

// Command-line values that take precedence over the config document.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

// Each command maps input text to output text; file handling lives in run_command.

/// Ridge-EM fit of a CSV panel; returns fit.json text.
std::string fit_command(const std::string& csv_text, const std::string& config_text,
                        const Overrides& overrides = {});

/// Supervised-component fit; (s, l, K) are tuned by cross-validation unless
/// every grid holds a single value. Returns fit.json text.
std::string fit_hd_command(const std::string& csv_text, const std::string& config_text,
                           const Overrides& overrides = {});

struct SimulateOutput {
  std::string csv;
  std::string truth_json;
};
SimulateOutput simulate_command(const std::string& spec_text, const Overrides& overrides = {});

struct StudyOutput {
  std::string json;
  std::string csv;
  bool total_failure = false;  // every replicate failed
};
StudyOutput study_command(const std::string& study_text, const Overrides& overrides = {});

/// 2 for data contract violations, 3 for config violations, 1 otherwise.
int exit_code_for(const std::exception& e);

struct Invocation {
  std::string command;  // fit, fit-hd, simulate, study
  std::optional<std::string> data;
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::string> truth;
  std::optional<std::string> csv;
  Overrides overrides;
};

struct OutputFile {
  std::string path;
  std::string contents;
};

struct CommandResult {
  int exit_code = 0;
  std::string message;  // error text when exit_code != 0
  std::vector<OutputFile> files;
};

/// Reads the input files, runs the command and collects the output files
/// without writing them. Never throws; failures are reported in the result.
CommandResult run_command(const Invocation& invocation);

/// Writes every output file; throws std::runtime_error on I/O failure.
void write_outputs(const CommandResult& result);

}  // namespace panelglmm
