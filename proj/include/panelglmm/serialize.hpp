#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "panelglmm/dataset.hpp"
#include "panelglmm/run_config.hpp"

namespace panelglmm {

using ordered_json = nlohmann::ordered_json;

// Version of every JSON document written by the library.
inline constexpr int kFormatVersion = 1;

/// Everything a fit document records besides the fit itself.
struct FitContext {
  std::string command;                         // "fit" or "fit-hd"
  FamilyLink family = FamilyLink::poisson_log();
  bool intercept = true;
  std::vector<std::string> ids;
  std::vector<std::string> coefficient_names;  // one per entry of params.beta
  Index n_times = 0;
  std::vector<double> lambda_grid;
};

/// JSON of a ridge-EM fit. Non-finite numbers are written as null.
ordered_json fit_document(const FitResult& result, const FitContext& context);

/// Inverse of the FitResult part of fit_document (eta and mu are not stored).
FitResult fit_result_from_json(const nlohmann::json& doc);

/// fit_document plus component loadings, the selected (s, l, K) and the CV table.
ordered_json fit_hd_document(const HdFitResult& result, const std::optional<CvResult>& cv,
                             const FitContext& context);

/// True parameters and the realized random effects of a simulated panel.
ordered_json truth_document(const SimSpec& spec, const SimData& data);

ordered_json study_document(const StudyResult& result);

/// One row per cell x replicate x parameter.
std::string study_csv(const StudyResult& result);

/// Two-space indented JSON text with a trailing newline.
std::string dump_document(const ordered_json& doc);

}  // namespace panelglmm
