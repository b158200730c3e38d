#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "panelglmm/model_core.hpp"

namespace panelglmm {

/// Balanced panel read from CSV, rows in canonical order (individual-major,
/// times 1..T within each individual).
struct PanelDataset {
  PanelLayout layout{2, 2};
  std::vector<std::string> ids;            // canonical individual order
  std::vector<std::string> feature_names;  // header names of the feature columns
  VectorXd y;
  MatrixXd X;  // feature columns only, n x p
};

/// Parses a CSV with header columns id, time, y and any number of numeric
/// feature columns. Ids are ordered numerically when every id is an integer,
/// lexicographically otherwise. Throws DataContractError naming the first
/// offending (id, time) pair for unbalanced or duplicated cells, and for
/// missing or non-numeric values.
PanelDataset read_panel_csv(std::istream& in);
PanelDataset read_panel_csv_text(const std::string& text);

/// Writes the dataset in canonical order with shortest round-trip numbers.
void write_panel_csv(std::ostream& out, const PanelDataset& data);
std::string panel_csv_text(const PanelDataset& data);

/// Shortest decimal text that parses back to exactly x.
std::string format_double(double x);

}  // namespace panelglmm
