#include "panelglmm/commands.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "panelglmm/errors.hpp"
#include "panelglmm/serialize.hpp"

namespace panelglmm {

namespace {

std::string read_file(const std::string& path, bool is_data) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    const std::string msg = "cannot open '" + path + "'";
    if (is_data) throw DataContractError(msg);
    throw ConfigError(msg);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig run_config_from(const std::string& text, const Overrides& o) {
  RunConfig c = parse_run_config(parse_json_text(text));
  if (o.seed) c.seed = *o.seed;
  if (o.threads) {
    if (*o.threads < 1) throw ConfigError("--threads must be >= 1");
    c.threads = *o.threads;
  }
  return c;
}

void check_support(const PanelDataset& data, const FamilyLink& family) {
  for (Index row = 0; row < data.y.size(); ++row) {
    if (!family.in_support(data.y(row))) {
      const Index i = data.layout.individual_of(row);
      throw DataContractError("y = " + format_double(data.y(row)) + " at (id=" +
                              data.ids[static_cast<std::size_t>(i)] +
                              ", time=" + std::to_string(data.layout.time_of(row) + 1) +
                              ") is outside the support of the " + family.family_name() +
                              " family");
    }
  }
}

FitContext context_for(const std::string& command, const PanelDataset& data, const RunConfig& c,
                       bool intercept) {
  FitContext ctx;
  ctx.command = command;
  ctx.family = c.family;
  ctx.intercept = intercept;
  ctx.ids = data.ids;
  ctx.n_times = data.layout.n_times();
  if (intercept) ctx.coefficient_names.push_back("(intercept)");
  for (const auto& name : data.feature_names) ctx.coefficient_names.push_back(name);
  ctx.lambda_grid = c.fit.lambda_grid;
  return ctx;
}

bool singleton_grids(const SCConfig& sc) {
  return sc.s_grid.size() == 1 && sc.l_grid.size() == 1 && sc.k_grid.size() == 1;
}

std::string sibling(const std::string& path, const std::string& name) {
  const std::filesystem::path p(path);
  return (p.parent_path() / name).string();
}

std::string with_extension(const std::string& path, const std::string& ext) {
  return std::filesystem::path(path).replace_extension(ext).string();
}

}  // namespace

std::string fit_command(const std::string& csv_text, const std::string& config_text,
                        const Overrides& overrides) {
  const RunConfig c = run_config_from(config_text, overrides);
  const PanelDataset data = read_panel_csv_text(csv_text);
  check_support(data, c.family);
  const Index n = data.X.rows();
  MatrixXd X(n, data.X.cols() + (c.intercept ? 1 : 0));
  if (c.intercept) {
    X.col(0).setOnes();
    X.rightCols(data.X.cols()) = data.X;
  } else {
    X = data.X;
  }
  if (X.cols() == 0) throw ConfigError("the model has no fixed effects: add features or an intercept");
  FitConfig fc = c.fit;
  if (c.intercept && !fc.penalty_mask) fc.intercept_column = 0;
  fc.validate(X.cols());
  const FitResult r = fit(data.y, build_designs(data.layout, X), c.family, fc);
  return dump_document(fit_document(r, context_for("fit", data, c, c.intercept)));
}

std::string fit_hd_command(const std::string& csv_text, const std::string& config_text,
                           const Overrides& overrides) {
  RunConfig c = run_config_from(config_text, overrides);
  if (!c.intercept) throw ConfigError("fit-hd always fits an intercept; set model.intercept = true");
  if (c.fit.penalty_mask) throw ConfigError("fit-hd does not use a penalty mask");
  c.sc.seed = c.seed;
  c.sc.threads = c.threads;
  const PanelDataset data = read_panel_csv_text(csv_text);
  check_support(data, c.family);
  if (data.X.cols() == 0) throw ConfigError("fit-hd needs at least one feature column");

  std::optional<CvResult> cv;
  double s = c.sc.s_grid.front();
  double l = c.sc.l_grid.front();
  int K = c.sc.k_grid.front();
  if (!singleton_grids(c.sc)) {
    cv = cv_tune(data.y, data.layout, data.X, c.family, c.sc, c.fit);
    s = cv->s;
    l = cv->l;
    K = cv->k;
  }
  const HdFitResult r = fit_hd(data.y, data.layout, data.X, c.family, s, l, K, c.sc, c.fit);
  return dump_document(fit_hd_document(r, cv, context_for("fit-hd", data, c, true)));
}

SimulateOutput simulate_command(const std::string& spec_text, const Overrides& overrides) {
  SimulateConfig c = parse_simulate_config(parse_json_text(spec_text));
  if (overrides.seed) c.spec.seed = *overrides.seed;
  const SimData d = gen_panel(c.spec);

  PanelDataset data;
  data.layout = c.spec.layout;
  for (Index i = 0; i < data.layout.n_individuals(); ++i) data.ids.push_back(std::to_string(i + 1));
  data.y = d.y;
  data.X = d.features(c.spec.intercept);
  for (Index j = 0; j < data.X.cols(); ++j) data.feature_names.push_back("x" + std::to_string(j + 1));
  return {panel_csv_text(data), dump_document(truth_document(c.spec, d))};
}

StudyOutput study_command(const std::string& study_text, const Overrides& overrides) {
  StudyRunConfig c = parse_study_config(parse_json_text(study_text));
  if (overrides.seed) c.study.seed = *overrides.seed;
  if (overrides.threads) {
    if (*overrides.threads < 1) throw ConfigError("--threads must be >= 1");
    c.study.threads = *overrides.threads;
  }
  const StudyResult r = run_study(c.study);
  StudyOutput out;
  out.json = dump_document(study_document(r));
  out.csv = study_csv(r);
  out.total_failure = true;
  for (const ReplicateResult& rr : r.replicates) out.total_failure = out.total_failure && !rr.ok;
  return out;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DataContractError*>(&e)) return 2;
  if (dynamic_cast<const ConfigError*>(&e)) return 3;
  return 1;
}

CommandResult run_command(const Invocation& inv) {
  CommandResult result;
  try {
    const auto required = [](const std::optional<std::string>& v, const char* flag) {
      if (!v) throw ConfigError(std::string("missing required option ") + flag);
      return *v;
    };
    const std::string config_text = read_file(required(inv.config, "--config"), false);
    if (inv.command == "fit" || inv.command == "fit-hd") {
      const std::string csv_text = read_file(required(inv.data, "--data"), true);
      const RunConfig c = parse_run_config(parse_json_text(config_text));
      const std::string path = inv.out.value_or(c.output.path.value_or("fit.json"));
      const std::string doc = inv.command == "fit"
                                  ? fit_command(csv_text, config_text, inv.overrides)
                                  : fit_hd_command(csv_text, config_text, inv.overrides);
      result.files.push_back({path, doc});
    } else if (inv.command == "simulate") {
      const SimulateConfig c = parse_simulate_config(parse_json_text(config_text));
      const std::string path = inv.out.value_or(c.output.path.value_or("data.csv"));
      const std::string truth = inv.truth.value_or(c.output.truth.value_or(sibling(path, "truth.json")));
      const SimulateOutput out = simulate_command(config_text, inv.overrides);
      result.files.push_back({path, out.csv});
      result.files.push_back({truth, out.truth_json});
    } else if (inv.command == "study") {
      const StudyRunConfig c = parse_study_config(parse_json_text(config_text));
      const std::string path = inv.out.value_or(c.output.path.value_or("study_result.json"));
      const std::string csv = inv.csv.value_or(c.output.csv.value_or(with_extension(path, ".csv")));
      const StudyOutput out = study_command(config_text, inv.overrides);
      result.files.push_back({path, out.json});
      result.files.push_back({csv, out.csv});
      if (out.total_failure) {
        result.exit_code = 1;
        result.message = "every study replicate failed; see the replicate errors in " + path;
      }
    } else {
      throw ConfigError("unknown command '" + inv.command + "'");
    }
  } catch (const std::exception& e) {
    result.exit_code = exit_code_for(e);
    result.message = e.what();
    result.files.clear();
  }
  return result;
}

void write_outputs(const CommandResult& result) {
  for (const OutputFile& f : result.files) {
    std::ofstream out(f.path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + f.path + "'");
    out << f.contents;
    if (!out.flush()) throw std::runtime_error("failed writing '" + f.path + "'");
  }
}

}  // namespace panelglmm
