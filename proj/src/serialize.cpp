#include "panelglmm/serialize.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "panelglmm/errors.hpp"

namespace panelglmm {

namespace {

ordered_json number(double x) { return std::isfinite(x) ? ordered_json(x) : ordered_json(nullptr); }

ordered_json numbers(const VectorXd& v) {
  ordered_json a = ordered_json::array();
  for (Index k = 0; k < v.size(); ++k) a.push_back(number(v(k)));
  return a;
}

ordered_json numbers(const std::vector<double>& v) {
  ordered_json a = ordered_json::array();
  for (double x : v) a.push_back(number(x));
  return a;
}

ordered_json columns(const MatrixXd& m) {
  ordered_json a = ordered_json::array();
  for (Index j = 0; j < m.cols(); ++j) a.push_back(numbers(VectorXd(m.col(j))));
  return a;
}

ordered_json params_json(const ModelParams& p) {
  ordered_json j;
  j["beta"] = numbers(p.beta);
  j["sigma1_sq"] = number(p.sigma1_sq);
  j["sigma2_sq"] = number(p.sigma2_sq);
  j["rho"] = number(p.rho);
  return j;
}

double read_number(const nlohmann::json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (!j.is_number()) throw ConfigError("fit document: expected a number");
  return j.get<double>();
}

std::vector<double> read_numbers(const nlohmann::json& j) {
  std::vector<double> v;
  for (const auto& x : j) v.push_back(read_number(x));
  return v;
}

VectorXd read_vector(const nlohmann::json& j) {
  const std::vector<double> v = read_numbers(j);
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

ModelParams read_params(const nlohmann::json& j) {
  ModelParams p;
  p.beta = read_vector(j.at("beta"));
  p.sigma1_sq = read_number(j.at("sigma1_sq"));
  p.sigma2_sq = read_number(j.at("sigma2_sq"));
  p.rho = read_number(j.at("rho"));
  return p;
}

FitStatus read_status(const std::string& s) {
  if (s == "converged") return FitStatus::converged;
  if (s == "diverged") return FitStatus::diverged;
  if (s == "max_iterations") return FitStatus::max_iterations;
  throw ConfigError("fit document: unknown status '" + s + "'");
}

std::string csv_number(double x) { return std::isfinite(x) ? format_double(x) : ""; }

}  // namespace

ordered_json fit_document(const FitResult& r, const FitContext& ctx) {
  ordered_json doc;
  doc["format_version"] = kFormatVersion;
  doc["command"] = ctx.command;
  doc["model"] = {{"family", ctx.family.family_name()},
                  {"link", ctx.family.link_name()},
                  {"dispersion", ctx.family.dispersion()},
                  {"intercept", ctx.intercept}};
  doc["data"] = {{"n_individuals", ctx.ids.size()}, {"n_times", ctx.n_times}, {"ids", ctx.ids}};
  doc["coefficient_names"] = ctx.coefficient_names;
  doc["converged"] = r.converged;
  doc["status"] = to_string(r.status);
  doc["n_iter"] = r.n_iter;
  doc["params"] = params_json(r.params);
  doc["xi_hat"] = {{"xi1", numbers(r.xi_hat.xi1)}, {"xi2", numbers(r.xi_hat.xi2)}};
  doc["lambda_grid"] = numbers(ctx.lambda_grid);
  doc["lambda_path"] = numbers(r.lambda_path);
  doc["gcv_path"] = numbers(r.gcv_path);
  ordered_json curves = ordered_json::array();
  for (const auto& c : r.gcv_curves) curves.push_back(numbers(c));
  doc["gcv_curves"] = curves;
  doc["deviance_path"] = numbers(r.deviance_path);
  ordered_json trace = ordered_json::array();
  for (const ModelParams& p : r.trace) trace.push_back(params_json(p));
  doc["trace"] = trace;
  ordered_json warnings = ordered_json::array();
  for (const auto& w : r.warnings) warnings.push_back({{"code", w.code}, {"message", w.message}});
  doc["warnings"] = warnings;
  return doc;
}

FitResult fit_result_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format_version").get<int>() != kFormatVersion) {
      throw ConfigError("fit document: unsupported format_version");
    }
    FitResult r;
    r.converged = doc.at("converged").get<bool>();
    r.status = read_status(doc.at("status").get<std::string>());
    r.n_iter = doc.at("n_iter").get<int>();
    r.params = read_params(doc.at("params"));
    r.xi_hat.xi1 = read_vector(doc.at("xi_hat").at("xi1"));
    r.xi_hat.xi2 = read_vector(doc.at("xi_hat").at("xi2"));
    r.lambda_path = read_numbers(doc.at("lambda_path"));
    r.gcv_path = read_numbers(doc.at("gcv_path"));
    for (const auto& c : doc.at("gcv_curves")) r.gcv_curves.push_back(read_numbers(c));
    r.deviance_path = read_numbers(doc.at("deviance_path"));
    for (const auto& p : doc.at("trace")) r.trace.push_back(read_params(p));
    for (const auto& w : doc.at("warnings")) {
      r.warnings.push_back({w.at("code").get<std::string>(), w.at("message").get<std::string>()});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("fit document: ") + e.what());
  }
}

ordered_json fit_hd_document(const HdFitResult& r, const std::optional<CvResult>& cv,
                             const FitContext& ctx) {
  ordered_json doc = fit_document(r.fit, ctx);
  ordered_json hd;
  hd["s"] = r.s;
  hd["l"] = r.l;
  hd["n_components"] = r.n_components;
  hd["intercept"] = number(r.intercept);
  hd["beta"] = numbers(r.beta);
  hd["gammas"] = numbers(r.gammas);
  hd["variable_loadings"] = columns(r.variable_loadings);
  hd["component_weights"] = columns(r.component_weights);
  doc["components"] = hd;
  if (cv) {
    ordered_json table = ordered_json::array();
    for (const CvRow& row : cv->table) {
      table.push_back({{"s", row.s},
                       {"l", row.l},
                       {"k", row.k},
                       {"fold", row.fold},
                       {"n_heldout", row.n_heldout},
                       {"deviance", number(row.deviance)},
                       {"ok", row.ok}});
    }
    doc["cv"] = {{"selected", {{"s", cv->s}, {"l", cv->l}, {"k", cv->k}}},
                 {"best_score", number(cv->best_score)},
                 {"table", table}};
  } else {
    doc["cv"] = nullptr;
  }
  return doc;
}

ordered_json truth_document(const SimSpec& spec, const SimData& data) {
  ordered_json doc;
  doc["format_version"] = kFormatVersion;
  doc["command"] = "simulate";
  doc["model"] = {{"family", spec.family.family_name()},
                  {"link", spec.family.link_name()},
                  {"dispersion", spec.family.dispersion()},
                  {"intercept", spec.intercept}};
  doc["N"] = spec.layout.n_individuals();
  doc["T"] = spec.layout.n_times();
  doc["seed"] = spec.seed;
  doc["x_correlation"] = spec.x_correlation;
  doc["true_params"] = params_json(spec.true_params);
  doc["xi"] = {{"xi1", numbers(data.xi.xi1)}, {"xi2", numbers(data.xi.xi2)}};
  return doc;
}

ordered_json study_document(const StudyResult& r) {
  const StudyConfig& c = r.config;
  ordered_json doc;
  doc["format_version"] = kFormatVersion;
  doc["command"] = "study";
  doc["kind"] = to_string(c.kind);
  doc["flavor"] = to_string(c.flavor);
  doc["seed"] = c.seed;
  doc["n_replicates"] = c.n_replicates;
  doc["model"] = {{"family", c.base.family.family_name()},
                  {"link", c.base.family.link_name()},
                  {"dispersion", c.base.family.dispersion()},
                  {"intercept", c.base.intercept}};
  doc["true_params"] = params_json(c.base.true_params);
  doc["parameter_names"] = r.parameter_names;

  int failures = 0;
  for (const ReplicateResult& rr : r.replicates) failures += rr.ok ? 0 : 1;
  doc["n_failed_replicates"] = failures;

  ordered_json cells = ordered_json::array();
  for (std::size_t k = 0; k < r.summaries.size(); ++k) {
    const CellSummary& s = r.summaries[k];
    ordered_json mse;
    for (std::size_t j = 0; j < r.parameter_names.size(); ++j) mse[r.parameter_names[j]] = number(s.mse[j]);
    cells.push_back({{"cell", k},
                     {"N", s.cell.N},
                     {"T", s.cell.T},
                     {"rho", s.cell.rho},
                     {"truth", numbers(true_parameter_vector(c, s.cell))},
                     {"mse", mse},
                     {"median_iterations", number(s.median_iterations)},
                     {"convergence_rate", s.convergence_rate},
                     {"failure_rate", s.failure_rate},
                     {"n_ok", s.n_ok}});
  }
  doc["cells"] = cells;

  ordered_json reps = ordered_json::array();
  for (const ReplicateResult& rr : r.replicates) {
    ordered_json j;
    j["cell"] = rr.cell;
    j["replicate"] = rr.replicate;
    j["seed"] = rr.seed;
    j["ok"] = rr.ok;
    if (rr.ok) {
      j["converged"] = rr.converged;
      j["status"] = to_string(rr.status);
      j["n_iter"] = rr.n_iter;
      j["estimate"] = numbers(parameter_vector(rr.estimate));
    } else {
      j["error"] = rr.error;
    }
    reps.push_back(j);
  }
  doc["replicates"] = reps;
  return doc;
}

std::string study_csv(const StudyResult& r) {
  std::ostringstream out;
  out << "cell,N,T,rho_true,replicate,seed,ok,converged,n_iter,status,parameter,truth,estimate,"
         "squared_error\n";
  for (const ReplicateResult& rr : r.replicates) {
    const StudyCell& cell = r.cells[static_cast<std::size_t>(rr.cell)];
    const VectorXd truth = true_parameter_vector(r.config, cell);
    const VectorXd est = rr.ok ? parameter_vector(rr.estimate) : VectorXd();
    for (std::size_t j = 0; j < r.parameter_names.size(); ++j) {
      const Index jj = static_cast<Index>(j);
      out << rr.cell << ',' << cell.N << ',' << cell.T << ',' << format_double(cell.rho) << ','
          << rr.replicate << ',' << rr.seed << ',' << (rr.ok ? 1 : 0) << ','
          << (rr.ok && rr.converged ? 1 : 0) << ',';
      if (rr.ok) {
        const double e = est(jj) - truth(jj);
        out << rr.n_iter << ',' << to_string(rr.status) << ',' << r.parameter_names[j] << ','
            << format_double(truth(jj)) << ',' << csv_number(est(jj)) << ',' << csv_number(e * e);
      } else {
        out << ",failed," << r.parameter_names[j] << ',' << format_double(truth(jj)) << ",,";
      }
      out << '\n';
    }
  }
  return out.str();
}

std::string dump_document(const ordered_json& doc) { return doc.dump(2) + "\n"; }

}  // namespace panelglmm
