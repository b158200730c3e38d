#include "panelglmm/run_config.hpp"

#include <cmath>
#include <set>

#include "panelglmm/errors.hpp"

namespace panelglmm {

namespace {

using nlohmann::json;

// Typed access to one JSON object that remembers which keys were read.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  std::optional<double> number(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return to_number(j_.at(key), key);
  }

  std::optional<long long> integer(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return to_integer(j_.at(key), key);
  }

  std::optional<int> small_integer(const std::string& key) {
    const auto v = integer(key);
    if (v && (*v < -1000000000LL || *v > 1000000000LL)) throw ConfigError(at(key) + " is out of range");
    return v ? std::optional<int>(static_cast<int>(*v)) : std::nullopt;
  }

  std::optional<std::uint64_t> seed(const std::string& key) {
    if (!has(key)) return std::nullopt;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(at(key) + " must be a non-negative integer");
    return v.get<std::uint64_t>();
  }

  std::optional<bool> boolean(const std::string& key) {
    if (!has(key)) return std::nullopt;
    if (!j_.at(key).is_boolean()) throw ConfigError(at(key) + " must be true or false");
    return j_.at(key).get<bool>();
  }

  std::optional<std::string> string(const std::string& key) {
    if (!has(key)) return std::nullopt;
    if (!j_.at(key).is_string()) throw ConfigError(at(key) + " must be a string");
    return j_.at(key).get<std::string>();
  }

  std::optional<std::vector<double>> numbers(const std::string& key) {
    if (!has(key)) return std::nullopt;
    std::vector<double> out;
    for (const json& v : array(key)) out.push_back(to_number(v, key));
    return out;
  }

  std::optional<std::vector<int>> integers(const std::string& key) {
    if (!has(key)) return std::nullopt;
    std::vector<int> out;
    for (const json& v : array(key)) out.push_back(static_cast<int>(to_integer(v, key)));
    return out;
  }

  const json& array(const std::string& key) {
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(at(key) + " must be an array");
    return v;
  }

  std::optional<ObjectReader> object(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return ObjectReader(j_.at(key), at(key));
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  // Throws on keys that were never read.
  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + at(item.key()) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  double to_number(const json& v, const std::string& key) const {
    if (!v.is_number()) throw ConfigError(at(key) + " must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(at(key) + " must be finite");
    return d;
  }

  long long to_integer(const json& v, const std::string& key) const {
    if (!v.is_number_integer()) throw ConfigError(at(key) + " must be an integer");
    return v.get<long long>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Catches library validation errors and reports them as configuration errors.
template <class F>
void validated(F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
}

struct ModelChoice {
  FamilyLink family = FamilyLink::poisson_log();
  bool intercept = true;
};

ModelChoice read_model(ObjectReader& top, bool default_intercept) {
  ModelChoice m;
  m.intercept = default_intercept;
  auto r = top.object("model");
  if (!r) return m;
  const std::string family = r->string("family").value_or("poisson");
  const std::string link = r->string("link").value_or(family == "gaussian" ? "identity" : "log");
  const double dispersion = r->number("dispersion").value_or(1.0);
  m.intercept = r->boolean("intercept").value_or(default_intercept);
  r->finish();
  validated([&] { m.family = FamilyLink::from_names(family, link, dispersion); });
  return m;
}

FitConfig read_fit(ObjectReader& top) {
  FitConfig fc;
  auto r = top.object("fit");
  if (!r) return fc;
  if (auto v = r->numbers("lambda_grid")) fc.lambda_grid = *v;
  if (auto v = r->small_integer("max_outer_iter")) fc.max_outer_iter = *v;
  if (auto v = r->small_integer("inner_em_iter")) fc.inner_em_iter = *v;
  if (auto v = r->number("tol")) fc.tol = *v;
  if (auto v = r->small_integer("rho_grid_points")) fc.rho_search.grid_points = *v;
  if (auto v = r->number("rho_tol")) fc.rho_search.tol = *v;
  if (auto v = r->small_integer("divergence_window")) fc.divergence_window = *v;
  if (auto v = r->boolean("penalize_intercept")) fc.penalize_intercept = *v;
  if (auto v = r->numbers("penalty_mask")) {
    fc.penalty_mask = Eigen::Map<const VectorXd>(v->data(), static_cast<Index>(v->size()));
  }
  r->finish();
  return fc;
}

SCConfig read_sc(ObjectReader& top) {
  SCConfig sc;
  auto r = top.object("sc");
  if (!r) return sc;
  if (auto v = r->numbers("s_grid")) sc.s_grid = *v;
  if (auto v = r->numbers("l_grid")) sc.l_grid = *v;
  if (auto v = r->integers("k_grid")) sc.k_grid = *v;
  if (auto v = r->small_integer("cv_folds")) sc.cv_folds = *v;
  if (auto v = r->small_integer("restarts")) sc.restarts = *v;
  if (auto v = r->boolean("restart_every_iteration")) sc.restart_every_iteration = *v;
  if (auto v = r->number("tol")) sc.tol = *v;
  if (auto v = r->small_integer("max_ascent_iter")) sc.max_ascent_iter = *v;
  if (auto v = r->boolean("eigen_shortcut")) sc.eigen_shortcut = *v;
  r->finish();
  return sc;
}

OutputPaths read_output(ObjectReader& top, bool truth, bool csv) {
  OutputPaths out;
  auto r = top.object("output");
  if (!r) return out;
  out.path = r->string("path");
  if (truth) out.truth = r->string("truth");
  if (csv) out.csv = r->string("csv");
  r->finish();
  return out;
}

int read_threads(ObjectReader& r) {
  const int threads = r.small_integer("threads").value_or(1);
  if (threads < 1) throw ConfigError("threads must be >= 1");
  return threads;
}

// Generative settings shared by simulate and study configs.
SimSpec read_sim_spec(ObjectReader& r) {
  SimSpec spec;
  const ModelChoice m = read_model(r, false);
  spec.family = m.family;
  spec.intercept = m.intercept;
  const auto N = r.integer("N");
  const auto T = r.integer("T");
  if (!N || !T) throw ConfigError(r.at("N") + " and " + r.at("T") + " are required");
  if (*N < 1 || *T < 1 || *N > 100000000 || *T > 100000000) {
    throw ConfigError("N and T must be positive");
  }
  const auto beta = r.numbers("beta");
  if (!beta) throw ConfigError(r.at("beta") + " is required");
  spec.true_params.beta = Eigen::Map<const VectorXd>(beta->data(), static_cast<Index>(beta->size()));
  spec.true_params.sigma1_sq = r.number("sigma1_sq").value_or(0.0);
  spec.true_params.sigma2_sq = r.number("sigma2_sq").value_or(0.0);
  spec.true_params.rho = r.number("rho").value_or(0.0);
  spec.x_correlation = r.number("x_correlation").value_or(0.0);
  validated([&] {
    spec.layout = PanelLayout(static_cast<Index>(*N), static_cast<Index>(*T));
    spec.validate();
  });
  return spec;
}

}  // namespace

nlohmann::json parse_json_text(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
}

RunConfig parse_run_config(const nlohmann::json& doc) {
  ObjectReader r(doc, "");
  RunConfig c;
  const ModelChoice m = read_model(r, true);
  c.family = m.family;
  c.intercept = m.intercept;
  c.fit = read_fit(r);
  c.sc = read_sc(r);
  c.seed = r.seed("seed").value_or(1);
  c.threads = read_threads(r);
  c.output = read_output(r, false, false);
  r.finish();
  c.sc.validate();
  return c;
}

SimulateConfig parse_simulate_config(const nlohmann::json& doc) {
  ObjectReader r(doc, "");
  SimulateConfig c;
  c.spec = read_sim_spec(r);
  c.spec.seed = r.seed("seed").value_or(1);
  c.output = read_output(r, true, false);
  r.finish();
  return c;
}

StudyRunConfig parse_study_config(const nlohmann::json& doc) {
  ObjectReader r(doc, "");
  StudyRunConfig c;
  StudyConfig& s = c.study;
  const std::string kind = r.string("kind").value_or("single");
  if (kind == "single") {
    s.kind = StudyKind::single;
  } else if (kind == "grid_nt") {
    s.kind = StudyKind::grid_nt;
  } else if (kind == "grid_rho") {
    s.kind = StudyKind::grid_rho;
  } else {
    throw ConfigError("kind must be one of single, grid_nt, grid_rho");
  }
  if (r.has("nt_grid")) {
    for (const json& cell : r.array("nt_grid")) {
      if (!cell.is_array() || cell.size() != 2 || !cell[0].is_number_integer() ||
          !cell[1].is_number_integer()) {
        throw ConfigError("nt_grid entries must be [N, T] integer pairs");
      }
      s.nt_grid.emplace_back(cell[0].get<Index>(), cell[1].get<Index>());
    }
  }
  if (auto v = r.numbers("rho_grid")) s.rho_grid = *v;
  auto base = r.object("base");
  if (!base) throw ConfigError("base is required");
  s.base = read_sim_spec(*base);
  base->finish();
  s.n_replicates = r.small_integer("n_replicates").value_or(20);
  const std::string flavor = r.string("flavor").value_or("ridge_em");
  if (flavor == "ridge_em") {
    s.flavor = FitFlavor::ridge_em;
  } else if (flavor == "sc_em") {
    s.flavor = FitFlavor::sc_em;
  } else {
    throw ConfigError("flavor must be ridge_em or sc_em");
  }
  s.fit = read_fit(r);
  s.sc = read_sc(r);
  s.seed = r.seed("seed").value_or(1);
  s.threads = read_threads(r);
  c.output = read_output(r, false, true);
  r.finish();
  s.validate();
  return c;
}

}  // namespace panelglmm
