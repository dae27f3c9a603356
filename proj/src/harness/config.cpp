#include "hloba/harness/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <tomlplusplus/toml.hpp>

#include "hloba/error.hpp"

namespace hloba::harness {

std::string mode_name(ExperimentMode m) {
  return m == ExperimentMode::idealized_twin ? "idealized_twin" : "imperfect_reference";
}

ExperimentMode mode_from_name(const std::string& name) {
  if (name == "idealized_twin") return ExperimentMode::idealized_twin;
  if (name == "imperfect_reference") return ExperimentMode::imperfect_reference;
  throw ConfigurationError("unknown experiment mode '" + name + "'");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::hloba: return "hloba";
    case Method::h3dvar: return "h3dvar";
    case Method::h4dvar: return "h4dvar";
    case Method::hl3dvar: return "hl3dvar";
    case Method::hl4dvar: return "hl4dvar";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  for (Method m : {Method::hloba, Method::h3dvar, Method::h4dvar, Method::hl3dvar, Method::hl4dvar}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigurationError("unknown method '" + name + "'");
}

bool is_latent(Method m) { return m == Method::hloba || m == Method::hl3dvar || m == Method::hl4dvar; }
bool is_four_dimensional(Method m) { return m == Method::h4dvar || m == Method::hl4dvar; }

SolverSettings MethodSettings::solver() const {
  SolverSettings s;
  if (optimizer == "lbfgs" || (optimizer == "default" && name == Method::h3dvar)) {
    s.optimizer = diffcore::OptimizerKind::lbfgs;
  } else if (optimizer == "adam" || optimizer == "default") {
    s.optimizer = diffcore::OptimizerKind::adam;
  } else {
    throw ConfigurationError("method.optimizer must be default, adam or lbfgs");
  }
  s.learning_rate = learning_rate > 0.0 ? learning_rate : (is_latent(name) ? 0.05 : 0.02);
  s.max_iters = max_iters;
  s.patience = patience;
  s.min_improvement = min_improvement;
  s.tolerance = tolerance;
  return s;
}

double ExperimentConfig::truth_run_forcing() const {
  if (experiment.mode == ExperimentMode::idealized_twin) return model.forcing;
  return truth_forcing.value_or(8.2);
}

double ExperimentConfig::withheld_fraction() const {
  if (observations.withheld_fraction >= 0.0) return observations.withheld_fraction;
  return experiment.mode == ExperimentMode::imperfect_reference ? 0.1 : 0.0;
}

void ExperimentConfig::validate() const {
  model.validate();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigurationError(what);
  };
  require(latent.n_z >= 1 && latent.n_z <= model.n_x, "latent.n_z must lie in [1, model.n_x]");
  require(latent.archive_size >= model.n_x && latent.archive_size >= 500, "latent.archive_size must be >= 500 and >= n_x");
  require(latent.spin_up_steps >= 0, "latent.spin_up_steps must be >= 0");
  require(observations.stride >= 1 && observations.offset >= 0 && observations.offset < observations.stride,
          "observations.stride >= 1 and 0 <= offset < stride required");
  require(observations.noise_level >= 0.0, "observations.noise_level must be >= 0");
  require(observations.assumed_error_level() > 0.0, "observations.error_level must be positive");
  require(withheld_fraction() >= 0.0 && withheld_fraction() < 1.0, "observations.withheld_fraction must lie in [0, 1)");
  require(observations.qc_lag >= 0, "observations.qc_lag must be >= 0");
  require(covariance.ensemble_size == 0 || covariance.ensemble_size >= 2,
          "covariance.ensemble_size must be 0 or at least 2");
  covariance.weights.validate();
  require(covariance.localization_radius >= 0.0, "covariance.localization_radius must be >= 0");
  require(covariance.nmc_short_lead >= 1 && covariance.nmc_long_lead > covariance.nmc_short_lead,
          "covariance NMC leads must satisfy 1 <= short < long");
  require(covariance.nmc_pairs >= 10, "covariance.nmc_pairs must be >= 10");
  require(covariance.nmc_perturbation >= 0.0, "covariance.nmc_perturbation must be >= 0");
  require(covariance.variance_floor > 0.0, "covariance.variance_floor must be positive");
  method.solver();
  require(method.max_iters >= 1 && method.patience >= 1, "method.max_iters and method.patience must be >= 1");
  require(method.tolerance > 0.0, "method.tolerance must be positive");
  require(experiment.cycles >= 1, "experiment.cycles must be >= 1");
  require(experiment.window_slots >= 1, "experiment.window_slots must be >= 1");
  require(experiment.horizon >= 1, "experiment.horizon must be >= 1");
  require(experiment.spin_up_cycles >= 0, "experiment.spin_up_cycles must be >= 0");
  require(experiment.divergence_factor > 0.0 && experiment.divergence_cycles >= 1, "invalid divergence settings");
  require(experiment.initial_background == "climatology" || experiment.initial_background == "truth",
          "experiment.initial_background must be 'climatology' or 'truth'");
  require(experiment.tuning_cycles >= 1, "experiment.tuning_cycles must be >= 1");
  for (int w : experiment.aggregation_windows) require(w >= 1, "aggregation windows must be >= 1");
  require(truth_run_forcing() == truth_run_forcing(), "truth forcing must be a number");
}

namespace {

using Node = toml::node;

std::string where(const std::string& section, const std::string& key) { return section + "." + key; }

double as_double(const Node& n, const std::string& at) {
  if (auto v = n.value<double>(); v && (n.is_floating_point() || n.is_integer())) return *v;
  throw ConfigurationError(at + " must be a number");
}

long long as_integer(const Node& n, const std::string& at) {
  if (auto v = n.as_integer()) return v->get();
  throw ConfigurationError(at + " must be an integer");
}

int as_int(const Node& n, const std::string& at) { return static_cast<int>(as_integer(n, at)); }

std::uint64_t as_seed(const Node& n, const std::string& at) {
  const long long v = as_integer(n, at);
  if (v < 0) throw ConfigurationError(at + " must be non-negative");
  return static_cast<std::uint64_t>(v);
}

bool as_bool(const Node& n, const std::string& at) {
  if (auto v = n.as_boolean()) return v->get();
  throw ConfigurationError(at + " must be a boolean");
}

std::string as_string(const Node& n, const std::string& at) {
  if (auto v = n.as_string()) return v->get();
  throw ConfigurationError(at + " must be a string");
}

template <class T, class F>
std::vector<T> as_vector(const Node& n, const std::string& at, F element) {
  const auto* arr = n.as_array();
  if (arr == nullptr) throw ConfigurationError(at + " must be an array");
  std::vector<T> out;
  for (const auto& e : *arr) out.push_back(element(e, at));
  return out;
}

std::vector<double> as_doubles(const Node& n, const std::string& at) { return as_vector<double>(n, at, as_double); }
std::vector<int> as_ints(const Node& n, const std::string& at) { return as_vector<int>(n, at, as_int); }

latent::Activation as_activation(const Node& n, const std::string& at) {
  try {
    return latent::activation_from_name(as_string(n, at));
  } catch (const Error&) {
    throw ConfigurationError(at + " must be 'identity' or 'tanh'");
  }
}

using Setter = std::function<void(const Node&, const std::string&)>;
using Section = std::map<std::string, Setter>;

std::map<std::string, Section> sections(ExperimentConfig& c) {
  auto& m = c.model;
  auto& l = c.latent;
  auto& o = c.observations;
  auto& v = c.covariance;
  auto& me = c.method;
  auto& e = c.experiment;
  return {
      {"model",
       {{"n_x", [&](const Node& n, const std::string& a) { m.n_x = as_int(n, a); }},
        {"forcing", [&](const Node& n, const std::string& a) { m.forcing = as_double(n, a); }},
        {"dt", [&](const Node& n, const std::string& a) { m.dt = as_double(n, a); }},
        {"steps_per_da_interval", [&](const Node& n, const std::string& a) { m.steps_per_da_interval = as_int(n, a); }},
        {"blowup_threshold", [&](const Node& n, const std::string& a) { m.blowup_threshold = as_double(n, a); }},
        {"truth_forcing", [&](const Node& n, const std::string& a) { c.truth_forcing = as_double(n, a); }}}},
      {"latent",
       {{"variant",
         [&](const Node& n, const std::string& a) {
           const std::string s = as_string(n, a);
           if (s != "linear" && s != "mlp") throw ConfigurationError(a + " must be 'linear' or 'mlp'");
           l.variant = s == "linear" ? latent::AeVariant::linear : latent::AeVariant::mlp;
         }},
        {"n_z", [&](const Node& n, const std::string& a) { l.n_z = as_int(n, a); }},
        {"archive_size", [&](const Node& n, const std::string& a) { l.archive_size = as_int(n, a); }},
        {"archive_seed", [&](const Node& n, const std::string& a) { l.archive_seed = as_seed(n, a); }},
        {"spin_up_steps", [&](const Node& n, const std::string& a) { l.spin_up_steps = as_int(n, a); }},
        {"ae_seed", [&](const Node& n, const std::string& a) { l.ae_seed = as_seed(n, a); }},
        {"o2l_seed", [&](const Node& n, const std::string& a) { l.o2l_seed = as_seed(n, a); }},
        {"epochs", [&](const Node& n, const std::string& a) { l.ae_schedule.epochs = as_int(n, a); }},
        {"batch_size", [&](const Node& n, const std::string& a) { l.ae_schedule.batch_size = as_int(n, a); }},
        {"learning_rate", [&](const Node& n, const std::string& a) { l.ae_schedule.learning_rate = as_double(n, a); }},
        {"warmup_fraction",
         [&](const Node& n, const std::string& a) { l.ae_schedule.warmup_fraction = as_double(n, a); }},
        {"validation_fraction",
         [&](const Node& n, const std::string& a) { l.ae_schedule.validation_fraction = as_double(n, a); }},
        {"hidden_widths", [&](const Node& n, const std::string& a) { l.ae_schedule.hidden_widths = as_ints(n, a); }},
        {"hidden_activation",
         [&](const Node& n, const std::string& a) { l.ae_schedule.hidden_activation = as_activation(n, a); }},
        {"o2l_epochs", [&](const Node& n, const std::string& a) { l.o2l_schedule.epochs = as_int(n, a); }},
        {"o2l_batch_size", [&](const Node& n, const std::string& a) { l.o2l_schedule.batch_size = as_int(n, a); }},
        {"o2l_learning_rate",
         [&](const Node& n, const std::string& a) { l.o2l_schedule.learning_rate = as_double(n, a); }},
        {"o2l_hidden_widths", [&](const Node& n, const std::string& a) { l.o2l_options.hidden_widths = as_ints(n, a); }},
        {"o2l_mask_min", [&](const Node& n, const std::string& a) { l.o2l_options.mask_min = as_double(n, a); }},
        {"o2l_drop_fraction",
         [&](const Node& n, const std::string& a) { l.o2l_options.drop_fraction = as_double(n, a); }},
        {"o2l_weight_smoothing_width",
         [&](const Node& n, const std::string& a) { l.o2l_options.weight_smoothing_width = as_int(n, a); }},
        {"ae_checkpoint", [&](const Node& n, const std::string& a) { l.ae_checkpoint = as_string(n, a); }},
        {"o2l_checkpoint", [&](const Node& n, const std::string& a) { l.o2l_checkpoint = as_string(n, a); }}}},
      {"observations",
       {{"stride", [&](const Node& n, const std::string& a) { o.stride = as_int(n, a); }},
        {"offset", [&](const Node& n, const std::string& a) { o.offset = as_int(n, a); }},
        {"noise_level", [&](const Node& n, const std::string& a) { o.noise_level = as_double(n, a); }},
        {"error_level", [&](const Node& n, const std::string& a) { o.error_level = as_double(n, a); }},
        {"withheld_fraction", [&](const Node& n, const std::string& a) { o.withheld_fraction = as_double(n, a); }},
        {"qc_lag", [&](const Node& n, const std::string& a) { o.qc_lag = as_int(n, a); }}}},
      {"covariance",
       {{"ensemble_size", [&](const Node& n, const std::string& a) { v.ensemble_size = as_int(n, a); }},
        {"alpha_ens", [&](const Node& n, const std::string& a) { v.weights.alpha_ens = as_double(n, a); }},
        {"beta_ens", [&](const Node& n, const std::string& a) { v.weights.beta_ens = as_double(n, a); }},
        {"inflation_b", [&](const Node& n, const std::string& a) { v.weights.inflation_b = as_double(n, a); }},
        {"inflation_r", [&](const Node& n, const std::string& a) { v.weights.inflation_r = as_double(n, a); }},
        {"localization_radius", [&](const Node& n, const std::string& a) { v.localization_radius = as_double(n, a); }},
        {"nmc_short_lead", [&](const Node& n, const std::string& a) { v.nmc_short_lead = as_int(n, a); }},
        {"nmc_long_lead", [&](const Node& n, const std::string& a) { v.nmc_long_lead = as_int(n, a); }},
        {"nmc_pairs", [&](const Node& n, const std::string& a) { v.nmc_pairs = as_int(n, a); }},
        {"nmc_perturbation", [&](const Node& n, const std::string& a) { v.nmc_perturbation = as_double(n, a); }},
        {"variance_floor", [&](const Node& n, const std::string& a) { v.variance_floor = as_double(n, a); }},
        {"centered_r", [&](const Node& n, const std::string& a) { v.centered_r = as_bool(n, a); }},
        {"checkpoint", [&](const Node& n, const std::string& a) { v.checkpoint = as_string(n, a); }}}},
      {"method",
       {{"name", [&](const Node& n, const std::string& a) { me.name = method_from_name(as_string(n, a)); }},
        {"optimizer", [&](const Node& n, const std::string& a) { me.optimizer = as_string(n, a); }},
        {"learning_rate", [&](const Node& n, const std::string& a) { me.learning_rate = as_double(n, a); }},
        {"max_iters", [&](const Node& n, const std::string& a) { me.max_iters = as_int(n, a); }},
        {"patience", [&](const Node& n, const std::string& a) { me.patience = as_int(n, a); }},
        {"min_improvement", [&](const Node& n, const std::string& a) { me.min_improvement = as_double(n, a); }},
        {"tolerance", [&](const Node& n, const std::string& a) { me.tolerance = as_double(n, a); }}}},
      {"experiment",
       {{"mode", [&](const Node& n, const std::string& a) { e.mode = mode_from_name(as_string(n, a)); }},
        {"cycles", [&](const Node& n, const std::string& a) { e.cycles = as_int(n, a); }},
        {"window_slots", [&](const Node& n, const std::string& a) { e.window_slots = as_int(n, a); }},
        {"horizon", [&](const Node& n, const std::string& a) { e.horizon = as_int(n, a); }},
        {"spin_up_cycles", [&](const Node& n, const std::string& a) { e.spin_up_cycles = as_int(n, a); }},
        {"seed", [&](const Node& n, const std::string& a) { e.seed = as_seed(n, a); }},
        {"tuning", [&](const Node& n, const std::string& a) { e.tuning = as_bool(n, a); }},
        {"aggregation_windows", [&](const Node& n, const std::string& a) { e.aggregation_windows = as_ints(n, a); }},
        {"divergence_factor", [&](const Node& n, const std::string& a) { e.divergence_factor = as_double(n, a); }},
        {"divergence_cycles", [&](const Node& n, const std::string& a) { e.divergence_cycles = as_int(n, a); }},
        {"tuning_cycles", [&](const Node& n, const std::string& a) { e.tuning_cycles = as_int(n, a); }},
        {"tuning_seed", [&](const Node& n, const std::string& a) { e.tuning_seed = as_seed(n, a); }},
        {"initial_background", [&](const Node& n, const std::string& a) { e.initial_background = as_string(n, a); }},
        {"tuning_alpha", [&](const Node& n, const std::string& a) { e.tuning_alpha = as_doubles(n, a); }},
        {"tuning_beta", [&](const Node& n, const std::string& a) { e.tuning_beta = as_doubles(n, a); }},
        {"tuning_inflation", [&](const Node& n, const std::string& a) { e.tuning_inflation = as_doubles(n, a); }}}},
  };
}

nlohmann::json schedule_json(const latent::TrainingSchedule& s) {
  return {{"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"learning_rate", s.learning_rate},
          {"warmup_fraction", s.warmup_fraction},
          {"validation_fraction", s.validation_fraction},
          {"hidden_widths", s.hidden_widths},
          {"hidden_activation", latent::activation_name(s.hidden_activation)}};
}

void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(*it, prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out[prefix] = j.dump();
  }
}

}  // namespace

ExperimentConfig config_from_toml(const std::string& text) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "TOML parse error: " << e.description() << " at line " << e.source().begin.line;
    throw ConfigurationError(msg.str());
  }
  ExperimentConfig config;
  auto table = sections(config);
  for (auto&& [sec_key, sec_node] : root) {
    const std::string sec(sec_key.str());
    auto s = table.find(sec);
    if (s == table.end()) throw ConfigurationError("unknown config section [" + sec + "]");
    const auto* body = sec_node.as_table();
    if (body == nullptr) throw ConfigurationError("[" + sec + "] must be a table");
    for (auto&& [key, node] : *body) {
      const std::string k(key.str());
      auto setter = s->second.find(k);
      if (setter == s->second.end()) throw ConfigurationError("unknown config key " + where(sec, k));
      setter->second(node, where(sec, k));
    }
  }
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return config_from_toml(text.str());
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["model"] = {{"n_x", c.model.n_x},
                {"forcing", c.model.forcing},
                {"dt", c.model.dt},
                {"steps_per_da_interval", c.model.steps_per_da_interval},
                {"blowup_threshold", c.model.blowup_threshold},
                {"truth_forcing", c.truth_run_forcing()}};
  j["latent"] = {{"variant", c.latent.variant == latent::AeVariant::linear ? "linear" : "mlp"},
                 {"n_z", c.latent.n_z},
                 {"archive_size", c.latent.archive_size},
                 {"archive_seed", c.latent.archive_seed},
                 {"spin_up_steps", c.latent.spin_up_steps},
                 {"ae_seed", c.latent.ae_seed},
                 {"o2l_seed", c.latent.o2l_seed},
                 {"ae_schedule", schedule_json(c.latent.ae_schedule)},
                 {"o2l_schedule", schedule_json(c.latent.o2l_schedule)},
                 {"o2l_hidden_widths", c.latent.o2l_options.hidden_widths},
                 {"o2l_mask_min", c.latent.o2l_options.mask_min},
                 {"o2l_drop_fraction", c.latent.o2l_options.drop_fraction},
                 {"o2l_weight_smoothing_width", c.latent.o2l_options.weight_smoothing_width},
                 {"ae_checkpoint", c.latent.ae_checkpoint},
                 {"o2l_checkpoint", c.latent.o2l_checkpoint}};
  j["observations"] = {{"stride", c.observations.stride},
                       {"offset", c.observations.offset},
                       {"noise_level", c.observations.noise_level},
                       {"error_level", c.observations.assumed_error_level()},
                       {"withheld_fraction", c.withheld_fraction()},
                       {"qc_lag", c.observations.qc_lag},
                       {"qc", c.qc_enabled()}};
  j["covariance"] = {{"ensemble_size", c.covariance.ensemble_size},
                     {"alpha_ens", c.covariance.weights.alpha_ens},
                     {"beta_ens", c.covariance.weights.beta_ens},
                     {"inflation_b", c.covariance.weights.inflation_b},
                     {"inflation_r", c.covariance.weights.inflation_r},
                     {"localization_radius", c.covariance.localization_radius},
                     {"nmc_short_lead", c.covariance.nmc_short_lead},
                     {"nmc_long_lead", c.covariance.nmc_long_lead},
                     {"nmc_pairs", c.covariance.nmc_pairs},
                     {"nmc_perturbation", c.covariance.nmc_perturbation},
                     {"variance_floor", c.covariance.variance_floor},
                     {"centered_r", c.covariance.centered_r},
                     {"checkpoint", c.covariance.checkpoint}};
  const auto solver = c.method.solver();
  j["method"] = {{"name", method_name(c.method.name)},
                 {"optimizer", solver.optimizer == diffcore::OptimizerKind::lbfgs ? "lbfgs" : "adam"},
                 {"learning_rate", solver.learning_rate},
                 {"max_iters", c.method.max_iters},
                 {"patience", c.method.patience},
                 {"min_improvement", c.method.min_improvement},
                 {"tolerance", c.method.tolerance}};
  const auto& e = c.experiment;
  j["experiment"] = {{"mode", mode_name(e.mode)},
                     {"cycles", e.cycles},
                     {"window_slots", e.window_slots},
                     {"horizon", e.horizon},
                     {"spin_up_cycles", e.spin_up_cycles},
                     {"seed", e.seed},
                     {"tuning", e.tuning},
                     {"aggregation_windows", e.aggregation_windows},
                     {"divergence_factor", e.divergence_factor},
                     {"divergence_cycles", e.divergence_cycles},
                     {"tuning_cycles", e.tuning_cycles},
                     {"tuning_seed", e.tuning_seed},
                     {"initial_background", e.initial_background},
                     {"tuning_alpha", e.tuning_alpha},
                     {"tuning_beta", e.tuning_beta},
                     {"tuning_inflation", e.tuning_inflation}};
  return j;
}

void check_paired(const ExperimentConfig& a, const ExperimentConfig& b, const std::vector<std::string>& factor) {
  std::map<std::string, std::string> fa, fb;
  flatten(to_json(a), "", fa);
  flatten(to_json(b), "", fb);
  const std::set<std::string> allowed(factor.begin(), factor.end());
  std::vector<std::string> differing;
  for (const auto& [key, value] : fa) {
    if (fb.at(key) != value && !allowed.count(key)) differing.push_back(key);
  }
  if (!differing.empty()) {
    std::string msg = "paired configs differ outside the declared factor:";
    for (const auto& k : differing) msg += " " + k;
    throw ConfigurationError(msg);
  }
}

}  // namespace hloba::harness
