#include "clbd/config.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace clbd {
namespace {

using nlohmann::json;

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

// Reads typed fields from one JSON object, tracking which keys were consumed.
class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  template <typename T>
  void opt(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(join(path_, key), "wrong type");
    }
  }

  void opt_size(const std::string& key, std::size_t& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(join(path_, key), "expected a non-negative integer");
    out = v.get<std::size_t>();
  }

  void opt_real(const std::string& key, double& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number()) throw ConfigError(join(path_, key), "expected a number");
    out = v.get<double>();
  }

  bool has(const std::string& key) const { return obj_.contains(key); }
  const json& at(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }
  std::string child(const std::string& key) const { return join(path_, key); }

  void finish() const {
    for (const auto& [k, _] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError(join(path_, k), "unknown field");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

DatasetKind parse_dataset_kind(const std::string& s, const std::string& field) {
  if (s == "synthetic") return DatasetKind::synthetic;
  if (s == "split_mnist") return DatasetKind::split_mnist;
  if (s == "permuted_mnist") return DatasetKind::permuted_mnist;
  throw ConfigError(field, "unknown dataset kind '" + s + "'");
}

AttackMode parse_attack_mode(const std::string& s, const std::string& field) {
  if (s == "none") return AttackMode::none;
  if (s == "btb") return AttackMode::btb;
  if (s == "ltb") return AttackMode::ltb;
  if (s == "badnets") return AttackMode::badnets;
  throw ConfigError(field, "unknown attack mode '" + s + "'");
}

ClStrategy parse_strategy(Reader& r) {
  std::string name = "ewc";
  r.opt("name", name);
  if (name == "ewc") {
    Ewc s;
    r.opt_real("lambda", s.lambda);
    return s;
  }
  if (name == "si") {
    Si s;
    r.opt_real("c", s.c);
    r.opt_real("xi", s.xi);
    return s;
  }
  if (name == "xdg") {
    Xdg s;
    r.opt_real("gate_fraction", s.gate_fraction);
    return s;
  }
  if (name == "lwf") {
    Lwf s;
    r.opt_real("temperature", s.temperature);
    r.opt_real("distill_weight", s.distill_weight);
    return s;
  }
  if (name == "agem") {
    Agem s;
    r.opt_size("buffer_per_task", s.buffer_per_task);
    r.opt_size("reference_batch", s.reference_batch);
    return s;
  }
  throw ConfigError(r.child("name"), "unknown strategy '" + name + "'");
}

json strategy_json(const ClStrategy& s) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Ewc>) return {{"name", "ewc"}, {"lambda", v.lambda}};
        if constexpr (std::is_same_v<T, Si>) return {{"name", "si"}, {"c", v.c}, {"xi", v.xi}};
        if constexpr (std::is_same_v<T, Xdg>) return {{"name", "xdg"}, {"gate_fraction", v.gate_fraction}};
        if constexpr (std::is_same_v<T, Lwf>) {
          return {{"name", "lwf"}, {"temperature", v.temperature}, {"distill_weight", v.distill_weight}};
        }
        if constexpr (std::is_same_v<T, Agem>) {
          return {{"name", "agem"}, {"buffer_per_task", v.buffer_per_task}, {"reference_batch", v.reference_batch}};
        }
      },
      s);
}

TriggerSpec parse_trigger(Reader& r) {
  std::string kind = "static";
  r.opt("kind", kind);
  TriggerSpec t;
  if (kind == "static") {
    t = TriggerSpec::static_default();
  } else if (kind == "dynamic") {
    t = TriggerSpec::dynamic_default();
  } else {
    throw ConfigError(r.child("kind"), "expected 'static' or 'dynamic'");
  }
  r.opt_size("height", t.height);
  r.opt_size("width", t.width);
  r.opt_real("value", t.value);
  r.opt_size("target_label", t.target_label);
  r.opt_real("poison_ratio", t.poison_ratio);
  r.opt("seed", t.seed);
  return t;
}

json trigger_json(const TriggerSpec& t) {
  return {{"kind", t.kind == TriggerKind::static_patch ? "static" : "dynamic"},
          {"height", t.height},
          {"width", t.width},
          {"value", t.value},
          {"target_label", t.target_label},
          {"poison_ratio", t.poison_ratio},
          {"seed", t.seed}};
}

json to_json_value(const ExperimentConfig& c, bool with_output) {
  const auto& d = c.dataset;
  const auto& a = c.attack;
  json j;
  j["run_id"] = c.run_id;
  j["dataset"] = {{"kind", to_string(d.kind)},
                  {"path", d.path},
                  {"seed", d.seed},
                  {"tasks", d.tasks},
                  {"classes_per_task", d.classes_per_task},
                  {"dim", d.dim},
                  {"train_per_class", d.train_per_class},
                  {"test_per_class", d.test_per_class},
                  {"noise_sd", d.noise_sd},
                  {"latent_dim", d.latent_dim},
                  {"separation", d.separation},
                  {"feature_scale", d.feature_scale},
                  {"max_train_per_class", d.max_train_per_class},
                  {"max_test_per_class", d.max_test_per_class}};
  j["model"] = {{"hidden", c.model.hidden}, {"seed", c.model.seed}};
  j["strategy"] = strategy_json(c.strategy);
  j["attack"] = {{"mode", to_string(a.mode)},
                 {"attacked_task", a.attacked_task},
                 {"trigger", trigger_json(a.trigger)},
                 {"btb",
                  {{"n", a.btb.n},
                   {"alpha", a.btb.alpha},
                   {"beta", a.btb.beta},
                   {"tau_factor", a.btb.tau_factor},
                   {"mu0", a.btb.mu0},
                   {"gamma", a.btb.gamma},
                   {"lambda_bd", a.btb.lambda_bd},
                   {"reference_size", a.btb.reference_size},
                   {"plateau_window", a.btb.plateau_window},
                   {"plateau_tol", a.btb.plateau_tol},
                   {"divergence_factor", a.btb.divergence_factor}}},
                 {"ltb",
                  {{"v_trigger", a.ltb.v_trigger},
                   {"epsilon_factor", a.ltb.epsilon_factor},
                   {"kappa_percentile", a.ltb.kappa_percentile},
                   {"p_regularization", a.ltb.p_regularization},
                   {"p_replay", a.ltb.p_replay},
                   {"latent_epochs", a.ltb.latent_epochs}}}};
  j["training"] = {{"epochs", c.training.epochs},
                   {"batch_size", c.training.batch_size},
                   {"learning_rate", c.training.learning_rate},
                   {"seed", c.training.seed},
                   {"fisher_samples", c.training.fisher_samples}};
  if (with_output) j["output"] = {{"directory", c.output_dir}};
  return j;
}

}  // namespace

ConfigError::ConfigError(std::string field, const std::string& message)
    : Error(field + ": " + message), field_(std::move(field)) {}

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::synthetic: return "synthetic";
    case DatasetKind::split_mnist: return "split_mnist";
    case DatasetKind::permuted_mnist: return "permuted_mnist";
  }
  return "?";
}

std::string to_string(AttackMode m) {
  switch (m) {
    case AttackMode::none: return "none";
    case AttackMode::btb: return "btb";
    case AttackMode::ltb: return "ltb";
    case AttackMode::badnets: return "badnets";
  }
  return "?";
}

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(root, "");
  r.opt("run_id", c.run_id);

  if (r.has("dataset")) {
    Reader d(r.at("dataset"), "dataset");
    std::string kind = to_string(c.dataset.kind);
    d.opt("kind", kind);
    c.dataset.kind = parse_dataset_kind(kind, "dataset.kind");
    d.opt("path", c.dataset.path);
    d.opt("seed", c.dataset.seed);
    d.opt_size("tasks", c.dataset.tasks);
    d.opt_size("classes_per_task", c.dataset.classes_per_task);
    d.opt_size("dim", c.dataset.dim);
    d.opt_size("train_per_class", c.dataset.train_per_class);
    d.opt_size("test_per_class", c.dataset.test_per_class);
    d.opt_real("noise_sd", c.dataset.noise_sd);
    d.opt_size("latent_dim", c.dataset.latent_dim);
    d.opt_real("separation", c.dataset.separation);
    d.opt_real("feature_scale", c.dataset.feature_scale);
    d.opt_size("max_train_per_class", c.dataset.max_train_per_class);
    d.opt_size("max_test_per_class", c.dataset.max_test_per_class);
    d.finish();
  }
  if (r.has("model")) {
    Reader m(r.at("model"), "model");
    m.opt("hidden", c.model.hidden);
    m.opt("seed", c.model.seed);
    m.finish();
  }
  if (r.has("strategy")) {
    Reader s(r.at("strategy"), "strategy");
    c.strategy = parse_strategy(s);
    s.finish();
  }
  if (r.has("attack")) {
    Reader a(r.at("attack"), "attack");
    std::string mode = to_string(c.attack.mode);
    a.opt("mode", mode);
    c.attack.mode = parse_attack_mode(mode, "attack.mode");
    a.opt_size("attacked_task", c.attack.attacked_task);
    if (a.has("trigger")) {
      Reader t(a.at("trigger"), "attack.trigger");
      c.attack.trigger = parse_trigger(t);
      t.finish();
    }
    if (a.has("btb")) {
      Reader b(a.at("btb"), "attack.btb");
      auto& cfg = c.attack.btb;
      b.opt_size("n", cfg.n);
      b.opt_real("alpha", cfg.alpha);
      b.opt_real("beta", cfg.beta);
      b.opt_real("tau_factor", cfg.tau_factor);
      b.opt_real("mu0", cfg.mu0);
      b.opt_real("gamma", cfg.gamma);
      b.opt_real("lambda_bd", cfg.lambda_bd);
      b.opt_size("reference_size", cfg.reference_size);
      b.opt_size("plateau_window", cfg.plateau_window);
      b.opt_real("plateau_tol", cfg.plateau_tol);
      b.opt_real("divergence_factor", cfg.divergence_factor);
      b.finish();
    }
    if (a.has("ltb")) {
      Reader l(a.at("ltb"), "attack.ltb");
      auto& cfg = c.attack.ltb;
      l.opt_real("v_trigger", cfg.v_trigger);
      l.opt_real("epsilon_factor", cfg.epsilon_factor);
      l.opt_real("kappa_percentile", cfg.kappa_percentile);
      l.opt_real("p_regularization", cfg.p_regularization);
      l.opt_real("p_replay", cfg.p_replay);
      l.opt_size("latent_epochs", cfg.latent_epochs);
      l.finish();
    }
    a.finish();
  }
  if (r.has("training")) {
    Reader t(r.at("training"), "training");
    t.opt_size("epochs", c.training.epochs);
    t.opt_size("batch_size", c.training.batch_size);
    t.opt_real("learning_rate", c.training.learning_rate);
    t.opt("seed", c.training.seed);
    t.opt_size("fisher_samples", c.training.fisher_samples);
    t.finish();
  }
  if (r.has("output")) {
    Reader o(r.at("output"), "output");
    o.opt("directory", c.output_dir);
    o.finish();
  }
  r.finish();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void ExperimentConfig::validate() const {
  const auto& d = dataset;
  if (run_id.empty()) throw ConfigError("run_id", "must not be empty");
  if (d.tasks == 0) throw ConfigError("dataset.tasks", "must be >= 1");
  if (d.classes_per_task < 2) throw ConfigError("dataset.classes_per_task", "must be >= 2");
  if (d.kind == DatasetKind::synthetic) {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d.dim))));
    if (side * side != d.dim) throw ConfigError("dataset.dim", "must be a perfect square");
    if (d.train_per_class == 0) throw ConfigError("dataset.train_per_class", "must be >= 1");
    if (d.test_per_class == 0) throw ConfigError("dataset.test_per_class", "must be >= 1");
    if (!(d.noise_sd >= 0.0)) throw ConfigError("dataset.noise_sd", "must be >= 0");
    if (d.latent_dim < d.classes_per_task) throw ConfigError("dataset.latent_dim", "must be >= classes_per_task");
    if (!(d.separation >= 0.0)) throw ConfigError("dataset.separation", "must be >= 0");
    if (!(d.feature_scale > 0.0)) throw ConfigError("dataset.feature_scale", "must be > 0");
  } else {
    if (d.path.empty()) throw ConfigError("dataset.path", "required for MNIST datasets");
    if (!std::filesystem::is_directory(d.path)) {
      throw ConfigError("dataset.path", "directory '" + d.path + "' does not exist");
    }
    if (!find_mnist(d.path)) throw ConfigError("dataset.path", "no MNIST IDX files under '" + d.path + "'");
    if (d.kind == DatasetKind::split_mnist && d.tasks * d.classes_per_task > 10) {
      throw ConfigError("dataset.tasks", "split MNIST supports at most 10 classes in total");
    }
  }
  if (model.hidden.empty()) throw ConfigError("model.hidden", "needs at least one hidden layer");
  for (std::size_t i = 0; i < model.hidden.size(); ++i) {
    if (model.hidden[i] == 0) throw ConfigError("model.hidden[" + std::to_string(i) + "]", "must be >= 1");
  }
  try {
    clbd::validate(strategy);
  } catch (const Error& e) {
    throw ConfigError("strategy", e.what());
  }
  if (attack.attacked_task >= d.tasks) {
    throw ConfigError("attack.attacked_task", "must be < dataset.tasks (" + std::to_string(d.tasks) + ")");
  }
  const std::size_t classes = d.kind == DatasetKind::permuted_mnist ? 10 : d.classes_per_task;
  if (attack.trigger.target_label >= classes) {
    throw ConfigError("attack.trigger.target_label", "must be < the per-task class count");
  }
  const std::size_t side = d.kind == DatasetKind::synthetic
                               ? static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d.dim))))
                               : 28;
  try {
    attack.trigger.validate(side);
  } catch (const Error& e) {
    throw ConfigError("attack.trigger", e.what());
  }
  try {
    attack.btb.validate();
  } catch (const Error& e) {
    throw ConfigError("attack.btb", e.what());
  }
  try {
    attack.ltb.validate();
  } catch (const Error& e) {
    throw ConfigError("attack.ltb", e.what());
  }
  if (training.epochs == 0) throw ConfigError("training.epochs", "must be >= 1");
  if (training.batch_size == 0) throw ConfigError("training.batch_size", "must be >= 1");
  if (!(training.learning_rate > 0.0)) throw ConfigError("training.learning_rate", "must be > 0");
}

std::string config_to_json(const ExperimentConfig& config, int indent) {
  return to_json_value(config, true).dump(indent);
}

std::string config_hash(const ExperimentConfig& config) {
  const std::string text = to_json_value(config, false).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void apply_environment(ExperimentConfig& config) {
  if (const char* dir = std::getenv("CLBD_DATA_DIR"); dir != nullptr && *dir != '\0') config.dataset.path = dir;
}

}  // namespace clbd
