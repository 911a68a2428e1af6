#include "cdm/config.hpp"

#include <cstdio>
#include <filesystem>
#include <set>

#include "cdm/error.hpp"
#include "cdm/io.hpp"
#include "cdm/rng.hpp"
#include "cdm/serialize.hpp"

namespace cdm::config {

namespace {

namespace fs = std::filesystem;

// Reads keys of one JSON object and rejects any key nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + prefix() + key + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + prefix() + key + "': " + e.what());
    }
  }

  void real(const char* key, double& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = serialize::real_from_json(j_.at(key));
    } catch (const FormatError& e) {
      throw ConfigError("config key '" + prefix() + key + "': " + e.what());
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, prefix() + key);
  }

  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

 private:
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_optimizer(Section& s, nn::AdamWConfig& o) {
  s.get("lr", o.lr);
  s.get("weight_decay", o.weight_decay);
  s.get("beta1", o.beta1);
  s.get("beta2", o.beta2);
  s.get("eps", o.eps);
}

json optimizer_json(const nn::AdamWConfig& o) {
  return {{"lr", o.lr}, {"weight_decay", o.weight_decay}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}};
}

void read_gbm(Section s, propensity::GbmConfig& g) {
  s.get("n_trees", g.n_trees);
  s.get("max_depth", g.max_depth);
  s.get("shrinkage", g.shrinkage);
  s.get("min_leaf", g.min_leaf);
  s.get("subsample", g.subsample);
  s.get("clip_lo", g.clip_lo);
  s.get("clip_hi", g.clip_hi);
}

json gbm_json(const propensity::GbmConfig& g) {
  return {{"n_trees", g.n_trees},   {"max_depth", g.max_depth}, {"shrinkage", g.shrinkage},
          {"min_leaf", g.min_leaf}, {"subsample", g.subsample}, {"clip_lo", g.clip_lo},
          {"clip_hi", g.clip_hi}};
}

std::string resolve(const std::string& p, const std::string& base_dir, const char* what) {
  fs::path path(p);
  if (path.is_relative() && !base_dir.empty()) path = fs::path(base_dir) / path;
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: " + path.string());
  return path.lexically_normal().string();
}

}  // namespace

bench::ExperimentConfig from_json(const json& j, const std::string& base_dir) {
  bench::ExperimentConfig c;
  {
    Section root(j, "");
    root.get("experiment_id", c.experiment_id);
    root.get("seed", c.seed);
    root.get("replicates", c.replicates);
    if (root.has("methods")) {
      std::vector<std::string> names;
      root.get("methods", names);
      c.methods.clear();
      for (const auto& n : names) c.methods.push_back(bench::parse_method(n));
    }
    root.get("external_results", c.external_results);
    for (auto& p : c.external_results) p = resolve(p, base_dir, "external results file");
    root.get("output", c.output);
    root.get("workers", c.workers);
    root.get("verbose", c.verbose);
    root.get("inline_timing", c.inline_timing);

    {
      Section data = root.sub("data");
      std::string source = "synthetic";
      data.get("source", source);
      if (source == "synthetic") {
        datagen::DgpConfig dgp;
        std::string scenario(datagen::to_string(dgp.scenario));
        std::string noise(datagen::to_string(dgp.noise));
        std::string variance(datagen::to_string(dgp.variance));
        data.get("scenario", scenario);
        data.get("noise", noise);
        data.get("variance", variance);
        dgp.scenario = datagen::parse_scenario(scenario);
        dgp.noise = datagen::parse_noise(noise);
        dgp.variance = datagen::parse_variance(variance);
        data.get("d", dgp.d);
        data.get("n_train", dgp.n_train);
        data.get("n_cal", dgp.n_cal);
        data.get("n_test", dgp.n_test);
        c.data = dgp;
      } else if (source == "csv") {
        bench::SemiSyntheticSource src;
        auto& s = src.config;
        data.get("path", src.path);
        if (src.path.empty()) throw ConfigError("data.path is required for a csv source");
        src.path = resolve(src.path, base_dir, "data file");
        data.get("treatment_column", s.treatment_column);
        data.get("outcome_column", s.outcome_column);
        data.get("covariate_columns", s.covariate_columns);
        data.get("fit_fraction", s.fit_fraction);
        data.get("n_train", s.n_train);
        data.get("n_cal", s.n_cal);
        data.get("n_test_candidates", s.n_test_candidates);
        data.get("iqr_factor", s.iqr_factor);
        data.get("pi_lo", s.pi_lo);
        data.get("pi_hi", s.pi_hi);
        if (data.has("test_filter")) {
          for (const auto& f : data.raw("test_filter")) {
            datagen::ColumnFilter cf;
            Section fs(f, "data.test_filter[]");
            fs.get("column", cf.column);
            fs.get("op", cf.op);
            fs.get("value", cf.value);
            s.test_filter.push_back(cf);
          }
        }
        read_gbm(data.sub("outcome_model"), s.outcome_model);
        read_gbm(data.sub("propensity_model"), s.propensity_model);
        c.data = src;
      } else {
        throw ConfigError("data.source must be 'synthetic' or 'csv', got '" + source + "'");
      }
    }
    {
      Section d = root.sub("diffusion");
      auto& t = c.diffusion;
      d.get("steps", t.steps);
      d.get("beta_min", t.beta_min);
      d.get("beta_max", t.beta_max);
      d.get("hidden", t.hidden);
      d.get("embed_dim", t.embed_dim);
      d.get("epochs", t.epochs);
      d.get("batch_size", t.batch_size);
      read_optimizer(d, t.optimizer);
      d.get("lr_decay", t.lr_decay);
      d.get("lr_decay_every", t.lr_decay_every);
      d.get("val_fraction", t.val_fraction);
      d.get("eval_every", t.eval_every);
      d.get("patience", t.patience);
    }
    {
      Section m = root.sub("mlp");
      auto& t = c.mlp;
      m.get("hidden", t.hidden);
      m.get("epochs", t.epochs);
      m.get("batch_size", t.batch_size);
      read_optimizer(m, t.optimizer);
      m.get("lr_decay", t.lr_decay);
      m.get("lr_decay_every", t.lr_decay_every);
      m.get("val_fraction", t.val_fraction);
      m.get("eval_every", t.eval_every);
      m.get("patience", t.patience);
    }
    read_gbm(root.sub("propensity"), c.propensity);
    {
      Section k = root.sub("conformal");
      k.get("alpha", c.conformal.alpha);
      k.get("M", c.conformal.M);
      if (k.has("c_grid")) {
        c.conformal.c_grid.clear();
        const json& grid = k.raw("c_grid");
        if (!grid.is_array()) throw ConfigError("conformal.c_grid must be a list");
        for (const auto& v : grid) c.conformal.c_grid.push_back(serialize::real_from_json(v));
      }
      k.get("val_fraction", c.conformal.val_fraction);
    }
  }
  c.validate();
  return c;
}

bench::ExperimentConfig load(const std::string& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j, fs::path(path).parent_path().string());
}

json to_json(const bench::ExperimentConfig& c) {
  json j = canonical(c);
  j["output"] = c.output;
  j["workers"] = c.workers;
  j["verbose"] = c.verbose;
  j["inline_timing"] = c.inline_timing;
  return j;
}

json canonical(const bench::ExperimentConfig& c) {
  json j;
  j["experiment_id"] = c.experiment_id;
  j["seed"] = c.seed;
  j["replicates"] = c.replicates;
  j["methods"] = json::array();
  for (auto m : c.methods) j["methods"].push_back(bench::to_string(m));
  j["external_results"] = c.external_results;

  if (const auto* dgp = std::get_if<datagen::DgpConfig>(&c.data)) {
    j["data"] = {{"source", "synthetic"},
                 {"scenario", datagen::to_string(dgp->scenario)},
                 {"noise", datagen::to_string(dgp->noise)},
                 {"variance", datagen::to_string(dgp->variance)},
                 {"d", dgp->d},
                 {"n_train", dgp->n_train},
                 {"n_cal", dgp->n_cal},
                 {"n_test", dgp->n_test}};
  } else {
    const auto& src = std::get<bench::SemiSyntheticSource>(c.data);
    const auto& s = src.config;
    json filters = json::array();
    for (const auto& f : s.test_filter) filters.push_back({{"column", f.column}, {"op", f.op}, {"value", f.value}});
    j["data"] = {{"source", "csv"},
                 {"path", src.path},
                 {"treatment_column", s.treatment_column},
                 {"outcome_column", s.outcome_column},
                 {"covariate_columns", s.covariate_columns},
                 {"fit_fraction", s.fit_fraction},
                 {"n_train", s.n_train},
                 {"n_cal", s.n_cal},
                 {"n_test_candidates", s.n_test_candidates},
                 {"iqr_factor", s.iqr_factor},
                 {"pi_lo", s.pi_lo},
                 {"pi_hi", s.pi_hi},
                 {"test_filter", filters},
                 {"outcome_model", gbm_json(s.outcome_model)},
                 {"propensity_model", gbm_json(s.propensity_model)}};
  }

  const auto& d = c.diffusion;
  j["diffusion"] = {{"steps", d.steps},
                    {"beta_min", d.beta_min},
                    {"beta_max", d.beta_max},
                    {"hidden", d.hidden},
                    {"embed_dim", d.embed_dim},
                    {"epochs", d.epochs},
                    {"batch_size", d.batch_size},
                    {"lr_decay", d.lr_decay},
                    {"lr_decay_every", d.lr_decay_every},
                    {"val_fraction", d.val_fraction},
                    {"eval_every", d.eval_every},
                    {"patience", d.patience}};
  j["diffusion"].update(optimizer_json(d.optimizer));

  const auto& m = c.mlp;
  j["mlp"] = {{"hidden", m.hidden},
              {"epochs", m.epochs},
              {"batch_size", m.batch_size},
              {"lr_decay", m.lr_decay},
              {"lr_decay_every", m.lr_decay_every},
              {"val_fraction", m.val_fraction},
              {"eval_every", m.eval_every},
              {"patience", m.patience}};
  j["mlp"].update(optimizer_json(m.optimizer));

  j["propensity"] = gbm_json(c.propensity);

  json grid = json::array();
  for (double v : c.conformal.c_grid) grid.push_back(serialize::real_to_json(v));
  j["conformal"] = {{"alpha", c.conformal.alpha},
                    {"M", c.conformal.M},
                    {"c_grid", grid},
                    {"val_fraction", c.conformal.val_fraction}};
  return j;
}

std::string config_hash(const bench::ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical(c).dump())));
  return buf;
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override must look like key.path=value, got '" + std::string(assignment) + "'");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("empty component in override key '" + key + "'");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace cdm::config
