#include "cdm/serialize.hpp"

#include <cmath>
#include <limits>

#include "cdm/error.hpp"
#include "cdm/io.hpp"

#ifndef CDM_VERSION
#define CDM_VERSION "0.0.0"
#endif

namespace cdm::serialize {

namespace {

template <typename T>
T field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("field '") + key + "': " + e.what());
  }
}

std::string_view activation_name(nn::Activation a) { return a == nn::Activation::relu ? "relu" : "identity"; }

nn::Activation parse_activation(const std::string& s) {
  if (s == "relu") return nn::Activation::relu;
  if (s == "identity") return nn::Activation::identity;
  throw FormatError("unknown activation '" + s + "'");
}

void tree_to_json(const propensity::RegressionTree& tree, int id, json& out) {
  const auto& n = tree.nodes[static_cast<std::size_t>(id)];
  if (n.is_leaf()) {
    out.push_back({{"value", n.value}});
    return;
  }
  out.push_back({{"feature", n.feature}, {"threshold", n.threshold}});
  tree_to_json(tree, n.left, out);
  tree_to_json(tree, n.right, out);
}

int tree_from_json(const json& arr, std::size_t& pos, propensity::RegressionTree& tree, int depth) {
  if (pos >= arr.size()) throw FormatError("gbm: truncated pre-order tree");
  if (depth > 64) throw FormatError("gbm: tree too deep");
  const json& j = arr[pos++];
  const int id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (j.contains("value")) {
    tree.nodes.back().value = field<double>(j, "value");
    return id;
  }
  const int feature = field<int>(j, "feature");
  const double threshold = field<double>(j, "threshold");
  const int l = tree_from_json(arr, pos, tree, depth + 1);
  const int r = tree_from_json(arr, pos, tree, depth + 1);
  auto& node = tree.nodes[static_cast<std::size_t>(id)];
  node.feature = feature;
  node.threshold = threshold;
  node.left = l;
  node.right = r;
  return id;
}

}  // namespace

std::string_view code_version() { return CDM_VERSION; }

json real_to_json(double v) {
  if (std::isnan(v)) throw NumericError("cannot serialize NaN");
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double real_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf" || s == "Infinity") return std::numeric_limits<double>::infinity();
    if (s == "-inf" || s == "-Infinity") return -std::numeric_limits<double>::infinity();
  }
  throw FormatError("expected a number or \"inf\", got " + j.dump());
}

void expect_schema(const json& j, std::string_view schema) {
  if (!j.is_object() || !j.contains("schema") || !j["schema"].is_string()) {
    throw FormatError("document has no schema id (expected " + std::string(schema) + ")");
  }
  const auto got = j["schema"].get<std::string>();
  if (got != schema) throw FormatError("schema mismatch: expected " + std::string(schema) + ", got " + got);
}

json to_json(const nn::MlpParams& p) {
  json layers = json::array();
  for (const auto& l : p.layers) {
    layers.push_back({{"in_dim", l.in_dim},
                      {"out_dim", l.out_dim},
                      {"activation", activation_name(l.activation)},
                      {"weight", l.weight},
                      {"bias", l.bias}});
  }
  return {{"schema", kMlpSchema}, {"layers", layers}};
}

nn::MlpParams mlp_from_json(const json& j) {
  expect_schema(j, kMlpSchema);
  nn::MlpParams p;
  for (const auto& lj : field<json>(j, "layers")) {
    nn::Layer l;
    l.in_dim = field<std::size_t>(lj, "in_dim");
    l.out_dim = field<std::size_t>(lj, "out_dim");
    l.activation = parse_activation(field<std::string>(lj, "activation"));
    l.weight = field<std::vector<double>>(lj, "weight");
    l.bias = field<std::vector<double>>(lj, "bias");
    p.layers.push_back(std::move(l));
  }
  try {
    p.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("invalid network: ") + e.what());
  }
  return p;
}

json to_json(const diffusion::DiffusionModel& m) {
  return {{"schema", kDiffusionSchema},
          {"steps", m.schedule.steps},
          {"beta_min", m.schedule.beta_min},
          {"beta_max", m.schedule.beta_max},
          {"covariate_dim", m.covariate_dim},
          {"embed_dim", m.embed_dim},
          {"y_mean", m.y_mean},
          {"y_sd", m.y_sd},
          {"degenerate_outcome", m.degenerate_outcome},
          {"epochs_trained", m.epochs_trained},
          {"denoiser", to_json(m.denoiser)}};
}

diffusion::DiffusionModel diffusion_from_json(const json& j) {
  expect_schema(j, kDiffusionSchema);
  diffusion::DiffusionModel m;
  try {
    m.schedule = diffusion::make_schedule(field<int>(j, "steps"), field<double>(j, "beta_min"),
                                          field<double>(j, "beta_max"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid schedule: ") + e.what());
  }
  m.covariate_dim = field<std::size_t>(j, "covariate_dim");
  m.embed_dim = field<std::size_t>(j, "embed_dim");
  m.y_mean = field<double>(j, "y_mean");
  m.y_sd = field<double>(j, "y_sd");
  m.degenerate_outcome = field<bool>(j, "degenerate_outcome");
  m.epochs_trained = field<int>(j, "epochs_trained");
  m.denoiser = mlp_from_json(field<json>(j, "denoiser"));
  try {
    m.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("invalid diffusion model: ") + e.what());
  }
  return m;
}

json to_json(const bench::MlpRegressor& m) {
  return {{"schema", kRegressorSchema},
          {"y_mean", m.y_mean},
          {"y_sd", m.y_sd},
          {"epochs_trained", m.epochs_trained},
          {"net", to_json(m.net)}};
}

bench::MlpRegressor regressor_from_json(const json& j) {
  expect_schema(j, kRegressorSchema);
  bench::MlpRegressor m;
  m.y_mean = field<double>(j, "y_mean");
  m.y_sd = field<double>(j, "y_sd");
  m.epochs_trained = field<int>(j, "epochs_trained");
  m.net = mlp_from_json(field<json>(j, "net"));
  if (m.net.out_dim() != 1) throw FormatError("regressor network must have one output");
  return m;
}

json to_json(const propensity::BoostedTreesModel& m) {
  json trees = json::array();
  for (const auto& t : m.trees) {
    json nodes = json::array();
    if (!t.nodes.empty()) tree_to_json(t, 0, nodes);
    trees.push_back(std::move(nodes));
  }
  return {{"schema", kGbmSchema},
          {"loss", m.loss == propensity::Loss::logistic ? "logistic" : "squared"},
          {"shrinkage", m.shrinkage},
          {"init", m.init},
          {"clip_lo", m.clip_lo},
          {"clip_hi", m.clip_hi},
          {"n_features", m.n_features},
          {"max_depth", m.max_depth},
          {"train_loss", m.train_loss},
          {"trees", trees}};
}

propensity::BoostedTreesModel gbm_from_json(const json& j) {
  expect_schema(j, kGbmSchema);
  propensity::BoostedTreesModel m;
  const auto loss = field<std::string>(j, "loss");
  if (loss == "logistic") {
    m.loss = propensity::Loss::logistic;
  } else if (loss == "squared") {
    m.loss = propensity::Loss::squared;
  } else {
    throw FormatError("unknown loss '" + loss + "'");
  }
  m.shrinkage = field<double>(j, "shrinkage");
  m.init = field<double>(j, "init");
  m.clip_lo = field<double>(j, "clip_lo");
  m.clip_hi = field<double>(j, "clip_hi");
  m.n_features = field<std::size_t>(j, "n_features");
  m.max_depth = field<int>(j, "max_depth");
  m.train_loss = field<std::vector<double>>(j, "train_loss");
  for (const auto& tj : field<json>(j, "trees")) {
    propensity::RegressionTree tree;
    std::size_t pos = 0;
    tree_from_json(tj, pos, tree, 0);
    if (pos != tj.size()) throw FormatError("gbm: trailing nodes after pre-order tree");
    m.trees.push_back(std::move(tree));
  }
  m.validate();
  return m;
}

json to_json(const conformal::PredictionSet& s) {
  json iv = json::array();
  for (const auto& i : s.intervals()) iv.push_back({i.lo, i.hi});
  return {{"entire_line", s.is_entire_line()}, {"intervals", iv}};
}

conformal::PredictionSet prediction_set_from_json(const json& j) {
  if (field<bool>(j, "entire_line")) return conformal::PredictionSet::entire_line();
  std::vector<conformal::Interval> iv;
  for (const auto& p : field<json>(j, "intervals")) {
    if (!p.is_array() || p.size() != 2) throw FormatError("interval must be a [lo, hi] pair");
    iv.push_back({real_from_json(p[0]), real_from_json(p[1])});
  }
  return conformal::PredictionSet::from_intervals(std::move(iv));
}

json to_json(const bench::Record& r, bool with_wallclock) {
  json j = {{"experiment_id", r.experiment_id},
            {"method", bench::to_string(r.method)},
            {"replicate", r.replicate},
            {"seed", r.seed},
            {"coverage", r.coverage},
            {"median_length", real_to_json(r.median_length)},
            {"infinite_count", r.infinite_count},
            {"n_test", r.n_test},
            {"alpha", r.alpha},
            {"c_selected", r.c_selected ? real_to_json(*r.c_selected) : json(nullptr)},
            {"config_hash", r.config_hash},
            {"code_version", r.code_version}};
  if (with_wallclock) j["wallclock_seconds"] = r.wallclock_seconds;
  return j;
}

bench::Record record_from_json(const json& j) {
  bench::Record r;
  r.experiment_id = field<std::string>(j, "experiment_id");
  r.method = bench::parse_method(field<std::string>(j, "method"));
  r.replicate = field<int>(j, "replicate");
  r.seed = field<std::uint64_t>(j, "seed");
  r.coverage = field<double>(j, "coverage");
  r.median_length = real_from_json(field<json>(j, "median_length"));
  r.infinite_count = field<std::size_t>(j, "infinite_count");
  r.n_test = field<std::size_t>(j, "n_test");
  r.alpha = field<double>(j, "alpha");
  if (j.contains("c_selected") && !j["c_selected"].is_null()) r.c_selected = real_from_json(j["c_selected"]);
  r.config_hash = field<std::string>(j, "config_hash");
  r.code_version = field<std::string>(j, "code_version");
  if (j.contains("wallclock_seconds")) r.wallclock_seconds = field<double>(j, "wallclock_seconds");
  if (!(r.coverage >= 0.0 && r.coverage <= 1.0)) throw FormatError("coverage outside [0, 1]");
  return r;
}

json to_json(const Checkpoint& c) {
  return {{"schema", kCheckpointSchema},
          {"kind", c.kind},
          {"config_hash", c.config_hash},
          {"code_version", c.code_version},
          {"model", c.model}};
}

Checkpoint checkpoint_from_json(const json& j) {
  expect_schema(j, kCheckpointSchema);
  Checkpoint c;
  c.kind = field<std::string>(j, "kind");
  if (c.kind != "diffusion" && c.kind != "mlp") throw FormatError("unknown checkpoint kind '" + c.kind + "'");
  c.config_hash = field<std::string>(j, "config_hash");
  c.code_version = field<std::string>(j, "code_version");
  c.model = field<json>(j, "model");
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  io::write_file_atomic(path, to_json(c).dump() + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace cdm::serialize
