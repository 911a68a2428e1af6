#include "cdm/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>

#include <spdlog/sinks/stdout_sinks.h>

#include "cdm/config.hpp"
#include "cdm/error.hpp"
#include "cdm/io.hpp"
#include "cdm/serialize.hpp"

namespace cdm::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::vector<double> gather(std::span<const double> v, std::span<const std::size_t> idx) {
  std::vector<double> out;
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

datagen::Dataset load_split_dataset(const std::string& path) {
  auto data = datagen::read_dataset_csv(path);
  if (!data.has_split()) throw FormatError(path + ": dataset has no split column");
  return data;
}

diffusion::EpochCallback epoch_logger(const Context& ctx, std::string tag) {
  auto log = ctx.log;
  return [log, tag](const diffusion::EpochLog& e) {
    if (e.val_loss) {
      log->debug("{} epoch={} lr={:.6g} train_loss={:.6g} val_loss={:.6g}", tag, e.epoch, e.lr, e.train_loss,
                 *e.val_loss);
    } else {
      log->debug("{} epoch={} lr={:.6g} train_loss={:.6g}", tag, e.epoch, e.lr, e.train_loss);
    }
  };
}

std::string fixed(double v, int digits) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

std::string timing_path(const std::string& out) { return out + ".timing.jsonl"; }

std::string cell_key(const bench::Record& r) {
  return std::to_string(r.replicate) + "/" + std::string(bench::to_string(r.method));
}

}  // namespace

std::shared_ptr<spdlog::logger> make_logger(bool verbose) {
  auto sink = std::make_shared<spdlog::sinks::stderr_sink_mt>();
  auto log = std::make_shared<spdlog::logger>("cdm", sink);
  log->set_pattern("%Y-%m-%dT%H:%M:%S.%e level=%l %v");
  log->set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  return log;
}

Context make_context(const GlobalOptions& options, std::shared_ptr<spdlog::logger> log) {
  json doc = json::object();
  std::string base_dir;
  if (options.config_path) {
    try {
      doc = json::parse(io::read_file(*options.config_path));
    } catch (const json::parse_error& e) {
      throw ConfigError(*options.config_path + ": " + e.what());
    }
    base_dir = fs::path(*options.config_path).parent_path().string();
  }
  for (const auto& o : options.overrides) config::apply_override(doc, o);
  if (options.seed) doc["seed"] = *options.seed;
  if (options.out) doc["output"] = *options.out;
  if (options.workers) doc["workers"] = *options.workers;
  if (options.verbose) doc["verbose"] = true;

  Context ctx;
  ctx.config = config::from_json(doc, base_dir);
  ctx.config_hash = config::config_hash(ctx.config);
  ctx.log = log ? std::move(log) : make_logger(ctx.config.verbose);
  return ctx;
}

int cmd_gen_data(const Context& ctx, const std::string& out_path) {
  const auto& cfg = ctx.config;
  datagen::Dataset data;
  if (const auto* dgp = std::get_if<datagen::DgpConfig>(&cfg.data)) {
    auto d = *dgp;
    d.seed = cfg.seed;
    data = datagen::gen_dataset(d);
  } else {
    const auto& src = std::get<bench::SemiSyntheticSource>(cfg.data);
    auto s = src.config;
    s.seed = cfg.seed;
    s.outcome_model.seed = derive_seed(cfg.seed, "outcome-model");
    s.propensity_model.seed = derive_seed(cfg.seed, "propensity-model");
    data = datagen::semi_synthetic_from_csv(src.path, s);
  }
  datagen::write_dataset_csv(data, out_path);
  const json meta = {{"config_hash", ctx.config_hash},
                     {"code_version", serialize::code_version()},
                     {"seed", cfg.seed},
                     {"rows", data.size()}};
  io::write_file_atomic(out_path + ".meta.json", meta.dump(2) + "\n");
  ctx.log->info("wrote {} rows ({} train, {} cal, {} test) to {}", data.size(),
                data.rows(datagen::Split::train).size(), data.rows(datagen::Split::cal).size(),
                data.rows(datagen::Split::test).size(), out_path);
  return 0;
}

int cmd_train(const Context& ctx, const std::string& data_path, const std::string& out_model,
              const std::string& kind) {
  const auto& cfg = ctx.config;
  const auto data = load_split_dataset(data_path);
  const auto split = bench::split_treated_train(data, cfg.conformal.val_fraction, cfg.seed);
  const Matrix X = data.X.select_rows(split.fit);
  const auto y = gather(data.y, split.fit);

  serialize::Checkpoint ck;
  ck.kind = kind;
  ck.config_hash = ctx.config_hash;
  ck.code_version = std::string(serialize::code_version());
  if (kind == "diffusion") {
    auto dcfg = cfg.diffusion;
    dcfg.seed = derive_seed(cfg.seed, "train:diffusion");
    ctx.log->info("training diffusion model: T={} hidden={} rows={} epochs<={}", dcfg.steps, dcfg.hidden.size(),
                  X.rows(), dcfg.epochs);
    const auto model = diffusion::train_denoiser(X, y, dcfg, epoch_logger(ctx, "diffusion"));
    if (model.degenerate_outcome) ctx.log->warn("training outcomes have zero variance; sd forced to 1");
    ctx.log->info("trained {} epochs", model.epochs_trained);
    ck.model = serialize::to_json(model);
  } else if (kind == "mlp") {
    auto mcfg = cfg.mlp;
    mcfg.seed = derive_seed(cfg.seed, "train:mlp");
    ctx.log->info("training mlp regressor: rows={} epochs<={}", X.rows(), mcfg.epochs);
    const auto model = bench::train_mlp_regressor(X, y, mcfg, epoch_logger(ctx, "mlp"));
    ctx.log->info("trained {} epochs", model.epochs_trained);
    ck.model = serialize::to_json(model);
  } else {
    throw ConfigError("unknown model kind '" + kind + "' (expected diffusion or mlp)");
  }
  serialize::save_checkpoint(ck, out_model);
  ctx.log->info("wrote checkpoint {}", out_model);
  return 0;
}

int cmd_predict(const Context& ctx, const std::string& model_path, const std::string& data_path,
                const std::string& out_path, const PredictOptions& options) {
  const auto& cfg = ctx.config;
  const auto ck = serialize::load_checkpoint(model_path);
  if (ck.config_hash != ctx.config_hash) {
    if (!options.force) {
      throw FormatError("checkpoint was trained under config " + ck.config_hash + ", current config is " +
                        ctx.config_hash + " (pass --force to use it anyway)");
    }
    ctx.log->warn("checkpoint config hash {} differs from {}", ck.config_hash, ctx.config_hash);
  }
  std::string method = options.method.value_or(ck.kind == "diffusion" ? "cdm" : "mlp");
  const auto m = bench::parse_method(method);
  if (ck.kind == "mlp" && m != bench::Method::mlp) throw ConfigError("mlp checkpoints only support method mlp");
  if (ck.kind == "diffusion" && (m == bench::Method::mlp || bench::is_external(m))) {
    throw ConfigError("diffusion checkpoints support cdm, cdm_nolocal and naive");
  }

  const auto source = ck.kind == "diffusion"
                          ? bench::ScoreSource(serialize::diffusion_from_json(ck.model), cfg.conformal.M)
                          : bench::ScoreSource(serialize::regressor_from_json(ck.model));
  const auto data = load_split_dataset(data_path);
  if (data.dim() != source.covariate_dim()) {
    throw ShapeError("data has " + std::to_string(data.dim()) + " covariates, checkpoint expects " +
                     std::to_string(source.covariate_dim()));
  }
  const std::size_t d = data.dim();
  const double alpha = cfg.conformal.alpha;
  const std::uint64_t seed = cfg.seed;
  const std::uint64_t stream = derive_seed(seed, ck.kind == "diffusion" ? "draws:diffusion" : "draws:mlp");
  const int workers = cfg.workers;

  const auto test_rows = data.rows(datagen::Split::test);
  const Matrix X_test = data.X.select_rows(test_rows);
  const Matrix draws_test = source.draws(X_test, derive_seed(stream, {1}), workers);

  std::vector<conformal::PointPrediction> preds;
  double c_used = conformal::kInf;
  if (m == bench::Method::naive) {
    for (std::size_t k = 0; k < X_test.rows(); ++k) {
      conformal::PointPrediction p;
      p.set = bench::naive_interval(draws_test.row(k), alpha);
      p.quantile = std::numeric_limits<double>::quiet_NaN();
      preds.push_back(std::move(p));
    }
  } else {
    auto pcfg = cfg.propensity;
    pcfg.seed = derive_seed(seed, "propensity");
    const auto pi = bench::fit_propensity(data, pcfg);
    const auto cal_rows = data.rows(datagen::Split::cal, 1);
    const Matrix X_cal = data.X.select_rows(cal_rows);
    const auto cal = bench::calibrate(X_cal, gather(data.y, cal_rows),
                                      source.draws(X_cal, derive_seed(stream, {0}), workers), pi);
    const Matrix noise_test = bench::kernel_noise(X_test.rows(), d, derive_seed(seed, "kernel", {1}));
    if (m == bench::Method::cdm) {
      const auto& grid = cfg.conformal.c_grid;
      if (grid.size() == 1) {
        c_used = grid[0];
      } else {
        const auto split = bench::split_treated_train(data, cfg.conformal.val_fraction, seed);
        const Matrix X_val = data.X.select_rows(split.validation);
        const auto choice = bench::select_bandwidth(
            cal, X_val, gather(data.y, split.validation), source.draws(X_val, derive_seed(stream, {2}), workers),
            bench::kernel_noise(X_val.rows(), d, derive_seed(seed, "kernel", {2})), pi, grid, alpha);
        c_used = choice.c;
        for (const auto& t : choice.trials) {
          ctx.log->info("bandwidth c={} validation coverage={:.4f} median length={}", io::format_double(t.c),
                        t.coverage, io::format_double(t.median_length));
        }
      }
      ctx.log->info("using bandwidth factor c={}", io::format_double(c_used));
    }
    preds = bench::predict_sets(cal, X_test, draws_test, noise_test, pi, conformal::Bandwidth::from_factor(c_used, d),
                                alpha);
  }

  std::string out;
  json header = {{"kind", "header"},
                 {"config_hash", ctx.config_hash},
                 {"model_config_hash", ck.config_hash},
                 {"code_version", serialize::code_version()},
                 {"method", method},
                 {"alpha", alpha},
                 {"M", source.draws_per_row()},
                 {"c", serialize::real_to_json(c_used)},
                 {"n_test", test_rows.size()}};
  out += header.dump() + "\n";
  std::size_t infinite = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const auto& p = preds[k];
    json row = {{"kind", "prediction"},
                {"row", test_rows[k]},
                {"entire_line", p.set.is_entire_line()},
                {"set", serialize::to_json(p.set)},
                {"quantile", std::isnan(p.quantile) ? json(nullptr) : serialize::real_to_json(p.quantile)},
                {"test_mass", p.test_mass},
                {"length", serialize::real_to_json(p.set.total_length())}};
    if (p.set.is_entire_line()) ++infinite;
    out += row.dump() + "\n";
  }
  io::write_file_atomic(out_path, out);
  ctx.log->info("wrote {} prediction sets ({} entire-line) to {}", preds.size(), infinite, out_path);
  return 0;
}

std::vector<bench::Record> read_results(const std::string& path) {
  std::vector<bench::Record> records;
  std::istringstream in(io::read_file(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(serialize::record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::pair(a.replicate, static_cast<int>(a.method)) < std::pair(b.replicate, static_cast<int>(b.method));
  });
  return records;
}

std::string format_results(std::vector<bench::Record> records, bool with_wallclock) {
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::pair(a.replicate, static_cast<int>(a.method)) < std::pair(b.replicate, static_cast<int>(b.method));
  });
  std::string out;
  for (const auto& r : records) out += serialize::to_json(r, with_wallclock).dump() + "\n";
  return out;
}

std::string format_summary(const std::vector<bench::MethodSummary>& rows, double alpha) {
  std::ostringstream os;
  os << pad("method", 14) << pad("R", 5) << pad("coverage", 10) << pad("95% CI", 20) << pad("length", 10)
     << pad("95% CI", 22) << pad("inf sets", 10) << "\n";
  for (const auto& s : rows) {
    std::string cov_ci = "[" + fixed(s.coverage_lo, 3) + ", " + fixed(s.coverage_hi, 3) + "]";
    std::string len_ci = "[" + fixed(s.length_lo, 3) + ", " + fixed(s.length_hi, 3) + "]";
    os << pad(std::string(bench::to_string(s.method)), 14) << pad(std::to_string(s.replicates), 5)
       << pad(fixed(s.coverage_mean, 3), 10) << pad(cov_ci, 20) << pad(fixed(s.length_mean, 3), 10)
       << pad(len_ci, 22) << pad(std::to_string(s.infinite_sets), 10);
    if (s.coverage_mean < 1.0 - alpha) os << "BELOW NOMINAL " << fixed(1.0 - alpha, 3);
    if (s.degenerate_interval) os << (s.coverage_mean < 1.0 - alpha ? "; " : "") << "single replicate, CI collapsed";
    os << "\n";
  }
  return os.str();
}

int cmd_experiment(const Context& ctx, std::ostream& summary) {
  const auto& cfg = ctx.config;
  const std::string& out = cfg.output;
  const std::string version(serialize::code_version());

  std::map<std::string, bench::Record> done;
  std::map<std::string, double> timing;
  if (fs::exists(out)) {
    std::size_t stale = 0;
    for (auto& r : read_results(out)) {
      if (r.config_hash == ctx.config_hash && r.code_version == version && r.experiment_id == cfg.experiment_id &&
          r.replicate < cfg.replicates &&
          std::find(cfg.methods.begin(), cfg.methods.end(), r.method) != cfg.methods.end()) {
        done.emplace(cell_key(r), r);
      } else {
        ++stale;
      }
    }
    if (stale > 0) ctx.log->warn("dropping {} records from {} that do not match this config", stale, out);
    if (fs::exists(timing_path(out))) {
      std::istringstream in(io::read_file(timing_path(out)));
      std::string line;
      while (std::getline(in, line)) {
        try {
          const auto j = json::parse(line);
          if (j.value("config_hash", "") != ctx.config_hash) continue;
          timing[std::to_string(j.at("replicate").get<int>()) + "/" + j.at("method").get<std::string>()] =
              j.at("wallclock_seconds").get<double>();
        } catch (const std::exception&) {
          continue;
        }
      }
    }
  }

  std::vector<std::pair<int, std::vector<bench::Method>>> todo;
  for (int r = 0; r < cfg.replicates; ++r) {
    std::vector<bench::Method> missing;
    for (auto m : cfg.methods) {
      bench::Record probe;
      probe.replicate = r;
      probe.method = m;
      if (!done.count(cell_key(probe))) missing.push_back(m);
    }
    if (!missing.empty()) todo.emplace_back(r, std::move(missing));
  }
  ctx.log->info("experiment {} (config {}): {} replicates x {} methods, {} replicates to run", cfg.experiment_id,
                ctx.config_hash, cfg.replicates, cfg.methods.size(), todo.size());

  std::mutex mu;
  auto flush = [&] {
    std::vector<bench::Record> recs;
    for (const auto& [k, r] : done) recs.push_back(r);
    for (auto& r : recs) {
      auto it = timing.find(cell_key(r));
      if (it != timing.end()) r.wallclock_seconds = it->second;
    }
    io::write_file_atomic(out, format_results(recs, cfg.inline_timing));
    if (!cfg.inline_timing) {
      std::string t;
      for (const auto& r : recs) {
        t += json({{"replicate", r.replicate},
                   {"method", bench::to_string(r.method)},
                   {"wallclock_seconds", r.wallclock_seconds},
                   {"config_hash", r.config_hash}})
                 .dump() +
             "\n";
      }
      io::write_file_atomic(timing_path(out), t);
    }
  };

  const int workers = bench::resolve_workers(cfg.workers);
  bench::ReplicateLog rlog;
  rlog.info = [&](std::string_view msg) { ctx.log->info("{}", msg); };
  rlog.on_epoch = epoch_logger(ctx, "train");
  std::size_t failed_cells = 0;
  auto errors = bench::run_pool(todo.size(), workers, [&](std::size_t i) {
    const auto& [rep, methods] = todo[i];
    auto recs = bench::run_replicate(cfg, rep, methods, rlog);
    std::lock_guard<std::mutex> lock(mu);
    for (auto& r : recs) {
      r.config_hash = ctx.config_hash;
      r.code_version = version;
      timing[cell_key(r)] = r.wallclock_seconds;
      ctx.log->info("replicate {} {}: coverage={:.4f} median_length={} infinite={}", r.replicate,
                    bench::to_string(r.method), r.coverage, io::format_double(r.median_length), r.infinite_count);
      done[cell_key(r)] = std::move(r);
    }
    flush();
  });
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i]) continue;
    failed_cells += todo[i].second.size();
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      ctx.log->error("{}", e.what());
    }
  }
  if (todo.empty() || done.empty()) flush();

  std::vector<bench::Record> all;
  for (const auto& [k, r] : done) all.push_back(r);
  for (const auto& path : cfg.external_results) {
    auto ext = bench::read_external_records(path);
    all.insert(all.end(), ext.begin(), ext.end());
  }
  const auto table = format_summary(bench::aggregate(all), cfg.conformal.alpha);
  io::write_file_atomic(out + ".summary.txt", table);
  summary << table;
  if (failed_cells > 0) {
    ctx.log->error("{} cells failed", failed_cells);
    return 1;
  }
  return 0;
}

int cmd_inspect(const std::string& results_path, const InspectOptions& options, std::ostream& out) {
  const auto records = read_results(results_path);
  if (records.empty()) {
    out << "no records in " << results_path << "\n";
    return 0;
  }
  std::set<std::string> hashes;
  std::set<std::string> versions;
  for (const auto& r : records) {
    hashes.insert(r.config_hash);
    versions.insert(r.code_version);
  }
  std::vector<std::string> problems;
  if (hashes.size() > 1) problems.push_back("records carry " + std::to_string(hashes.size()) + " config hashes");
  if (versions.size() > 1) problems.push_back("records carry " + std::to_string(versions.size()) + " code versions");
  if (options.expected_hash && !hashes.count(*options.expected_hash)) {
    problems.push_back("records were produced under config " + *hashes.begin() + ", expected " +
                       *options.expected_hash);
  }
  if (!versions.count(std::string(serialize::code_version()))) {
    problems.push_back("records come from code version " + *versions.begin() + ", this is " +
                       std::string(serialize::code_version()));
  }
  if (!problems.empty()) {
    for (const auto& p : problems) out << (options.force ? "warning: " : "error: ") << p << "\n";
    if (!options.force) {
      out << "refusing to summarize mismatched records (use --force)\n";
      return 2;
    }
  }

  std::vector<bench::Record> all = records;
  for (const auto& path : options.external_results) {
    auto ext = bench::read_external_records(path);
    all.insert(all.end(), ext.begin(), ext.end());
  }
  const double alpha = records.front().alpha;
  const auto summary = bench::aggregate(all);
  out << records.size() << " records, config " << *hashes.begin() << ", code " << *versions.begin() << "\n";
  out << format_summary(summary, alpha);
  std::size_t below = 0;
  for (const auto& s : summary) {
    if (s.coverage_mean < 1.0 - alpha) ++below;
  }
  if (below > 0) out << below << " method(s) below the nominal level " << fixed(1.0 - alpha, 3) << "\n";
  return 0;
}

}  // namespace cdm::cli
