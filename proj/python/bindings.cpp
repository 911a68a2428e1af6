#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cmath>
#include <sstream>

#include "cdm/bench.hpp"
#include "cdm/config.hpp"
#include "cdm/conformal.hpp"
#include "cdm/datagen.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/propensity.hpp"
#include "cdm/serialize.hpp"

namespace py = pybind11;
using namespace cdm;

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

Matrix to_matrix(const Array& a) {
  if (a.ndim() == 1) {
    return Matrix(static_cast<std::size_t>(a.shape(0)), 1, std::vector<double>(a.data(), a.data() + a.size()));
  }
  if (a.ndim() != 2) throw ShapeError("expected a 1-d or 2-d array");
  return Matrix(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                std::vector<double>(a.data(), a.data() + a.size()));
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

Array from_matrix(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

Array from_vector(const std::vector<double>& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::dict record_dict(const bench::Record& r) {
  py::dict d;
  d["experiment_id"] = r.experiment_id;
  d["method"] = std::string(bench::to_string(r.method));
  d["replicate"] = r.replicate;
  d["seed"] = r.seed;
  d["coverage"] = r.coverage;
  d["median_length"] = r.median_length;
  d["infinite_count"] = r.infinite_count;
  d["n_test"] = r.n_test;
  d["alpha"] = r.alpha;
  d["c_selected"] = r.c_selected ? py::cast(*r.c_selected) : py::none();
  d["wallclock_seconds"] = r.wallclock_seconds;
  d["config_hash"] = r.config_hash;
  return d;
}

bench::ExperimentConfig parse_config(const std::string& text, const std::string& base_dir) {
  return config::from_json(config::json::parse(text), base_dir);
}

}  // namespace

PYBIND11_MODULE(_cdmite, m) {
  m.doc() = "Conformal diffusion prediction sets for individual treatment effects.";
  m.attr("__version__") = std::string(serialize::code_version());

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<conformal::PredictionSet>(m, "PredictionSet")
      .def_static("entire_line", &conformal::PredictionSet::entire_line)
      .def_property_readonly("is_entire_line", &conformal::PredictionSet::is_entire_line)
      .def_property_readonly("intervals",
                             [](const conformal::PredictionSet& s) {
                               std::vector<std::pair<double, double>> out;
                               for (const auto& iv : s.intervals()) out.emplace_back(iv.lo, iv.hi);
                               return out;
                             })
      .def("contains", &conformal::PredictionSet::contains, py::arg("value"))
      .def("__contains__", &conformal::PredictionSet::contains)
      .def_property_readonly("total_length", &conformal::PredictionSet::total_length)
      .def("__eq__", [](const conformal::PredictionSet& a, const conformal::PredictionSet& b) { return a == b; })
      .def("__repr__", [](const conformal::PredictionSet& s) {
        if (s.is_entire_line()) return std::string("PredictionSet(entire line)");
        std::ostringstream os;
        os << "PredictionSet(";
        for (std::size_t i = 0; i < s.intervals().size(); ++i) {
          os << (i ? ", " : "") << "[" << s.intervals()[i].lo << ", " << s.intervals()[i].hi << "]";
        }
        os << ")";
        return os.str();
      });

  m.def("nonconformity_score", [](double y, const Array& samples) {
    return conformal::nonconformity_score(y, to_vector(samples));
  }, py::arg("y"), py::arg("samples"));
  m.def("build_prediction_set", [](const Array& samples, double q) {
    return conformal::build_prediction_set(to_vector(samples), q);
  }, py::arg("samples"), py::arg("q"));
  m.def("weighted_quantile", [](const Array& scores, const Array& masses, double test_mass, double level) {
    return conformal::weighted_quantile(to_vector(scores), to_vector(masses), test_mass, level);
  }, py::arg("scores"), py::arg("masses"), py::arg("test_mass"), py::arg("level"));
  m.def("balance_weight", &conformal::balance_weight, py::arg("t"), py::arg("pi_hat"));
  m.def("normalize_weights", [](const Array& raw) { return from_vector(conformal::normalize_weights(to_vector(raw))); },
        py::arg("raw"));
  m.def(
      "local_weights",
      [](const Array& cal_X, const Array& x_test, const Array& noise, double h) {
        const auto bw = std::isinf(h) ? conformal::Bandwidth::none() : conformal::Bandwidth::fixed(h);
        return from_vector(conformal::local_weights_from_noise(to_matrix(cal_X), to_vector(x_test), to_vector(noise), bw));
      },
      py::arg("cal_X"), py::arg("x_test"), py::arg("noise"), py::arg("h"),
      "Kernel values for each calibration row and then the test point; h = inf disables localization.");
  m.def("lemma1_check", [](const Array& values, const Array& masses, double beta) {
    return conformal::lemma1_check(to_vector(values), to_vector(masses), beta);
  }, py::arg("values"), py::arg("masses"), py::arg("beta"));
  m.def("membership_equivalence_check", [](double y, const Array& samples, double q) {
    return conformal::membership_equivalence_check(y, to_vector(samples), q);
  }, py::arg("y"), py::arg("samples"), py::arg("q"));

  m.def(
      "generate_dataset",
      [](const std::string& scenario, const std::string& noise, const std::string& variance, std::size_t d,
         std::size_t n_train, std::size_t n_cal, std::size_t n_test, std::uint64_t seed) {
        datagen::DgpConfig c;
        c.scenario = datagen::parse_scenario(scenario);
        c.noise = datagen::parse_noise(noise);
        c.variance = datagen::parse_variance(variance);
        c.d = d;
        c.n_train = n_train;
        c.n_cal = n_cal;
        c.n_test = n_test;
        c.seed = seed;
        datagen::Dataset data;
        {
          py::gil_scoped_release release;
          data = datagen::gen_dataset(c);
        }
        py::dict out;
        out["X"] = from_matrix(data.X);
        out["t"] = py::array_t<int>(static_cast<py::ssize_t>(data.t.size()), data.t.data());
        out["y"] = from_vector(data.y);
        out["y1_true"] = from_vector(data.y1_true);
        out["y0_true"] = from_vector(data.y0_true);
        out["pi_true"] = from_vector(data.pi_true);
        std::vector<std::string> split;
        for (auto s : data.split) split.emplace_back(datagen::to_string(s));
        out["split"] = split;
        return out;
      },
      py::arg("scenario") = "lowdim", py::arg("noise") = "gaussian", py::arg("variance") = "homo", py::arg("d") = 10,
      py::arg("n_train") = 7500, py::arg("n_cal") = 2500, py::arg("n_test") = 1000, py::arg("seed") = 0);

  py::class_<diffusion::DiffusionModel>(m, "DiffusionModel")
      .def_readonly("covariate_dim", &diffusion::DiffusionModel::covariate_dim)
      .def_readonly("epochs_trained", &diffusion::DiffusionModel::epochs_trained)
      .def_readonly("degenerate_outcome", &diffusion::DiffusionModel::degenerate_outcome)
      .def_property_readonly("steps", [](const diffusion::DiffusionModel& d) { return d.schedule.steps; })
      .def(
          "sample",
          [](const diffusion::DiffusionModel& model, const Array& x, std::size_t M, std::uint64_t seed) {
            const auto xv = to_vector(x);
            std::vector<double> draws;
            {
              py::gil_scoped_release release;
              Rng rng(seed);
              draws = diffusion::sample(model, xv, M, rng);
            }
            return from_vector(draws);
          },
          py::arg("x"), py::arg("M"), py::arg("seed") = 0)
      .def("to_json", [](const diffusion::DiffusionModel& d) { return serialize::to_json(d).dump(); })
      .def_static("from_json",
                  [](const std::string& s) { return serialize::diffusion_from_json(serialize::json::parse(s)); });

  m.def(
      "train_denoiser",
      [](const Array& X, const Array& y, int epochs, std::vector<std::size_t> hidden, std::size_t batch_size,
         double lr, double val_fraction, std::uint64_t seed) {
        diffusion::TrainConfig c;
        c.epochs = epochs;
        c.hidden = std::move(hidden);
        c.batch_size = batch_size;
        c.optimizer.lr = lr;
        c.val_fraction = val_fraction;
        c.seed = seed;
        const auto Xm = to_matrix(X);
        const auto yv = to_vector(y);
        py::gil_scoped_release release;
        return diffusion::train_denoiser(Xm, yv, c);
      },
      py::arg("X"), py::arg("y"), py::arg("epochs") = 1000, py::arg("hidden") = std::vector<std::size_t>{128, 128, 128},
      py::arg("batch_size") = 128, py::arg("lr") = 1e-2, py::arg("val_fraction") = 0.15, py::arg("seed") = 0);

  py::class_<propensity::BoostedTreesModel>(m, "BoostedTrees")
      .def_property_readonly("n_trees", [](const propensity::BoostedTreesModel& b) { return b.trees.size(); })
      .def_readonly("train_loss", &propensity::BoostedTreesModel::train_loss)
      .def("predict", [](const propensity::BoostedTreesModel& b, const Array& X) {
        const auto Xm = to_matrix(X);
        std::vector<double> out(Xm.rows());
        for (std::size_t i = 0; i < Xm.rows(); ++i) {
          out[i] = b.loss == propensity::Loss::logistic ? propensity::predict_propensity(b, Xm.row(i))
                                                        : propensity::predict_value(b, Xm.row(i));
        }
        return from_vector(out);
      }, py::arg("X"), "Clipped propensities for logistic models, raw values otherwise.");

  m.def(
      "fit_gbm",
      [](const Array& X, const py::array_t<int, py::array::c_style | py::array::forcecast>& t, int n_trees,
         int max_depth, double shrinkage, std::size_t min_leaf, std::uint64_t seed) {
        propensity::GbmConfig c;
        c.n_trees = n_trees;
        c.max_depth = max_depth;
        c.shrinkage = shrinkage;
        c.min_leaf = min_leaf;
        c.seed = seed;
        const auto Xm = to_matrix(X);
        const std::vector<int> tv(t.data(), t.data() + t.size());
        py::gil_scoped_release release;
        return propensity::fit_gbm(Xm, tv, c);
      },
      py::arg("X"), py::arg("t"), py::arg("n_trees") = 100, py::arg("max_depth") = 3, py::arg("shrinkage") = 0.1,
      py::arg("min_leaf") = 10, py::arg("seed") = 0);

  m.def(
      "config_hash",
      [](const std::string& config_json, const std::string& base_dir) {
        return config::config_hash(parse_config(config_json, base_dir));
      },
      py::arg("config_json"), py::arg("base_dir") = "");
  m.def(
      "run_replicate",
      [](const std::string& config_json, int replicate, const std::string& base_dir) {
        const auto cfg = parse_config(config_json, base_dir);
        const auto hash = config::config_hash(cfg);
        std::vector<bench::Record> recs;
        {
          py::gil_scoped_release release;
          recs = bench::run_replicate(cfg, replicate, cfg.methods);
        }
        py::list out;
        for (auto& r : recs) {
          r.config_hash = hash;
          out.append(record_dict(r));
        }
        return out;
      },
      py::arg("config_json"), py::arg("replicate") = 0, py::arg("base_dir") = "",
      "Runs every configured method on one replicate and returns one record per method.");
}
