#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "flag/checkpoint.hpp"
#include "flag/curse_lab.hpp"
#include "flag/data.hpp"
#include "flag/errors.hpp"
#include "flag/joint_diffusion.hpp"
#include "flag/metrics.hpp"
#include "flag/run_config.hpp"
#include "flag/sde.hpp"

namespace py = pybind11;
using namespace flag;

namespace {

// Owns a generator built from a run configuration plus its optimizer state.
class Trainer {
 public:
  Trainer(const std::string& config_json, const std::vector<std::string>& slide_paths)
      : cfg_(run::RunConfig::from_json(config_json)), rng_(derive_seed(cfg_.seed, 1)) {
    if (slide_paths.empty()) throw ContractError("need at least one training slide");
    for (const auto& p : slide_paths) {
      auto s = data::load_slide(p);
      train_.push_back({model::SlideCondition::from_sample(s), s.expr});
      genes_ = s.gene_names;
      n_genes_ = s.n_genes();
      visual_dim_ = s.visual_dim();
    }
    model_ = run::build_generator(cfg_, n_genes_, visual_dim_);
    nn::AdamWConfig oc;
    oc.lr = cfg_.train.lr;
    oc.weight_decay = cfg_.train.weight_decay;
    oc.grad_clip = cfg_.train.grad_clip;
    opt_ = nn::AdamW(oc);
  }

  std::vector<double> train(long steps) {
    std::vector<double> losses;
    for (long i = 0; i < steps; ++i) {
      losses.push_back(model_->train_step(train_, opt_, rng_).total);
      ++step_;
    }
    return losses;
  }

  Eigen::MatrixXd sample(const std::string& slide_path, int steps, std::uint64_t seed) const {
    const auto s = data::load_slide(slide_path);
    return model_->sample(model::SlideCondition::from_sample(s), steps, seed);
  }

  void save(const std::string& path) const {
    auto ck = run::Checkpoint::capture(*model_, &opt_, &rng_);
    ck.config_hash = cfg_.config_hash();
    ck.config_json = cfg_.to_json();
    ck.seed = cfg_.seed;
    ck.step = step_;
    ck.n_genes = n_genes_;
    ck.visual_dim = visual_dim_;
    ck.gene_names = genes_;
    ck.save(path);
  }

  std::vector<double> weights() const { return model_->params().flat_values(); }
  long step() const { return step_; }
  std::string config_hash() const { return cfg_.config_hash(); }

 private:
  run::RunConfig cfg_;
  Rng rng_;
  std::vector<model::TrainSlide> train_;
  std::vector<std::string> genes_;
  std::size_t n_genes_ = 0, visual_dim_ = 0;
  std::unique_ptr<model::Generator> model_;
  nn::AdamW opt_;
  long step_ = 0;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Spatial transcriptomics generation: joint graph diffusion, FLAG and gene-dimension experiments";

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<UndefinedError>(m, "UndefinedError", PyExc_ArithmeticError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  py::class_<sde::NoiseSchedule>(m, "NoiseSchedule")
      .def(py::init<double, double>(), py::arg("sigma_min") = 0.01, py::arg("sigma_max") = 10.0)
      .def("sigma", &sde::NoiseSchedule::sigma)
      .def("g_squared", &sde::NoiseSchedule::g_squared)
      .def_property_readonly("sigma_min", &sde::NoiseSchedule::sigma_min)
      .def_property_readonly("sigma_max", &sde::NoiseSchedule::sigma_max);
  m.def("heun_integrate",
        [](const Eigen::MatrixXd& x, const std::function<Eigen::MatrixXd(const Eigen::MatrixXd&, double)>& score,
           const sde::NoiseSchedule& s, int steps, bool tweedie_final) {
          return sde::heun_integrate(x, score, s, steps, {tweedie_final});
        },
        py::arg("x_init"), py::arg("score_fn"), py::arg("schedule"), py::arg("steps"),
        py::arg("tweedie_final") = true);
  m.def("uniform_time_grid", &sde::uniform_time_grid);

  m.def("pcc", [](const Eigen::MatrixXd& p, const Eigen::MatrixXd& g) { return metrics::pcc_mse(p, g).pcc; });
  m.def("mse", [](const Eigen::MatrixXd& p, const Eigen::MatrixXd& g) { return metrics::pcc_mse(p, g).mse; });
  m.def("gsc", &metrics::gsc);
  m.def("ssc", [](const Eigen::MatrixXd& p, const Eigen::MatrixXd& g, const Eigen::MatrixXd& coords, std::size_t k) {
    return metrics::ssc(p, g, coords, k).ssc;
  }, py::arg("pred"), py::arg("gt"), py::arg("coords"), py::arg("k") = kDefaultNeighbors);
  m.def("gene_corr_matrix", &metrics::gene_corr_matrix, py::arg("x"), py::arg("eps") = 1e-8);
  m.def("empirical_correlation", py::overload_cast<const Eigen::MatrixXd&, double>(&joint::empirical_correlation),
        py::arg("x"), py::arg("eps") = 1e-8);

  py::class_<SlideSample>(m, "SlideSample")
      .def_readwrite("coords", &SlideSample::coords)
      .def_readwrite("visual", &SlideSample::visual)
      .def_readwrite("expr", &SlideSample::expr)
      .def_readwrite("gene_names", &SlideSample::gene_names)
      .def_readwrite("slide_id", &SlideSample::slide_id);
  m.def("load_slide", &data::load_slide);
  m.def("save_slide", &data::save_slide);
  m.def("synth_slide",
        [](std::size_t n_spots, std::size_t n_genes, const std::string& cov, double length_scale,
           std::size_t visual_dim, std::uint64_t seed) {
          data::SyntheticSpec spec;
          spec.n_spots = n_spots;
          spec.n_genes = n_genes;
          spec.cov_kind = data::parse_cov_kind(cov);
          spec.length_scale = length_scale;
          spec.visual_dim = visual_dim;
          spec.seed = seed;
          auto s = data::synth_slide(spec);
          return py::make_tuple(s.sample, s.a_star);
        },
        py::arg("n_spots") = 64, py::arg("n_genes") = 50, py::arg("cov") = "spatial_rbf",
        py::arg("length_scale") = 150.0, py::arg("visual_dim") = 64, py::arg("seed") = 0);
  m.def("hmhvg_select", [](const Eigen::MatrixXd& x, const std::vector<std::string>& names, std::size_t g) {
    return data::hmhvg_select(x, names, g).names;
  });

  m.def("gram_error", [](std::size_t n, const std::vector<std::size_t>& g, std::size_t trials, std::uint64_t seed) {
    const auto r = curse::gram_error_experiment(n, g, trials, Eigen::MatrixXd::Identity(n, n), seed);
    return py::make_tuple(r.statistic, r.slope_loglog);
  }, py::arg("n"), py::arg("g_values"), py::arg("trials"), py::arg("seed") = 0);
  m.def("fisher_scaling", [](std::size_t n, const std::vector<std::size_t>& g, std::size_t trials, std::uint64_t seed) {
    return curse::fisher_scaling(n, g, trials, Eigen::MatrixXd::Identity(n, n), seed).statistic;
  }, py::arg("n"), py::arg("g_values"), py::arg("trials"), py::arg("seed") = 0);

  m.def("config_hash", [](const std::string& json) { return run::RunConfig::from_json(json).config_hash(); });
  m.def("default_config", [] { return run::RunConfig{}.to_json(); });

  py::class_<Trainer>(m, "Trainer")
      .def(py::init<const std::string&, const std::vector<std::string>&>(), py::arg("config_json"),
           py::arg("slides"))
      .def("train", &Trainer::train, py::arg("steps"))
      .def("sample", &Trainer::sample, py::arg("slide"), py::arg("steps") = 100, py::arg("seed") = 0)
      .def("save", &Trainer::save)
      .def("weights", &Trainer::weights)
      .def_property_readonly("step", &Trainer::step)
      .def_property_readonly("config_hash", &Trainer::config_hash);
}
