#include "flag/curse_lab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "flag/errors.hpp"
#include "flag/flag_model.hpp"
#include "flag/joint_diffusion.hpp"
#include "flag/metrics.hpp"
#include "flag/rng.hpp"

namespace flag::curse {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::size_t kBootstrap = 200;

Matrix cholesky(const Matrix& a_star, std::size_t n) {
  if (a_star.rows() != static_cast<Eigen::Index>(n) || a_star.cols() != static_cast<Eigen::Index>(n))
    throw ContractError("A* must be N×N");
  Eigen::LLT<Matrix> llt(a_star);
  if (llt.info() != Eigen::Success) throw ContractError("A* must be positive definite");
  return llt.matrixL();
}

Matrix draw_gram(const Matrix& l, std::size_t g, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix x = l * rng.normal_matrix(l.rows(), static_cast<Eigen::Index>(g));
  return x * x.transpose() / static_cast<double>(g);
}

std::uint64_t trial_seed(std::uint64_t seed, std::size_t g, std::size_t trial) {
  return derive_seed(derive_seed(seed, g), trial);
}

Eigen::VectorXd upper_triangle(const Matrix& a) {
  const Eigen::Index n = a.rows();
  Eigen::VectorXd v(n * (n + 1) / 2);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j) v(k++) = a(i, j);
  return v;
}

std::vector<double> log_values(const std::vector<std::size_t>& g) {
  std::vector<double> out;
  for (std::size_t x : g) out.push_back(static_cast<double>(x));
  return out;
}

std::pair<double, double> percentile_interval(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  auto at = [&](double q) { return v[static_cast<std::size_t>(std::lround(q * static_cast<double>(v.size() - 1)))]; };
  return {at(0.025), at(0.975)};
}

Matrix sample_covariance(const Matrix& rows) {
  const Eigen::RowVectorXd mu = rows.colwise().mean();
  const Matrix c = rows.rowwise() - mu;
  return c.transpose() * c / static_cast<double>(rows.rows() - 1);
}

void check_g_values(const std::vector<std::size_t>& g) {
  if (g.empty()) throw ContractError("G_values must not be empty");
  for (std::size_t x : g)
    if (x == 0) throw ContractError("G_values must be positive");
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(10);
  os << x;
  return os.str();
}

}  // namespace

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope: need at least two points");
  double mx = 0, my = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) throw ContractError("loglog_slope: values must be positive");
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw ContractError("loglog_slope: x values must differ");
  return sxy / sxx;
}

std::string ScalingResult::to_table() const {
  std::ostringstream os;
  const bool eig = eig_min.size() == g_values.size() && !eig_min.empty();
  os << "G,statistic" << (eig ? ",eig_min,eig_max" : "") << "\n";
  for (std::size_t i = 0; i < g_values.size(); ++i) {
    os << g_values[i] << "," << fmt(statistic[i]);
    if (eig) os << "," << fmt(eig_min[i]) << "," << fmt(eig_max[i]);
    os << "\n";
  }
  os << "# trials=" << trials << " slope_loglog=" << fmt(slope_loglog) << " ci_95=[" << fmt(ci_95.first) << ","
     << fmt(ci_95.second) << "]\n";
  return os.str();
}

ScalingResult gram_error_experiment(std::size_t n, const std::vector<std::size_t>& g_values, std::size_t trials,
                                    const Matrix& a_star, std::uint64_t seed) {
  if (trials < 50) throw ContractError("gram_error_experiment: trials must be >= 50");
  check_g_values(g_values);
  const Matrix l = cholesky(a_star, n);
  ScalingResult r;
  r.g_values = g_values;
  r.trials = trials;
  std::vector<std::vector<double>> per_trial;
  for (std::size_t g : g_values) {
    std::vector<double> errs(trials);
    for (std::size_t k = 0; k < trials; ++k) errs[k] = (draw_gram(l, g, trial_seed(seed, g, k)) - a_star).squaredNorm();
    double mean = 0;
    for (double e : errs) mean += e / static_cast<double>(trials);
    r.statistic.push_back(mean);
    per_trial.push_back(std::move(errs));
  }
  if (g_values.size() < 2) return r;
  const auto xs = log_values(g_values);
  r.slope_loglog = loglog_slope(xs, r.statistic);
  Rng boot(derive_seed(seed, 0xb007));
  std::vector<double> slopes;
  for (std::size_t b = 0; b < kBootstrap; ++b) {
    std::vector<double> ys;
    for (const auto& errs : per_trial) {
      double m = 0;
      for (std::size_t k = 0; k < trials; ++k) m += errs[boot.index(trials)];
      ys.push_back(m / static_cast<double>(trials));
    }
    slopes.push_back(loglog_slope(xs, ys));
  }
  r.ci_95 = percentile_interval(std::move(slopes));
  return r;
}

Matrix gram_entry_covariance(std::size_t n, std::size_t g, std::size_t trials, const Matrix& a_star,
                             std::uint64_t seed) {
  const Matrix l = cholesky(a_star, n);
  const Eigen::Index m = static_cast<Eigen::Index>(n * (n + 1) / 2);
  if (trials <= static_cast<std::size_t>(m))
    throw UndefinedError("Σ_A is singular with " + std::to_string(trials) + " trials for " + std::to_string(m) +
                         " entries; increase trials well beyond N(N+1)/2");
  Matrix rows(static_cast<Eigen::Index>(trials), m);
  for (std::size_t k = 0; k < trials; ++k)
    rows.row(static_cast<Eigen::Index>(k)) = upper_triangle(draw_gram(l, g, trial_seed(seed, g, k))).transpose();
  return sample_covariance(rows);
}

ScalingResult fisher_scaling(std::size_t n, const std::vector<std::size_t>& g_values, std::size_t trials,
                             const Matrix& a_star, std::uint64_t seed) {
  if (trials < 200) throw ContractError("fisher_scaling: trials must be >= 200 per G");
  check_g_values(g_values);
  const Matrix l = cholesky(a_star, n);
  const Eigen::Index m = static_cast<Eigen::Index>(n * (n + 1) / 2);
  ScalingResult r;
  r.g_values = g_values;
  r.trials = trials;
  std::vector<Matrix> samples;
  for (std::size_t g : g_values) {
    Matrix rows(static_cast<Eigen::Index>(trials), m);
    for (std::size_t k = 0; k < trials; ++k)
      rows.row(static_cast<Eigen::Index>(k)) = upper_triangle(draw_gram(l, g, trial_seed(seed, g, k))).transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> es(sample_covariance(rows), Eigen::EigenvaluesOnly);
    const double lmin = es.eigenvalues().minCoeff(), lmax = es.eigenvalues().maxCoeff();
    if (!(lmin > 1e-12 * lmax))
      throw UndefinedError("Σ_A estimate is singular at G=" + std::to_string(g) +
                           "; increase trials (currently " + std::to_string(trials) + ")");
    r.statistic.push_back(1.0 / lmin);
    r.eig_min.push_back(lmin);
    r.eig_max.push_back(lmax);
    samples.push_back(std::move(rows));
  }
  if (g_values.size() < 2) return r;
  const auto xs = log_values(g_values);
  r.slope_loglog = loglog_slope(xs, r.statistic);
  Rng boot(derive_seed(seed, 0xb008));
  std::vector<double> slopes;
  for (std::size_t b = 0; b < kBootstrap / 2; ++b) {
    std::vector<double> ys;
    for (const Matrix& rows : samples) {
      Matrix res(rows.rows(), rows.cols());
      for (Eigen::Index k = 0; k < rows.rows(); ++k) res.row(k) = rows.row(static_cast<Eigen::Index>(boot.index(trials)));
      Eigen::SelfAdjointEigenSolver<Matrix> es(sample_covariance(res), Eigen::EigenvaluesOnly);
      ys.push_back(1.0 / std::max(es.eigenvalues().minCoeff(), 1e-300));
    }
    slopes.push_back(loglog_slope(xs, ys));
  }
  r.ci_95 = percentile_interval(std::move(slopes));
  return r;
}

std::string Histogram::to_table() const {
  std::ostringstream os;
  os << "bin_center";
  for (std::size_t g : g_values) os << ",G" << g;
  os << "\n";
  const std::size_t bins = density.empty() ? 0 : density[0].size();
  const double w = (hi - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    os << fmt(lo + (static_cast<double>(b) + 0.5) * w);
    for (const auto& d : density) os << "," << fmt(d[b]);
    os << "\n";
  }
  return os.str();
}

Histogram offdiag_histogram(std::size_t n, const std::vector<std::size_t>& g_values, std::size_t trials,
                            const Matrix& a_star, std::uint64_t seed, std::size_t bins, double lo, double hi) {
  check_g_values(g_values);
  if (bins == 0 || !(hi > lo)) throw ContractError("histogram: need bins > 0 and hi > lo");
  if (n < 2) throw ContractError("histogram: need N >= 2");
  const Matrix l = cholesky(a_star, n);
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.g_values = g_values;
  const double w = (hi - lo) / static_cast<double>(bins);
  for (std::size_t g : g_values) {
    std::vector<double> counts(bins, 0.0);
    double total = 0;
    for (std::size_t k = 0; k < trials; ++k) {
      const Matrix a = draw_gram(l, g, trial_seed(seed, g, k));
      for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
          if (i == j) continue;
          total += 1;
          const double pos = (a(i, j) - lo) / w;
          if (pos >= 0 && pos < static_cast<double>(bins)) counts[static_cast<std::size_t>(pos)] += 1;
        }
    }
    for (double& c : counts) c /= total * w;
    h.density.push_back(std::move(counts));
  }
  return h;
}

// --------------------------------------------------------------- training helpers

namespace {

struct SlideSet {
  std::vector<model::TrainSlide> train;
  std::vector<data::SyntheticSlide> test;
  std::vector<model::SlideCondition> test_cond;
};

SlideSet make_slides(std::size_t n, std::size_t g, std::size_t dv, double noise, data::CovKind kind, double ls,
                     bool informative, std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
  SlideSet s;
  auto spec_for = [&](std::uint64_t sd) {
    data::SyntheticSpec spec;
    spec.n_spots = n;
    spec.n_genes = g;
    spec.cov_kind = kind;
    spec.length_scale = ls;
    spec.visual_dim = dv;
    spec.visual_noise = noise;
    spec.informative_visual = informative;
    spec.sketch_seed = derive_seed(seed, 0x5e7c);
    spec.seed = sd;
    return spec;
  };
  for (std::size_t i = 0; i < n_train; ++i) {
    auto sl = data::synth_slide(spec_for(derive_seed(seed, 1000 + i)));
    s.train.push_back({model::SlideCondition::from_sample(sl.sample), sl.sample.expr});
  }
  for (std::size_t i = 0; i < n_test; ++i) {
    auto sl = data::synth_slide(spec_for(derive_seed(seed, 2000 + i)));
    s.test_cond.push_back(model::SlideCondition::from_sample(sl.sample));
    s.test.push_back(std::move(sl));
  }
  return s;
}

std::unique_ptr<model::Generator> make_generator(const SweepConfig& c, const std::string& method, std::size_t g,
                                                 std::uint64_t seed) {
  model::GraphBackboneConfig bb;
  bb.node_in = g;
  bb.hidden = c.hidden;
  bb.layers = c.layers;
  bb.heads = c.heads;
  bb.cond_dim = c.visual_dim;
  bb.edge_hidden = c.edge_hidden;
  if (method == "joint") {
    joint::JointConfig jc;
    jc.backbone = bb;
    jc.lambda_c = c.lambda_c;
    jc.batch = c.batch;
    return std::make_unique<joint::JointModel>(jc, seed);
  }
  if (method == "node_only") {
    joint::NodeOnlyConfig nc;
    nc.backbone = bb;
    nc.batch = c.batch;
    return std::make_unique<joint::NodeOnlyModel>(nc, seed);
  }
  if (method == "flag") {
    flagm::FlagConfig fc;
    fc.backbone = bb;
    fc.dit.n_genes = g;
    fc.dit.hidden = c.dit_hidden;
    fc.dit.layers = c.dit_layers;
    fc.dit.heads = c.dit_heads;
    fc.dit.gene_dim = c.gene_dim;
    fc.dit.align_layer = std::max<std::size_t>(1, c.dit_layers / 2);
    fc.d_e = c.gfm_dim;
    fc.lambda_align = c.lambda_align;
    fc.batch = c.batch;
    fc.spot_batch = c.spot_batch;
    auto m = std::make_unique<flagm::FlagModel>(fc, seed);
    if (c.gfm_dim) {
      std::vector<std::string> names;
      for (std::size_t j = 0; j < g; ++j) names.push_back("gene_" + std::to_string(j));
      m->set_embeddings(data::random_gfm_embeddings(names, c.gfm_dim, derive_seed(seed, 0x6f6d)));
    }
    return m;
  }
  throw ContractError("unknown method '" + method + "' (expected joint, node_only or flag)");
}

std::uint64_t method_id(const std::string& m) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : m) h = (h ^ ch) * 1099511628211ULL;
  return h;
}

double safe(const std::function<double()>& f) {
  try {
    return f();
  } catch (const UndefinedError&) {
    return kNaN;
  } catch (const ContractError&) {
    return kNaN;
  }
}

}  // namespace

const SweepCell& SweepResult::cell(const std::string& method, std::size_t g) const {
  for (const auto& c : cells)
    if (c.method == method && c.g == g) return c;
  throw ContractError("no sweep cell for " + method + " at G=" + std::to_string(g));
}

std::string SweepResult::to_table() const {
  std::ostringstream os;
  os << "method,G,pcc,gsc,ssc,final_loss,collapsed\n";
  for (const auto& c : cells)
    os << c.method << "," << c.g << "," << fmt(c.pcc) << "," << fmt(c.gsc) << "," << fmt(c.ssc) << ","
       << fmt(c.final_loss) << "," << (c.collapsed ? 1 : 0) << "\n";
  return os.str();
}

SweepCell run_sweep_cell(const SweepConfig& cfg, const std::string& method, std::size_t g) {
  if (cfg.steps < 0 || cfg.sample_steps < 1) throw ContractError("sweep: steps >= 0 and sample_steps >= 1 required");
  const auto t0 = std::chrono::steady_clock::now();
  const SlideSet slides = make_slides(cfg.n_spots, g, cfg.visual_dim, cfg.visual_noise, cfg.cov_kind,
                                      cfg.length_scale, true, cfg.train_slides, cfg.test_slides, cfg.seed);
  const std::uint64_t cell_seed = derive_seed(derive_seed(cfg.seed, method_id(method)), g);
  auto model = make_generator(cfg, method, g, cell_seed);

  SweepCell cell;
  cell.method = method;
  cell.g = g;
  nn::AdamWConfig oc;
  oc.lr = cfg.lr;
  nn::AdamW opt(oc);
  Rng rng(derive_seed(cell_seed, 1));
  try {
    for (long s = 0; s < cfg.steps; ++s) cell.final_loss = model->train_step(slides.train, opt, rng).total;
    double pcc = 0, gsc = 0, ssc = 0;
    for (std::size_t i = 0; i < slides.test.size(); ++i) {
      const Matrix pred = model->sample(slides.test_cond[i], cfg.sample_steps, derive_seed(cell_seed, 100 + i));
      if (!pred.allFinite()) throw NumericError("non-finite sample");
      const auto& gt = slides.test[i].sample;
      pcc += safe([&] { return metrics::pcc_mse(pred, gt.expr).pcc; });
      gsc += safe([&] { return metrics::gsc(pred, gt.expr); });
      ssc += safe([&] { return metrics::ssc(pred, gt.expr, gt.coords).ssc; });
    }
    const double k = static_cast<double>(slides.test.size());
    cell.pcc = pcc / k;
    cell.gsc = gsc / k;
    cell.ssc = ssc / k;
  } catch (const NumericError&) {
    cell.collapsed = true;
    cell.pcc = cell.gsc = cell.ssc = kNaN;
  }
  cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return cell;
}

SweepResult dimension_sweep(const SweepConfig& cfg, const ProgressFn& progress) {
  check_g_values(cfg.g_values);
  for (const auto& m : cfg.methods)
    if (m != "joint" && m != "node_only" && m != "flag") throw ContractError("unknown method '" + m + "'");
  SweepResult r;
  for (std::size_t g : cfg.g_values)
    for (const auto& m : cfg.methods) {
      r.cells.push_back(run_sweep_cell(cfg, m, g));
      if (progress) {
        const auto& c = r.cells.back();
        progress(m + " G=" + std::to_string(g) + " pcc=" + fmt(c.pcc) + (c.collapsed ? " (collapsed)" : "") +
                 " t=" + fmt(c.seconds) + "s");
      }
    }
  return r;
}

// ---------------------------------------------------------------- edge ablation

namespace {

// Static graph transformer without expression input, regressing X₀ directly.
class GraphRegressor {
 public:
  GraphRegressor(const AblationConfig& c, std::size_t channels, std::uint64_t seed) {
    model::GraphBackboneConfig bb;
    bb.node_in = 0;
    bb.hidden = c.hidden;
    bb.layers = c.layers;
    bb.heads = c.heads;
    bb.cond_dim = c.visual_dim;
    bb.edge_dim = channels;
    bb.dynamic = false;
    Rng rng(seed);
    net_ = model::GraphTransformer(ps_, "backbone", bb, rng);
    head_ = nn::Linear(ps_, "head", c.hidden, c.n_genes, rng);
  }

  ad::Var predict(const ad::Var& cv, const ad::Var& ce) const {
    std::vector<double> t(cv.dim(0), 0.0);
    return head_(ad::layer_norm_last(net_.forward_static(ad::Var(), ce, cv, t), net_.config().ln_eps));
  }

  nn::ParamStore& params() { return ps_; }

 private:
  nn::ParamStore ps_;
  model::GraphTransformer net_;
  nn::Linear head_;
};

EdgeCondition edge_set(const std::string& name, const SlideSample& s) {
  const EdgeCondition base = build_edge_condition(s);
  if (name == "img") return EdgeCondition::from_channels({base.channel(1)});
  if (name == "img+dist") return base;
  if (name == "img+dist+oracle_corr")
    return EdgeCondition::from_channels({base.channel(0), base.channel(1), joint::empirical_correlation(s.expr)});
  throw ContractError("unknown edge set '" + name + "'");
}

}  // namespace

std::string AblationResult::to_table() const {
  std::ostringstream os;
  os << "edge_set,pcc,final_loss\n";
  for (const auto& name : kEdgeSets)
    if (pcc.count(name)) os << name << "," << fmt(pcc.at(name)) << "," << fmt(final_loss.at(name)) << "\n";
  return os.str();
}

AblationResult edge_ablation(const AblationConfig& cfg, const ProgressFn& progress) {
  if (cfg.steps < 0 || cfg.train_slides == 0 || cfg.test_slides == 0)
    throw ContractError("edge_ablation: need steps >= 0 and non-empty train/test sets");
  const SlideSet slides = make_slides(cfg.n_spots, cfg.n_genes, cfg.visual_dim, cfg.visual_noise, cfg.cov_kind,
                                      cfg.length_scale, cfg.informative_visual, cfg.train_slides, cfg.test_slides,
                                      cfg.seed);
  std::vector<SlideSample> train_samples;
  for (std::size_t i = 0; i < cfg.train_slides; ++i) {
    SlideSample s;
    s.visual = slides.train[i].cond.visual;
    s.expr = slides.train[i].x0;
    s.coords = slides.test[0].sample.coords;
    train_samples.push_back(std::move(s));
  }

  AblationResult r;
  for (const auto& name : kEdgeSets) {
    std::vector<model::SlideCondition> train_cond, test_cond;
    for (const auto& s : train_samples) train_cond.push_back({s.visual, edge_set(name, s)});
    for (const auto& t : slides.test) test_cond.push_back({t.sample.visual, edge_set(name, t.sample)});
    const std::size_t channels = train_cond[0].edges.channels;

    GraphRegressor reg(cfg, channels, derive_seed(cfg.seed, 0xab1a));
    nn::AdamWConfig oc;
    oc.lr = cfg.lr;
    nn::AdamW opt(oc);
    Rng rng(derive_seed(cfg.seed, 0xab1b));
    double loss = kNaN;
    for (long step = 0; step < cfg.steps; ++step) {
      const auto plan = model::plan_batch(train_cond.size(), cfg.batch, rng);
      std::vector<const model::SlideCondition*> conds;
      std::vector<Matrix> targets;
      for (std::size_t i : plan.slide) {
        conds.push_back(&train_cond[i]);
        targets.push_back(train_samples[i].expr);
      }
      reg.params().zero_grad();
      ad::Var l = ad::mean_all(
          ad::square(ad::sub(reg.predict(model::stack_visual(conds), model::stack_edges(conds)), model::stack(targets))));
      ad::backward(l);
      loss = l.item();
      model::check_finite_step(loss, reg.params(), step);
      opt.step(reg.params());
    }
    double pcc = 0;
    for (std::size_t i = 0; i < test_cond.size(); ++i) {
      const std::vector<const model::SlideCondition*> one{&test_cond[i]};
      const Matrix pred = model::unstack(reg.predict(model::stack_visual(one), model::stack_edges(one)), 0);
      pcc += safe([&] { return metrics::pcc_mse(pred, slides.test[i].sample.expr).pcc; });
    }
    r.pcc[name] = pcc / static_cast<double>(test_cond.size());
    r.final_loss[name] = loss;
    if (progress) progress(name + " pcc=" + fmt(r.pcc[name]));
  }
  return r;
}

}  // namespace flag::curse
