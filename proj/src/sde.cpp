#include "flag/sde.hpp"

#include <cmath>
#include <string>

#include "flag/errors.hpp"

namespace flag::sde {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ContractError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
}

void check_times(const Matrix& x, const Vector& t, const char* what) {
  if (t.size() != x.rows())
    throw ContractError(std::string(what) + ": need one time per row (" + std::to_string(x.rows()) +
                        " rows, " + std::to_string(t.size()) + " times)");
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace

NoiseSchedule::NoiseSchedule(double sigma_min, double sigma_max)
    : sigma_min_(sigma_min), sigma_max_(sigma_max) {
  if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
    throw ContractError("NoiseSchedule requires 0 < sigma_min < sigma_max");
  log_ratio_ = std::log(sigma_max_ / sigma_min_);
}

double NoiseSchedule::sigma(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("sigma: t must lie in [0,1], got " + std::to_string(t));
  return sigma_min_ * std::exp(log_ratio_ * t);
}

double NoiseSchedule::g_squared(double t) const {
  const double s = sigma(t);
  return 2.0 * log_ratio_ * s * s;
}

Matrix perturb(const Matrix& x0, const Vector& t, const Matrix& z, const NoiseSchedule& s) {
  check_same_shape(x0, z, "perturb");
  check_times(x0, t, "perturb");
  Matrix xt = x0;
  for (Eigen::Index i = 0; i < x0.rows(); ++i) xt.row(i) += s.sigma(t(i)) * z.row(i);
  return xt;
}

DiffusionBatch make_batch(const Matrix& x0, const Vector& t, const Matrix& z, const NoiseSchedule& s) {
  return DiffusionBatch{x0, t, z, perturb(x0, t, z, s)};
}

DiffusionBatch sample_batch(const Matrix& x0, const NoiseSchedule& s, Rng& rng, double eps_t) {
  Vector t(x0.rows());
  for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = rng.uniform(eps_t, 1.0);
  Matrix z = rng.normal_matrix(x0.rows(), x0.cols());
  return make_batch(x0, t, z, s);
}

Matrix true_perturbation_score(const Matrix& xt, const Matrix& x0, const Vector& t, const NoiseSchedule& s) {
  check_same_shape(xt, x0, "true_perturbation_score");
  check_times(xt, t, "true_perturbation_score");
  Matrix out(xt.rows(), xt.cols());
  for (Eigen::Index i = 0; i < xt.rows(); ++i) {
    const double sg = s.sigma(t(i));
    out.row(i) = -(xt.row(i) - x0.row(i)) / (sg * sg);
  }
  return out;
}

namespace {
Matrix eval_score(const BatchScoreFn& f, const DiffusionBatch& b) {
  Matrix pred = f(b.xt, b.t);
  check_same_shape(pred, b.xt, "score model output");
  if (!all_finite(pred)) throw NumericError("score model produced non-finite values");
  return pred;
}
}  // namespace

double dsm_loss(const BatchScoreFn& score_fn, const DiffusionBatch& batch, const NoiseSchedule& s) {
  const Matrix pred = eval_score(score_fn, batch);
  const Matrix target = true_perturbation_score(batch.xt, batch.x0, batch.t, s);
  return (pred - target).squaredNorm() / static_cast<double>(pred.size());
}

double dsm_loss_eps(const BatchScoreFn& score_fn, const DiffusionBatch& batch, const NoiseSchedule& s) {
  const Matrix pred = eval_score(score_fn, batch);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i)
    acc += (batch.z.row(i) + s.sigma(batch.t(i)) * pred.row(i)).squaredNorm();
  return acc / static_cast<double>(pred.size());
}

Matrix tweedie_denoise(const Matrix& xt, const Matrix& score, const Vector& t, const NoiseSchedule& s) {
  check_same_shape(xt, score, "tweedie_denoise");
  check_times(xt, t, "tweedie_denoise");
  Matrix out = xt;
  for (Eigen::Index i = 0; i < xt.rows(); ++i) {
    const double sg = s.sigma(t(i));
    out.row(i) += sg * sg * score.row(i);
  }
  return out;
}

Matrix tweedie_denoise(const Matrix& xt, const Matrix& score, double t, const NoiseSchedule& s) {
  check_same_shape(xt, score, "tweedie_denoise");
  const double sg = s.sigma(t);
  return xt + sg * sg * score;
}

std::vector<double> uniform_time_grid(int steps) {
  if (steps < 1) throw ContractError("time grid needs at least one step");
  std::vector<double> g(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) g[static_cast<std::size_t>(i)] = 1.0 - static_cast<double>(i) / steps;
  g.back() = 0.0;
  return g;
}

Matrix heun_integrate(const Matrix& x_init, const ScoreFn& score_fn, const NoiseSchedule& s,
                      const std::vector<double>& t_grid, HeunOptions opts) {
  if (t_grid.size() < 2) throw ContractError("heun_integrate: grid needs at least two points");
  for (std::size_t i = 1; i < t_grid.size(); ++i)
    if (!(t_grid[i] < t_grid[i - 1])) throw ContractError("heun_integrate: time grid must be strictly decreasing");

  auto drift = [&](const Matrix& x, double t) -> Matrix {
    Matrix sc = score_fn(x, t);
    check_same_shape(sc, x, "sampler score");
    return -0.5 * s.g_squared(t) * sc;
  };

  Matrix x = x_init;
  for (std::size_t i = 0; i + 1 < t_grid.size(); ++i) {
    const double t = t_grid[i], tn = t_grid[i + 1];
    const double dt = tn - t;  // negative: integrating towards t = 0
    const Matrix d1 = drift(x, t);
    const Matrix x_euler = x + dt * d1;
    const Matrix d2 = drift(x_euler, tn);
    x += 0.5 * dt * (d1 + d2);
    if (!all_finite(x)) throw NumericError("sampler diverged", static_cast<long>(i));
  }
  if (opts.tweedie_final) {
    const double t_end = t_grid.back();
    x = tweedie_denoise(x, score_fn(x, t_end), t_end, s);
    if (!all_finite(x)) throw NumericError("sampler diverged in final projection", static_cast<long>(t_grid.size() - 1));
  }
  return x;
}

Matrix heun_integrate(const Matrix& x_init, const ScoreFn& score_fn, const NoiseSchedule& s, int steps,
                      HeunOptions opts) {
  return heun_integrate(x_init, score_fn, s, uniform_time_grid(steps), opts);
}

}  // namespace flag::sde
