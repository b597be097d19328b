#pragma once

// Variance-exploding SDE toolkit: σ(t) schedule, closed-form forward
// perturbation, perturbation-kernel scores, denoising score matching,
// Tweedie denoising and a Heun (RK2) probability-flow ODE integrator.

#include <Eigen/Dense>

#include <functional>
#include <vector>

#include "flag/rng.hpp"

namespace flag::sde {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// σ(t) = σ_min · (σ_max/σ_min)^t, i.e. log σ is affine in t.
class NoiseSchedule {
 public:
  NoiseSchedule(double sigma_min = 0.01, double sigma_max = 10.0);

  double sigma_min() const noexcept { return sigma_min_; }
  double sigma_max() const noexcept { return sigma_max_; }

  double sigma(double t) const;
  // g(t)² = dσ²/dt = 2·ln(σ_max/σ_min)·σ(t)²
  double g_squared(double t) const;

 private:
  double sigma_min_, sigma_max_, log_ratio_;
};

struct DiffusionBatch {
  Matrix x0;  // B×D clean data
  Vector t;   // B times in [0,1]
  Matrix z;   // B×D standard normal draws
  Matrix xt;  // x0 + σ(t)·z, row-wise
};

DiffusionBatch make_batch(const Matrix& x0, const Vector& t, const Matrix& z, const NoiseSchedule& s);

// Draws t ~ U[eps_t, 1] per row and z ~ N(0, I).
DiffusionBatch sample_batch(const Matrix& x0, const NoiseSchedule& s, Rng& rng, double eps_t = 1e-5);

Matrix perturb(const Matrix& x0, const Vector& t, const Matrix& z, const NoiseSchedule& s);

// ∇_{x_t} log N(x_t; x_0, σ(t)² I) = −(x_t − x_0)/σ(t)²
Matrix true_perturbation_score(const Matrix& xt, const Matrix& x0, const Vector& t, const NoiseSchedule& s);

// Batch score model: (x_t, per-row t) -> score of matching shape.
using BatchScoreFn = std::function<Matrix(const Matrix& xt, const Vector& t)>;

// Mean over all elements of (s_θ − ∇ log p_t(x_t|x_0))².
double dsm_loss(const BatchScoreFn& score_fn, const DiffusionBatch& batch, const NoiseSchedule& s);
// ε-parameterised form: mean of (z + σ(t)·s_θ)², equal to σ²-weighted DSM.
double dsm_loss_eps(const BatchScoreFn& score_fn, const DiffusionBatch& batch, const NoiseSchedule& s);

// x̂_0 = x_t + σ(t)²·score
Matrix tweedie_denoise(const Matrix& xt, const Matrix& score, const Vector& t, const NoiseSchedule& s);
Matrix tweedie_denoise(const Matrix& xt, const Matrix& score, double t, const NoiseSchedule& s);

// Sampler score field: the whole state shares one time.
using ScoreFn = std::function<Matrix(const Matrix& x, double t)>;

// Uniform grid 1 = t_0 > t_1 > ... > t_K = 0.
std::vector<double> uniform_time_grid(int steps);

struct HeunOptions {
  bool tweedie_final = true;  // project x at the last grid time with Tweedie
};

// Integrates dx/dt = −½ g(t)² s(x,t) backwards along `t_grid` with an Euler
// predictor and trapezoidal corrector per step.
Matrix heun_integrate(const Matrix& x_init, const ScoreFn& score_fn, const NoiseSchedule& s,
                      const std::vector<double>& t_grid, HeunOptions opts = {});
Matrix heun_integrate(const Matrix& x_init, const ScoreFn& score_fn, const NoiseSchedule& s, int steps,
                      HeunOptions opts = {});

}  // namespace flag::sde
