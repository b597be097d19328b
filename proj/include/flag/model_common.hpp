#pragma once

// Plumbing shared by the generators: per-slide conditioning tensors, stacking
// helpers between Eigen matrices and autodiff tensors, and the common
// train/sample interface used by the CLI and the experiment harnesses.

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "flag/autodiff.hpp"
#include "flag/nn.hpp"
#include "flag/rng.hpp"
#include "flag/sde.hpp"
#include "flag/spatial_graph.hpp"

namespace flag::model {

using ad::Var;
using Matrix = Eigen::MatrixXd;

// Observable conditioning of one slide.
struct SlideCondition {
  Matrix visual;        // N×d_v
  EdgeCondition edges;  // N×N×C

  std::size_t n() const { return static_cast<std::size_t>(visual.rows()); }
  static SlideCondition from_sample(const SlideSample& s, double sigma = kDefaultLengthScale);
};

// A slide with its clean expression target.
struct TrainSlide {
  SlideCondition cond;
  Matrix x0;  // N×G
};

// [B,R,C] constant from B equally shaped matrices (or one matrix tiled B times).
Var stack(const std::vector<Matrix>& mats);
Var tile(const Matrix& m, std::size_t batch);
Var stack_visual(const std::vector<const SlideCondition*>& conds);
Var stack_edges(const std::vector<const SlideCondition*>& conds);
// Element b of a [B,R,C] tensor as an R×C matrix.
Matrix unstack(const Var& v, std::size_t b);

// c_in(t) = 1/√(1+σ(t)²)
double input_scale(const sde::NoiseSchedule& s, double t);

struct StepReport {
  double total = 0;
  std::vector<std::pair<std::string, double>> terms;  // named loss components
  double grad_norm = 0;
};

// Uniformly samples `batch` slide indices and one t ~ U[eps_t, 1] per element.
struct BatchPlan {
  std::vector<std::size_t> slide;
  std::vector<double> t;
};
BatchPlan plan_batch(std::size_t n_slides, std::size_t batch, Rng& rng, double eps_t = 1e-5);

class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::string mode() const = 0;
  virtual nn::ParamStore& params() = 0;
  virtual const nn::ParamStore& params() const = 0;
  // One optimizer step on a minibatch drawn from `slides`.
  virtual StepReport train_step(const std::vector<TrainSlide>& slides, nn::AdamW& opt, Rng& rng) = 0;
  // Generated expression N×G for the given conditioning.
  virtual Matrix sample(const SlideCondition& cond, int steps, std::uint64_t seed) const = 0;
};

// Throws NumericError if any gradient or the loss is non-finite.
void check_finite_step(double loss, const nn::ParamStore& ps, long step);

}  // namespace flag::model
