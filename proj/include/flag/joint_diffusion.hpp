#pragma once

// Joint node–edge score diffusion over (X, A) with A₀ = corr(X₀), plus the
// node-only graph diffusion baseline that shares the same backbone.

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "flag/graph_transformer.hpp"
#include "flag/model_common.hpp"
#include "flag/sde.hpp"

namespace flag::joint {

using model::Matrix;
using model::SlideCondition;
using model::TrainSlide;
using model::Var;

// Row-wise Pearson correlation between spots: XcXcᵀ/(‖xc_i‖‖xc_j‖), with eps added
// to the denominator wherever the norm product falls below eps.
Matrix empirical_correlation(const Matrix& x, double eps = 1e-8);
// Batched, differentiable version: [B,N,G] -> [B,N,N].
Var empirical_correlation(const Var& x, double eps = 1e-8);

// (1/(N(N−1)))·Σ_{i≠j} |a_hat_ij − p_ij|
double offdiag_l1(const Matrix& a_hat, const Matrix& p);

// Sum over both streams of the ε-form DSM term mean((z + σ·s)²), z = (x_t − x₀)/σ.
// With include_edges = false only the node term remains.
double graph_score_loss(const Matrix& score_x, const Matrix& score_a, const Matrix& xt, const Matrix& at,
                        const Matrix& x0, const Matrix& a0, double t, const sde::NoiseSchedule& s,
                        bool include_edges = true);

// Tweedie-denoise both streams, then offdiag_l1(Â₀, corr(X̂₀)).
double consistency_loss(const Matrix& xt, const Matrix& at, const Matrix& score_x, const Matrix& score_a, double t,
                        const sde::NoiseSchedule& s, double eps = 1e-8);

struct GraphState {
  Matrix x;  // N×G
  Matrix a;  // N×N, symmetrized with unit diagonal
  double asymmetry = 0;  // ‖Â₀ − Â₀ᵀ‖_F before symmetrization
};

struct JointLossReport {
  double l_graph = 0;
  double l_cons = 0;
  double lambda_c = 1.0;
  double total = 0;
  double grad_norm = 0;
};

struct JointConfig {
  model::GraphBackboneConfig backbone;  // dynamic; node_in = G
  double lambda_c = 1.0;
  double corr_eps = 1e-8;
  double sigma_min = 0.01;
  double sigma_max = 10.0;
  std::size_t batch = 4;
};

// Noise draws and targets for one joint minibatch.
struct JointBatch {
  std::vector<const SlideCondition*> cond;
  std::vector<Matrix> x0, a0, zx, za;
  std::vector<double> t;
};

JointBatch make_joint_batch(const std::vector<TrainSlide>& slides, std::size_t batch, Rng& rng,
                            double corr_eps = 1e-8);

class JointModel : public model::Generator {
 public:
  JointModel(const JointConfig& cfg, std::uint64_t seed);

  struct Prediction {
    Var eps_x;  // [B,N,G]
    Var eps_a;  // [B,N,N]
  };
  // The network predicts the noise; inputs are scaled by c_in(t).
  Prediction predict(const Var& xt, const Var& at, const Var& cv, const Var& ce, const std::vector<double>& t) const;
  // Scores s = −ε̂/σ(t) for a single slide.
  std::pair<Matrix, Matrix> scores(const Matrix& xt, const Matrix& at, const SlideCondition& c, double t) const;

  struct Losses {
    Var total, l_graph, l_cons;
  };
  Losses losses(const JointBatch& b, double lambda_c) const;

  std::string mode() const override { return "joint"; }
  nn::ParamStore& params() override { return ps_; }
  const nn::ParamStore& params() const override { return ps_; }
  model::StepReport train_step(const std::vector<TrainSlide>& slides, nn::AdamW& opt, Rng& rng) override;
  Matrix sample(const SlideCondition& cond, int steps, std::uint64_t seed) const override;

  const JointConfig& config() const { return cfg_; }
  const sde::NoiseSchedule& schedule() const { return sched_; }
  const model::GraphTransformer& backbone() const { return net_; }

 private:
  JointConfig cfg_;
  sde::NoiseSchedule sched_;
  nn::ParamStore ps_;
  model::GraphTransformer net_;
};

JointLossReport joint_train_step(JointModel& m, const JointBatch& batch, double lambda_c, nn::AdamW& opt);
GraphState joint_sample(const JointModel& m, const SlideCondition& cond, int steps, std::uint64_t seed);

// ------------------------------------------------------------ node-only baseline

struct NodeOnlyConfig {
  model::GraphBackboneConfig backbone;  // static; node_in = G
  double sigma_min = 0.01;
  double sigma_max = 10.0;
  std::size_t batch = 4;
};

class NodeOnlyModel : public model::Generator {
 public:
  NodeOnlyModel(const NodeOnlyConfig& cfg, std::uint64_t seed);

  Var predict(const Var& xt, const Var& cv, const Var& ce, const std::vector<double>& t) const;  // ε̂ [B,N,G]

  std::string mode() const override { return "node_only"; }
  nn::ParamStore& params() override { return ps_; }
  const nn::ParamStore& params() const override { return ps_; }
  model::StepReport train_step(const std::vector<TrainSlide>& slides, nn::AdamW& opt, Rng& rng) override;
  Matrix sample(const SlideCondition& cond, int steps, std::uint64_t seed) const override;

  const NodeOnlyConfig& config() const { return cfg_; }

 private:
  NodeOnlyConfig cfg_;
  sde::NoiseSchedule sched_;
  nn::ParamStore ps_;
  model::GraphTransformer net_;
  nn::Linear head_;
};

}  // namespace flag::joint
