#pragma once

// Monte-Carlo checks of the gene-dimension-curse theory (Gram-estimator error,
// Fisher scaling of the edge posterior) and the synthetic experiments that
// contrast joint node–edge diffusion with node-only and FLAG generators.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "flag/data.hpp"

namespace flag::curse {

using Matrix = Eigen::MatrixXd;

struct ScalingResult {
  std::vector<std::size_t> g_values;
  std::vector<double> statistic;
  std::size_t trials = 0;
  double slope_loglog = 0;
  std::pair<double, double> ci_95{0, 0};  // bootstrap percentile interval of the slope
  // Fisher scaling only: extreme eigenvalues of Σ_A per G.
  std::vector<double> eig_min, eig_max;

  std::string to_table() const;  // CSV: G,statistic[,eig_min,eig_max]
};

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

// E‖Â − A*‖_F² with Â = X₀X₀ᵀ/G and the columns of X₀ drawn i.i.d. from N(0, A*).
ScalingResult gram_error_experiment(std::size_t n, const std::vector<std::size_t>& g_values, std::size_t trials,
                                    const Matrix& a_star, std::uint64_t seed);

// 1/λ_min(Σ_A), Σ_A the empirical covariance of the upper triangle (with
// diagonal) of Â over trials.
ScalingResult fisher_scaling(std::size_t n, const std::vector<std::size_t>& g_values, std::size_t trials,
                             const Matrix& a_star, std::uint64_t seed);

// Σ_A for a single G; exposed for the analytic Wishart comparison.
Matrix gram_entry_covariance(std::size_t n, std::size_t g, std::size_t trials, const Matrix& a_star,
                             std::uint64_t seed);

struct Histogram {
  double lo = -1, hi = 1;
  std::vector<std::size_t> g_values;
  std::vector<std::vector<double>> density;  // per G, per bin

  std::string to_table() const;  // CSV: bin_center,G1,G2,...
};

// Off-diagonal entries of Â pooled over trials, one normalized histogram per G.
Histogram offdiag_histogram(std::size_t n, const std::vector<std::size_t>& g_values, std::size_t trials,
                            const Matrix& a_star, std::uint64_t seed, std::size_t bins = 40, double lo = -1,
                            double hi = 1);

// ------------------------------------------------------------- dimension sweep

struct SweepConfig {
  std::vector<std::size_t> g_values{10, 50, 100, 200};
  std::vector<std::string> methods{"joint", "node_only", "flag"};
  std::size_t n_spots = 64;
  std::size_t train_slides = 4;
  std::size_t test_slides = 1;
  long steps = 2000;
  int sample_steps = 100;

  data::CovKind cov_kind = data::CovKind::SpatialRbf;
  double length_scale = 150.0;
  std::size_t visual_dim = 64;
  double visual_noise = 0.1;

  std::size_t hidden = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t edge_hidden = 8;
  std::size_t dit_hidden = 32;
  std::size_t dit_layers = 2;
  std::size_t dit_heads = 4;
  std::size_t gene_dim = 32;
  std::size_t gfm_dim = 0;  // > 0: align FLAG to random per-gene embeddings of this width
  std::size_t batch = 2;
  std::size_t spot_batch = 8;
  double lr = 1e-3;
  double lambda_c = 1.0;
  double lambda_align = 0.5;
  std::uint64_t seed = 0;
};

struct SweepCell {
  std::string method;
  std::size_t g = 0;
  double pcc = 0, gsc = 0, ssc = 0;
  double final_loss = 0;
  bool collapsed = false;  // training or sampling diverged; metrics are NaN
  double seconds = 0;
};

struct SweepResult {
  std::vector<SweepCell> cells;

  const SweepCell& cell(const std::string& method, std::size_t g) const;
  std::string to_table() const;  // CSV
};

using ProgressFn = std::function<void(const std::string&)>;

SweepResult dimension_sweep(const SweepConfig& cfg, const ProgressFn& progress = {});

// One sweep cell; exposed so that harnesses can time or rerun a single point.
SweepCell run_sweep_cell(const SweepConfig& cfg, const std::string& method, std::size_t g);

// ---------------------------------------------------------------- edge ablation

struct AblationConfig {
  std::size_t n_spots = 64;
  std::size_t n_genes = 50;
  std::size_t train_slides = 16;
  std::size_t test_slides = 4;
  long steps = 600;
  data::CovKind cov_kind = data::CovKind::SpatialRbf;
  double length_scale = 150.0;
  std::size_t visual_dim = 16;
  double visual_noise = 0.1;
  bool informative_visual = true;

  std::size_t hidden = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t batch = 2;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string> kEdgeSets{"img", "img+dist", "img+dist+oracle_corr"};

struct AblationResult {
  std::map<std::string, double> pcc;  // edge set -> held-out PCC
  std::map<std::string, double> final_loss;

  std::string to_table() const;
};

AblationResult edge_ablation(const AblationConfig& cfg, const ProgressFn& progress = {});

}  // namespace flag::curse
