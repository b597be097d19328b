#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flag/spatial_graph.hpp"

namespace flag::metrics {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Pearson correlation; throws UndefinedError when either side has zero variance.
double pearson(const Vector& a, const Vector& b);

struct PccResult {
  double pcc = 0;
  double mse = 0;
  Vector per_gene;  // NaN for excluded genes
  std::vector<std::size_t> excluded_genes;
};

// Per-gene Pearson across spots, averaged over genes with defined variance.
PccResult pcc_mse(const Matrix& pred, const Matrix& gt);

// Per-spot Pearson across genes (diagnostic; NaN where undefined).
Vector per_spot_pcc(const Matrix& pred, const Matrix& gt);

// C = X̃ᵀX̃/(N−1) with X̃ = (X − μ)/max(σ, eps), σ the sample standard deviation.
// Zero-variance genes give zero rows and columns.
Matrix gene_corr_matrix(const Matrix& x, double eps = 1e-8);

// Pearson between the strict upper triangles of the two gene-gene correlation matrices.
double gsc(const Matrix& pred, const Matrix& gt);

// I = (N/S₀)·zᵀWz / zᵀz with z = x − mean(x).
double morans_i(const Vector& x, const SpatialWeightGraph& w);

struct SscResult {
  double ssc = 0;
  Vector morans_gt, morans_pred;  // NaN where undefined
  std::vector<std::size_t> excluded_genes;
};

SscResult ssc(const Matrix& pred, const Matrix& gt, const Matrix& coords, std::size_t k = kDefaultNeighbors);
SscResult ssc(const Matrix& pred, const Matrix& gt, const SpatialWeightGraph& w);

// One-vs-rest Wilcoxon rank-sum. `exact` is set when either group has fewer
// than 8 members; p_upper is then the exact upper-tail probability of the
// rank sum (midranks for ties), otherwise a tie-corrected normal tail.
struct RankSumResult {
  double u = 0;
  double z = 0;
  double p_upper = 1;
  bool exact = false;
};
RankSumResult rank_sum_test(const std::vector<double>& in_group, const std::vector<double>& out_group);

// Genes ranked by one-vs-rest rank-sum within the domain, most up-regulated first.
std::vector<std::size_t> rank_genes_for_domain(const Matrix& expr, const std::vector<int>& labels, int domain);

// Mean over domains of |top_k(gt) ∩ top_k(pred)| / top_k.
double deg_overlap(const Matrix& pred, const Matrix& gt, const std::vector<int>& labels, std::size_t top_k);

struct MetricsReport {
  double pcc = 0, mse = 0, gsc = 0, ssc = 0;
  double per_spot_pcc_mean = 0;
  Vector per_gene_pcc, morans_gt, morans_pred;
  std::vector<std::size_t> pcc_excluded, ssc_excluded;
  std::map<std::size_t, double> deg_overlap;  // top_k -> ratio
  std::string config_hash;  // written only when non-empty, together with seed
  std::uint64_t seed = 0;

  std::string to_text() const;
  static MetricsReport from_text(const std::string& text);
};

struct EvaluateOptions {
  std::size_t k = kDefaultNeighbors;
  std::vector<int> domain_labels;  // empty: skip DEG overlap
  std::vector<std::size_t> deg_top_k = {20, 50};
};

MetricsReport evaluate(const Matrix& pred, const Matrix& gt, const Matrix& coords, const EvaluateOptions& opts = {});

}  // namespace flag::metrics
