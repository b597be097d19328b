#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace flag {

// One tissue section: spot positions (pixels), per-spot visual embeddings and
// per-spot expression over a fixed gene panel.
struct SlideSample {
  Eigen::MatrixXd coords;  // N×2
  Eigen::MatrixXd visual;  // N×d_v
  Eigen::MatrixXd expr;    // N×G
  std::vector<std::string> gene_names;
  std::string slide_id;

  std::size_t n_spots() const { return static_cast<std::size_t>(coords.rows()); }
  std::size_t n_genes() const { return static_cast<std::size_t>(expr.cols()); }
  std::size_t visual_dim() const { return static_cast<std::size_t>(visual.cols()); }

  // Throws ContractError on any broken invariant (N ≥ 2, consistent shapes,
  // finite values, unique gene names, no duplicate coordinates).
  void validate() const;
};

// Dense N×N×C pairwise condition tensor, row-major with channels innermost.
struct EdgeCondition {
  std::size_t n = 0;
  std::size_t channels = 0;
  std::vector<double> w;

  double at(std::size_t i, std::size_t j, std::size_t c) const { return w[(i * n + j) * channels + c]; }
  double& at(std::size_t i, std::size_t j, std::size_t c) { return w[(i * n + j) * channels + c]; }
  Eigen::MatrixXd channel(std::size_t c) const;

  static EdgeCondition from_channels(const std::vector<Eigen::MatrixXd>& chans);
};

struct SpatialWeightGraph {
  Eigen::MatrixXd W;  // symmetric 0/1, zero diagonal
  std::size_t k = 0;

  double s0() const { return W.sum(); }
};

inline constexpr double kDefaultLengthScale = 224.0;
inline constexpr std::size_t kDefaultNeighbors = 8;

// Channel 0: exp(−‖u_i−u_j‖²/(2σ²)). Channel 1: cosine similarity of visual rows
// (0 off-diagonal for a zero row, 1 on the diagonal).
EdgeCondition build_edge_condition(const SlideSample& sample, double sigma = kDefaultLengthScale);

Eigen::MatrixXd distance_kernel(const Eigen::MatrixXd& coords, double sigma);
Eigen::MatrixXd cosine_similarity(const Eigen::MatrixXd& features);

// W_ij = 1 iff j ∈ N_k(i) or i ∈ N_k(j). Distance ties go to the lower index.
SpatialWeightGraph build_knn_graph(const Eigen::MatrixXd& coords, std::size_t k = kDefaultNeighbors);

}  // namespace flag
