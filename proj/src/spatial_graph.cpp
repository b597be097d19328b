#include "flag/spatial_graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "flag/errors.hpp"

namespace flag {

void SlideSample::validate() const {
  const auto n = coords.rows();
  if (n < 2) throw ContractError("slide '" + slide_id + "' needs at least 2 spots");
  if (coords.cols() != 2) throw ContractError("coords must be N×2");
  if (visual.rows() != n) throw ContractError("visual row count differs from spot count");
  if (expr.rows() != n) throw ContractError("expr row count differs from spot count");
  if (static_cast<std::size_t>(expr.cols()) != gene_names.size())
    throw ContractError("expr width differs from gene_names length");
  if (!coords.allFinite() || !visual.allFinite() || !expr.allFinite())
    throw ContractError("slide '" + slide_id + "' contains non-finite values");
  std::set<std::string> uniq(gene_names.begin(), gene_names.end());
  if (uniq.size() != gene_names.size()) throw ContractError("gene names must be unique");
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      if ((coords.row(i) - coords.row(j)).norm() < 1e-9)
        throw ContractError("duplicate coordinates at spots " + std::to_string(i) + " and " + std::to_string(j));
}

Eigen::MatrixXd EdgeCondition::channel(std::size_t c) const {
  Eigen::MatrixXd m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(i, j) = at(i, j, c);
  return m;
}

EdgeCondition EdgeCondition::from_channels(const std::vector<Eigen::MatrixXd>& chans) {
  if (chans.empty()) throw ContractError("EdgeCondition needs at least one channel");
  EdgeCondition e;
  e.n = static_cast<std::size_t>(chans[0].rows());
  e.channels = chans.size();
  e.w.assign(e.n * e.n * e.channels, 0.0);
  for (std::size_t c = 0; c < chans.size(); ++c) {
    if (static_cast<std::size_t>(chans[c].rows()) != e.n || static_cast<std::size_t>(chans[c].cols()) != e.n)
      throw ContractError("edge channels must all be N×N");
    for (std::size_t i = 0; i < e.n; ++i)
      for (std::size_t j = 0; j < e.n; ++j) e.at(i, j, c) = chans[c](i, j);
  }
  return e;
}

Eigen::MatrixXd distance_kernel(const Eigen::MatrixXd& coords, double sigma) {
  if (!(sigma > 0)) throw ContractError("length scale must be positive");
  if (!coords.allFinite()) throw ContractError("coordinates contain NaN/Inf");
  const auto n = coords.rows();
  Eigen::MatrixXd k(n, n);
  const double denom = 2.0 * sigma * sigma;
  for (Eigen::Index i = 0; i < n; ++i) {
    k(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) k(i, j) = k(j, i) = std::exp(-(coords.row(i) - coords.row(j)).squaredNorm() / denom);
  }
  return k;
}

Eigen::MatrixXd cosine_similarity(const Eigen::MatrixXd& features) {
  if (!features.allFinite()) throw ContractError("visual features contain NaN/Inf");
  const auto n = features.rows();
  Eigen::VectorXd norms = features.rowwise().norm();
  Eigen::MatrixXd gram = features * features.transpose();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double d = norms(i) * norms(j);
      out(i, j) = out(j, i) = d > 0 ? gram(i, j) / d : 0.0;
    }
  }
  return out;
}

EdgeCondition build_edge_condition(const SlideSample& sample, double sigma) {
  if (sample.visual.rows() != sample.coords.rows()) throw ContractError("visual/coords row mismatch");
  return EdgeCondition::from_channels({distance_kernel(sample.coords, sigma), cosine_similarity(sample.visual)});
}

SpatialWeightGraph build_knn_graph(const Eigen::MatrixXd& coords, std::size_t k) {
  const auto n = static_cast<std::size_t>(coords.rows());
  if (k == 0 || k >= n) throw ContractError("k-NN graph needs 0 < k < N (k=" + std::to_string(k) + ", N=" + std::to_string(n) + ")");
  if (!coords.allFinite()) throw ContractError("coordinates contain NaN/Inf");
  SpatialWeightGraph g;
  g.k = k;
  g.W = Eigen::MatrixXd::Zero(n, n);
  std::vector<std::size_t> order(n);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) d2[j] = (coords.row(i) - coords.row(j)).squaredNorm();
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d2[a] < d2[b]; });
    std::size_t taken = 0;
    for (std::size_t idx : order) {
      if (idx == i) continue;
      g.W(i, idx) = g.W(idx, i) = 1.0;
      if (++taken == k) break;
    }
  }
  return g;
}

}  // namespace flag
