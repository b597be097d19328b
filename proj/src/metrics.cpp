#include "flag/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "flag/errors.hpp"

namespace flag::metrics {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_pair(const Matrix& pred, const Matrix& gt, const char* what) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw ContractError(std::string(what) + ": prediction and ground truth shapes differ");
  if (pred.rows() < 2) throw ContractError(std::string(what) + ": need at least 2 spots");
}

// Centered sum of squares below this (relative to the data scale) counts as zero variance.
bool degenerate(const Vector& centered, const Vector& raw) {
  const double scale = std::max(1.0, raw.cwiseAbs().maxCoeff());
  return centered.squaredNorm() <= 1e-24 * static_cast<double>(raw.size()) * scale * scale;
}

}  // namespace

double pearson(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ContractError("pearson: length mismatch");
  if (a.size() < 2) throw UndefinedError("pearson: need at least 2 values");
  const Vector ca = a.array() - a.mean();
  const Vector cb = b.array() - b.mean();
  if (degenerate(ca, a) || degenerate(cb, b)) throw UndefinedError("pearson: zero variance");
  return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

PccResult pcc_mse(const Matrix& pred, const Matrix& gt) {
  check_pair(pred, gt, "pcc_mse");
  PccResult r;
  r.per_gene = Vector::Constant(gt.cols(), kNaN);
  double sum = 0;
  std::size_t used = 0;
  for (Eigen::Index g = 0; g < gt.cols(); ++g) {
    try {
      r.per_gene(g) = pearson(pred.col(g), gt.col(g));
      sum += r.per_gene(g);
      ++used;
    } catch (const UndefinedError&) {
      r.excluded_genes.push_back(static_cast<std::size_t>(g));
    }
  }
  if (used == 0) throw UndefinedError("pcc undefined: every gene has zero variance");
  r.pcc = sum / static_cast<double>(used);
  r.mse = (pred - gt).squaredNorm() / static_cast<double>(gt.size());
  return r;
}

Vector per_spot_pcc(const Matrix& pred, const Matrix& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw ContractError("per_spot_pcc: shape mismatch");
  Vector out(gt.rows());
  for (Eigen::Index i = 0; i < gt.rows(); ++i) {
    try {
      out(i) = pearson(pred.row(i).transpose(), gt.row(i).transpose());
    } catch (const UndefinedError&) {
      out(i) = kNaN;
    }
  }
  return out;
}

Matrix gene_corr_matrix(const Matrix& x, double eps) {
  const auto n = x.rows();
  if (n < 2) throw ContractError("gene_corr_matrix: need at least 2 spots");
  const Eigen::RowVectorXd mu = x.colwise().mean();
  Matrix xs = x.rowwise() - mu;
  for (Eigen::Index g = 0; g < x.cols(); ++g) {
    const double sd = std::sqrt(xs.col(g).squaredNorm() / static_cast<double>(n - 1));
    xs.col(g) /= std::max(sd, eps);
  }
  return (xs.transpose() * xs) / static_cast<double>(n - 1);
}

double gsc(const Matrix& pred, const Matrix& gt) {
  check_pair(pred, gt, "gsc");
  const auto g = gt.cols();
  if (g < 3) throw ContractError("gsc needs at least 3 genes (upper triangle too short for a correlation)");
  const Matrix cp = gene_corr_matrix(pred), cg = gene_corr_matrix(gt);
  const Eigen::Index m = g * (g - 1) / 2;
  Vector vp(m), vg(m);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < g; ++i)
    for (Eigen::Index j = i + 1; j < g; ++j, ++k) {
      vp(k) = cp(i, j);
      vg(k) = cg(i, j);
    }
  return pearson(vp, vg);
}

double morans_i(const Vector& x, const SpatialWeightGraph& w) {
  const auto n = x.size();
  if (w.W.rows() != n || w.W.cols() != n) throw ContractError("morans_i: weight matrix does not match vector length");
  const double s0 = w.s0();
  if (!(s0 > 0)) throw UndefinedError("morans_i: weight matrix has no edges");
  const Vector z = x.array() - x.mean();
  if (degenerate(z, x)) throw UndefinedError("morans_i: constant input");
  return (static_cast<double>(n) / s0) * (z.dot(w.W * z) / z.squaredNorm());
}

SscResult ssc(const Matrix& pred, const Matrix& gt, const SpatialWeightGraph& w) {
  check_pair(pred, gt, "ssc");
  SscResult r;
  const auto g = gt.cols();
  r.morans_gt = Vector::Constant(g, kNaN);
  r.morans_pred = Vector::Constant(g, kNaN);
  std::vector<double> a, b;
  for (Eigen::Index j = 0; j < g; ++j) {
    bool ok = true;
    try {
      r.morans_gt(j) = morans_i(gt.col(j), w);
    } catch (const UndefinedError&) {
      ok = false;
    }
    try {
      r.morans_pred(j) = morans_i(pred.col(j), w);
    } catch (const UndefinedError&) {
      ok = false;
    }
    if (ok) {
      a.push_back(r.morans_gt(j));
      b.push_back(r.morans_pred(j));
    } else {
      r.excluded_genes.push_back(static_cast<std::size_t>(j));
    }
  }
  if (a.size() < 3) throw ContractError("ssc needs at least 3 genes with defined Moran's I");
  r.ssc = pearson(Eigen::Map<Vector>(a.data(), static_cast<Eigen::Index>(a.size())),
                  Eigen::Map<Vector>(b.data(), static_cast<Eigen::Index>(b.size())));
  return r;
}

SscResult ssc(const Matrix& pred, const Matrix& gt, const Matrix& coords, std::size_t k) {
  return ssc(pred, gt, build_knn_graph(coords, k));
}

namespace {

// Midranks (1-based) of the pooled sample and the tie-correction term Σ(t³−t).
std::vector<double> midranks(const std::vector<double>& pooled, double& tie_term) {
  const std::size_t n = pooled.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pooled[a] < pooled[b]; });
  std::vector<double> ranks(n);
  tie_term = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  return ranks;
}

// P(sum of a random size-m subset of `doubled` ≥ target), doubled ranks are integers.
double exact_upper_tail(const std::vector<long>& doubled, std::size_t m, long target) {
  const long total = std::accumulate(doubled.begin(), doubled.end(), 0L);
  // counts[k][s]: number of size-k subsets with sum s
  std::vector<std::vector<double>> counts(m + 1, std::vector<double>(static_cast<std::size_t>(total) + 1, 0.0));
  counts[0][0] = 1.0;
  for (long r : doubled)
    for (std::size_t k = std::min<std::size_t>(m, doubled.size()); k-- > 0;)
      for (long s = total - r; s >= 0; --s)
        if (counts[k][static_cast<std::size_t>(s)] != 0.0)
          counts[k + 1][static_cast<std::size_t>(s + r)] += counts[k][static_cast<std::size_t>(s)];
  double all = 0, upper = 0;
  for (long s = 0; s <= total; ++s) {
    const double c = counts[m][static_cast<std::size_t>(s)];
    all += c;
    if (s >= target) upper += c;
  }
  return upper / all;
}

}  // namespace

RankSumResult rank_sum_test(const std::vector<double>& in_group, const std::vector<double>& out_group) {
  const std::size_t n1 = in_group.size(), n2 = out_group.size();
  if (n1 == 0 || n2 == 0) throw ContractError("rank_sum_test: both groups must be non-empty");
  std::vector<double> pooled(in_group);
  pooled.insert(pooled.end(), out_group.begin(), out_group.end());
  double tie_term = 0;
  const std::vector<double> ranks = midranks(pooled, tie_term);
  const double r1 = std::accumulate(ranks.begin(), ranks.begin() + static_cast<std::ptrdiff_t>(n1), 0.0);
  RankSumResult res;
  const double dn1 = static_cast<double>(n1), dn2 = static_cast<double>(n2), n = dn1 + dn2;
  res.u = r1 - dn1 * (dn1 + 1) / 2;
  const double var = dn1 * dn2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)));
  res.z = var > 0 ? (res.u - dn1 * dn2 / 2) / std::sqrt(var) : 0.0;
  if (n1 < 8 || n2 < 8) {
    res.exact = true;
    std::vector<long> doubled(ranks.size());
    for (std::size_t i = 0; i < ranks.size(); ++i) doubled[i] = std::lround(2 * ranks[i]);
    res.p_upper = exact_upper_tail(doubled, n1, std::lround(2 * r1));
  } else {
    res.p_upper = 0.5 * std::erfc(res.z / std::sqrt(2.0));
  }
  return res;
}

std::vector<std::size_t> rank_genes_for_domain(const Matrix& expr, const std::vector<int>& labels, int domain) {
  if (labels.size() != static_cast<std::size_t>(expr.rows())) throw ContractError("domain labels must match spot count");
  struct Key {
    double primary, u;
    std::size_t gene;
  };
  std::vector<Key> keys;
  for (Eigen::Index g = 0; g < expr.cols(); ++g) {
    std::vector<double> in, out;
    for (Eigen::Index i = 0; i < expr.rows(); ++i)
      (labels[static_cast<std::size_t>(i)] == domain ? in : out).push_back(expr(i, g));
    const RankSumResult r = rank_sum_test(in, out);
    // larger primary = stronger up-regulation in the domain
    keys.push_back({r.exact ? -r.p_upper : r.z, r.u, static_cast<std::size_t>(g)});
  }
  std::sort(keys.begin(), keys.end(), [](const Key& a, const Key& b) {
    if (a.primary != b.primary) return a.primary > b.primary;
    if (a.u != b.u) return a.u > b.u;
    return a.gene < b.gene;
  });
  std::vector<std::size_t> order;
  for (const Key& k : keys) order.push_back(k.gene);
  return order;
}

double deg_overlap(const Matrix& pred, const Matrix& gt, const std::vector<int>& labels, std::size_t top_k) {
  check_pair(pred, gt, "deg_overlap");
  if (labels.size() != static_cast<std::size_t>(gt.rows())) throw ContractError("domain labels must match spot count");
  if (top_k == 0 || top_k > static_cast<std::size_t>(gt.cols())) throw ContractError("deg_overlap: top_k out of range");
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw ContractError("deg_overlap needs at least 2 domains");
  for (const auto& [d, cnt] : sizes)
    if (cnt < 2) throw ContractError("domain " + std::to_string(d) + " has fewer than 2 spots");
  double acc = 0;
  for (const auto& [d, cnt] : sizes) {
    const auto rg = rank_genes_for_domain(gt, labels, d);
    const auto rp = rank_genes_for_domain(pred, labels, d);
    std::set<std::size_t> top(rg.begin(), rg.begin() + static_cast<std::ptrdiff_t>(top_k));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < top_k; ++i) hit += top.count(rp[i]);
    acc += static_cast<double>(hit) / static_cast<double>(top_k);
  }
  return acc / static_cast<double>(sizes.size());
}

MetricsReport evaluate(const Matrix& pred, const Matrix& gt, const Matrix& coords, const EvaluateOptions& opts) {
  MetricsReport rep;
  const PccResult p = pcc_mse(pred, gt);
  rep.pcc = p.pcc;
  rep.mse = p.mse;
  rep.per_gene_pcc = p.per_gene;
  rep.pcc_excluded = p.excluded_genes;
  const Vector spot = per_spot_pcc(pred, gt);
  double s = 0;
  int cnt = 0;
  for (Eigen::Index i = 0; i < spot.size(); ++i)
    if (std::isfinite(spot(i))) {
      s += spot(i);
      ++cnt;
    }
  rep.per_spot_pcc_mean = cnt ? s / cnt : kNaN;
  rep.gsc = gsc(pred, gt);
  const SscResult sr = ssc(pred, gt, coords, opts.k);
  rep.ssc = sr.ssc;
  rep.morans_gt = sr.morans_gt;
  rep.morans_pred = sr.morans_pred;
  rep.ssc_excluded = sr.excluded_genes;
  if (!opts.domain_labels.empty())
    for (std::size_t k : opts.deg_top_k)
      if (k <= static_cast<std::size_t>(gt.cols())) rep.deg_overlap[k] = deg_overlap(pred, gt, opts.domain_labels, k);
  return rep;
}

namespace {
nlohmann::json vec_json(const Vector& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::isfinite(v(i)))
      a.push_back(v(i));
    else
      a.push_back(nullptr);
  }
  return a;
}

Vector json_vec(const nlohmann::json& a) {
  Vector v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].is_null() ? kNaN : a[i].get<double>();
  return v;
}

std::string num(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}
}  // namespace

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  if (!config_hash.empty()) os << "config_hash: " << config_hash << '\n' << "seed: " << seed << '\n';
  os << "pcc: " << num(pcc) << '\n'
     << "mse: " << num(mse) << '\n'
     << "gsc: " << num(gsc) << '\n'
     << "ssc: " << num(ssc) << '\n'
     << "per_spot_pcc_mean: " << num(per_spot_pcc_mean) << '\n';
  for (const auto& [k, v] : deg_overlap) os << "deg_overlap_top" << k << ": " << num(v) << '\n';
  os << "pcc_excluded: " << nlohmann::json(pcc_excluded).dump() << '\n';
  os << "ssc_excluded: " << nlohmann::json(ssc_excluded).dump() << '\n';
  os << "per_gene_pcc: " << vec_json(per_gene_pcc).dump() << '\n';
  os << "morans_gt: " << vec_json(morans_gt).dump() << '\n';
  os << "morans_pred: " << vec_json(morans_pred).dump() << '\n';
  return os.str();
}

MetricsReport MetricsReport::from_text(const std::string& text) {
  MetricsReport r;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw ParseError(line, "expected 'key: value'");
    const std::string key = line.substr(0, colon);
    const std::string val = line.substr(colon + 1);
    try {
      if (key == "config_hash") r.config_hash = val.substr(val.find_first_not_of(' '));
      else if (key == "seed") r.seed = std::stoull(val);
      else if (key == "pcc") r.pcc = std::stod(val);
      else if (key == "mse") r.mse = std::stod(val);
      else if (key == "gsc") r.gsc = std::stod(val);
      else if (key == "ssc") r.ssc = std::stod(val);
      else if (key == "per_spot_pcc_mean") r.per_spot_pcc_mean = std::stod(val);
      else if (key.rfind("deg_overlap_top", 0) == 0) r.deg_overlap[std::stoul(key.substr(15))] = std::stod(val);
      else if (key == "pcc_excluded") r.pcc_excluded = nlohmann::json::parse(val).get<std::vector<std::size_t>>();
      else if (key == "ssc_excluded") r.ssc_excluded = nlohmann::json::parse(val).get<std::vector<std::size_t>>();
      else if (key == "per_gene_pcc") r.per_gene_pcc = json_vec(nlohmann::json::parse(val));
      else if (key == "morans_gt") r.morans_gt = json_vec(nlohmann::json::parse(val));
      else if (key == "morans_pred") r.morans_pred = json_vec(nlohmann::json::parse(val));
      else throw ParseError(key, "unknown metrics key");
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(key, e.what());
    }
  }
  return r;
}

}  // namespace flag::metrics
