#include "flag/model_common.hpp"

#include <cmath>

#include "flag/errors.hpp"

namespace flag::model {

SlideCondition SlideCondition::from_sample(const SlideSample& s, double sigma) {
  return {s.visual, build_edge_condition(s, sigma)};
}

Var stack(const std::vector<Matrix>& mats) {
  if (mats.empty()) throw ContractError("stack: empty");
  const auto r = static_cast<std::size_t>(mats[0].rows()), c = static_cast<std::size_t>(mats[0].cols());
  std::vector<double> buf;
  buf.reserve(mats.size() * r * c);
  for (const Matrix& m : mats) {
    if (static_cast<std::size_t>(m.rows()) != r || static_cast<std::size_t>(m.cols()) != c)
      throw ContractError("stack: shape mismatch");
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) buf.push_back(m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
  }
  return Var::constant({mats.size(), r, c}, std::move(buf));
}

Var tile(const Matrix& m, std::size_t batch) { return stack(std::vector<Matrix>(batch, m)); }

Var stack_visual(const std::vector<const SlideCondition*>& conds) {
  std::vector<Matrix> mats;
  for (const auto* c : conds) mats.push_back(c->visual);
  return stack(mats);
}

Var stack_edges(const std::vector<const SlideCondition*>& conds) {
  if (conds.empty()) throw ContractError("stack_edges: empty");
  const std::size_t n = conds[0]->edges.n, ch = conds[0]->edges.channels;
  std::vector<double> buf;
  buf.reserve(conds.size() * n * n * ch);
  for (const auto* c : conds) {
    if (c->edges.n != n || c->edges.channels != ch) throw ContractError("stack_edges: shape mismatch");
    buf.insert(buf.end(), c->edges.w.begin(), c->edges.w.end());
  }
  return Var::constant({conds.size(), n, n, ch}, std::move(buf));
}

Matrix unstack(const Var& v, std::size_t b) {
  if (v.rank() != 3 || b >= v.dim(0)) throw ContractError("unstack: expected [B,R,C]");
  const std::size_t r = v.dim(1), c = v.dim(2);
  Matrix m(r, c);
  const double* p = v.data().data() + b * r * c;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = p[i * c + j];
  return m;
}

double input_scale(const sde::NoiseSchedule& s, double t) {
  const double sg = s.sigma(t);
  return 1.0 / std::sqrt(1.0 + sg * sg);
}

BatchPlan plan_batch(std::size_t n_slides, std::size_t batch, Rng& rng, double eps_t) {
  if (n_slides == 0 || batch == 0) throw ContractError("plan_batch: empty");
  BatchPlan p;
  for (std::size_t b = 0; b < batch; ++b) {
    p.slide.push_back(n_slides == 1 ? 0 : rng.index(n_slides));
    p.t.push_back(rng.uniform(eps_t, 1.0));
  }
  return p;
}

void check_finite_step(double loss, const nn::ParamStore& ps, long step) {
  if (!std::isfinite(loss)) throw NumericError("non-finite loss", step);
  if (!ps.grads_finite()) throw NumericError("non-finite gradient", step);
}

}  // namespace flag::model
