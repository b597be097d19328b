#include "flag/joint_diffusion.hpp"

#include <cmath>

#include "flag/errors.hpp"

namespace flag::joint {

using model::input_scale;

namespace {

// [B,1,1] constant holding one value per batch element.
Var per_batch(const std::vector<double>& v) { return Var::constant({v.size(), 1, 1}, v); }

Var offdiag_mask(std::size_t n) {
  std::vector<double> m(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 0.0;
  return Var::constant({1, n, n}, std::move(m));
}

std::vector<double> sigmas(const sde::NoiseSchedule& s, const std::vector<double>& t) {
  std::vector<double> out;
  for (double ti : t) out.push_back(s.sigma(ti));
  return out;
}

std::vector<double> scales(const sde::NoiseSchedule& s, const std::vector<double>& t) {
  std::vector<double> out;
  for (double ti : t) out.push_back(input_scale(s, ti));
  return out;
}

Matrix draw_prior(Rng& rng, Eigen::Index r, Eigen::Index c, double sigma_max) {
  return sigma_max * rng.normal_matrix(r, c);
}

}  // namespace

Matrix empirical_correlation(const Matrix& x, double eps) {
  if (x.rows() < 2 || x.cols() < 2) throw ContractError("empirical_correlation: need N >= 2 and G >= 2");
  const Matrix xc = x.colwise() - x.rowwise().mean();
  const Eigen::VectorXd nrm = xc.rowwise().norm();
  Matrix den = nrm * nrm.transpose();
  den = (den.array() < eps).select(den.array() + eps, den.array()).matrix();
  return ((xc * xc.transpose()).array() / den.array()).matrix();
}

Var empirical_correlation(const Var& x, double eps) {
  if (x.rank() != 3 || x.dim(1) < 2 || x.dim(2) < 2)
    throw ContractError("empirical_correlation: expected [B,N,G] with N,G >= 2");
  Var xc = ad::sub(x, ad::mean_last(x));
  Var num = ad::bmm(xc, ad::transpose_last2(xc));
  Var nrm = ad::sqrt(ad::sum_last(ad::square(xc)));  // [B,N,1]
  Var prod = ad::bmm(nrm, ad::transpose_last2(nrm));
  std::vector<double> guard(prod.size());
  for (std::size_t i = 0; i < guard.size(); ++i) guard[i] = prod.data()[i] < eps ? eps : 0.0;
  return ad::div(num, ad::add(prod, Var::constant(prod.shape(), std::move(guard))));
}

double offdiag_l1(const Matrix& a_hat, const Matrix& p) {
  const Eigen::Index n = a_hat.rows();
  if (n < 2 || a_hat.cols() != n || p.rows() != n || p.cols() != n)
    throw ContractError("consistency: need matching square matrices with N >= 2");
  double acc = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) acc += std::abs(a_hat(i, j) - p(i, j));
  return acc / static_cast<double>(n * (n - 1));
}

double graph_score_loss(const Matrix& score_x, const Matrix& score_a, const Matrix& xt, const Matrix& at,
                        const Matrix& x0, const Matrix& a0, double t, const sde::NoiseSchedule& s,
                        bool include_edges) {
  if (score_x.rows() != xt.rows() || score_x.cols() != xt.cols() || x0.rows() != xt.rows() ||
      x0.cols() != xt.cols())
    throw ContractError("graph_score_loss: node shapes differ");
  const double sg = s.sigma(t);
  if (!score_x.allFinite() || (include_edges && !score_a.allFinite()))
    throw NumericError("graph_score_loss: non-finite model output");
  double loss = ((xt - x0) / sg + sg * score_x).squaredNorm() / static_cast<double>(xt.size());
  if (include_edges) {
    if (score_a.rows() != at.rows() || score_a.cols() != at.cols() || a0.rows() != at.rows() ||
        a0.cols() != at.cols())
      throw ContractError("graph_score_loss: edge shapes differ");
    loss += ((at - a0) / sg + sg * score_a).squaredNorm() / static_cast<double>(at.size());
  }
  return loss;
}

double consistency_loss(const Matrix& xt, const Matrix& at, const Matrix& score_x, const Matrix& score_a, double t,
                        const sde::NoiseSchedule& s, double eps) {
  if (at.rows() < 2) throw ContractError("consistency_loss: N must be >= 2");
  const Matrix x_hat = sde::tweedie_denoise(xt, score_x, t, s);
  const Matrix a_hat = sde::tweedie_denoise(at, score_a, t, s);
  return offdiag_l1(a_hat, empirical_correlation(x_hat, eps));
}

JointBatch make_joint_batch(const std::vector<TrainSlide>& slides, std::size_t batch, Rng& rng, double corr_eps) {
  const model::BatchPlan plan = model::plan_batch(slides.size(), batch, rng);
  JointBatch b;
  for (std::size_t i = 0; i < batch; ++i) {
    const TrainSlide& s = slides[plan.slide[i]];
    b.cond.push_back(&s.cond);
    b.x0.push_back(s.x0);
    b.a0.push_back(empirical_correlation(s.x0, corr_eps));
    b.t.push_back(plan.t[i]);
    b.zx.push_back(rng.normal_matrix(s.x0.rows(), s.x0.cols()));
    b.za.push_back(rng.normal_matrix(s.x0.rows(), s.x0.rows()));
  }
  return b;
}

// ------------------------------------------------------------------ JointModel

JointModel::JointModel(const JointConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), sched_(cfg.sigma_min, cfg.sigma_max) {
  if (cfg_.lambda_c < 0) throw ContractError("lambda_c must be >= 0");
  cfg_.backbone.dynamic = true;
  cfg_.backbone.edge_in = 1;
  Rng rng(derive_seed(seed, 0x101));
  net_ = model::GraphTransformer(ps_, "backbone", cfg_.backbone, rng);
}

JointModel::Prediction JointModel::predict(const Var& xt, const Var& at, const Var& cv, const Var& ce,
                                           const std::vector<double>& t) const {
  if (at.rank() != 3) throw ContractError("predict: at must be [B,N,N]");
  const Var cin = per_batch(scales(sched_, t));
  const std::size_t b = at.dim(0), n = at.dim(1);
  Var a4 = ad::reshape(ad::mul(at, cin), {b, n, n, 1});
  auto out = net_.forward_dynamic(ad::mul(xt, cin), a4, cv, ce, t);
  return {out.node_out, out.edge_out};
}

std::pair<Matrix, Matrix> JointModel::scores(const Matrix& xt, const Matrix& at, const SlideCondition& c,
                                             double t) const {
  const std::vector<const SlideCondition*> conds{&c};
  auto p = predict(model::tile(xt, 1), model::tile(at, 1), model::stack_visual(conds), model::stack_edges(conds), {t});
  const double sg = sched_.sigma(t);
  return {-model::unstack(p.eps_x, 0) / sg, -model::unstack(p.eps_a, 0) / sg};
}

JointModel::Losses JointModel::losses(const JointBatch& b, double lambda_c) const {
  const std::size_t bs = b.t.size();
  if (bs == 0) throw ContractError("losses: empty batch");
  const std::size_t n = static_cast<std::size_t>(b.x0[0].rows());
  const std::vector<double> sg = sigmas(sched_, b.t);
  const Var sig = per_batch(sg);

  Var x0 = model::stack(b.x0), a0 = model::stack(b.a0);
  Var zx = model::stack(b.zx), za = model::stack(b.za);
  Var xt = ad::add(x0, ad::mul(sig, zx));
  Var at = ad::add(a0, ad::mul(sig, za));

  Prediction p = predict(xt, at, model::stack_visual(b.cond), model::stack_edges(b.cond), b.t);
  Var l_graph = ad::add(ad::mean_all(ad::square(ad::sub(zx, p.eps_x))), ad::mean_all(ad::square(ad::sub(za, p.eps_a))));

  // Tweedie: x̂₀ = x_t + σ²·s = x_t − σ·ε̂
  Var x_hat = ad::sub(xt, ad::mul(sig, p.eps_x));
  Var a_hat = ad::sub(at, ad::mul(sig, p.eps_a));
  Var diff = ad::mul(ad::abs(ad::sub(a_hat, empirical_correlation(x_hat, cfg_.corr_eps))), offdiag_mask(n));
  Var l_cons = ad::mul_scalar(ad::sum_all(diff), 1.0 / static_cast<double>(bs * n * (n - 1)));

  Var total = lambda_c == 0.0 ? l_graph : ad::add(l_graph, ad::mul_scalar(l_cons, lambda_c));
  return {total, l_graph, l_cons};
}

JointLossReport joint_train_step(JointModel& m, const JointBatch& batch, double lambda_c, nn::AdamW& opt) {
  if (lambda_c < 0) throw ContractError("lambda_c must be >= 0");
  nn::ParamStore& ps = m.params();
  ps.zero_grad();
  auto l = m.losses(batch, lambda_c);
  ad::backward(l.total);
  JointLossReport r;
  r.l_graph = l.l_graph.item();
  r.l_cons = l.l_cons.item();
  r.lambda_c = lambda_c;
  r.total = l.total.item();
  model::check_finite_step(r.total, ps, static_cast<long>(opt.steps()));
  r.grad_norm = opt.step(ps);
  return r;
}

model::StepReport JointModel::train_step(const std::vector<TrainSlide>& slides, nn::AdamW& opt, Rng& rng) {
  JointBatch b = make_joint_batch(slides, cfg_.batch, rng, cfg_.corr_eps);
  JointLossReport r = joint_train_step(*this, b, cfg_.lambda_c, opt);
  return {r.total, {{"l_graph", r.l_graph}, {"l_cons", r.l_cons}}, r.grad_norm};
}

GraphState joint_sample(const JointModel& m, const SlideCondition& cond, int steps, std::uint64_t seed) {
  if (steps < 1) throw ContractError("joint_sample: steps must be >= 1");
  ad::NoGradGuard no_grad;
  const auto n = static_cast<Eigen::Index>(cond.n());
  const auto g = static_cast<Eigen::Index>(m.config().backbone.node_in);
  Rng rng(seed);
  const double smax = m.schedule().sigma_max();
  Matrix state(n, g + n);
  state.leftCols(g) = draw_prior(rng, n, g, smax);
  state.rightCols(n) = draw_prior(rng, n, n, smax);

  auto score_fn = [&](const Matrix& x, double t) -> Matrix {
    auto [sx, sa] = m.scores(x.leftCols(g), x.rightCols(n), cond, t);
    Matrix out(n, g + n);
    out.leftCols(g) = sx;
    out.rightCols(n) = sa;
    return out;
  };
  Matrix res = sde::heun_integrate(state, score_fn, m.schedule(), steps);

  GraphState gs;
  gs.x = res.leftCols(g);
  Matrix a = res.rightCols(n);
  gs.asymmetry = (a - a.transpose()).norm();
  gs.a = 0.5 * (a + a.transpose());
  gs.a.diagonal().setOnes();
  return gs;
}

Matrix JointModel::sample(const SlideCondition& cond, int steps, std::uint64_t seed) const {
  return joint_sample(*this, cond, steps, seed).x;
}

// ---------------------------------------------------------------- NodeOnlyModel

NodeOnlyModel::NodeOnlyModel(const NodeOnlyConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), sched_(cfg.sigma_min, cfg.sigma_max) {
  cfg_.backbone.dynamic = false;
  if (cfg_.backbone.node_in == 0) throw ContractError("node-only model needs node_in = G");
  Rng rng(derive_seed(seed, 0x202));
  net_ = model::GraphTransformer(ps_, "backbone", cfg_.backbone, rng);
  head_ = nn::Linear(ps_, "head", cfg_.backbone.hidden, cfg_.backbone.node_in, rng);
}

Var NodeOnlyModel::predict(const Var& xt, const Var& cv, const Var& ce, const std::vector<double>& t) const {
  Var h = net_.forward_static(ad::mul(xt, per_batch(scales(sched_, t))), ce, cv, t);
  return head_(ad::layer_norm_last(h, cfg_.backbone.ln_eps));
}

model::StepReport NodeOnlyModel::train_step(const std::vector<TrainSlide>& slides, nn::AdamW& opt, Rng& rng) {
  const model::BatchPlan plan = model::plan_batch(slides.size(), cfg_.batch, rng);
  std::vector<const SlideCondition*> conds;
  std::vector<Matrix> x0, z;
  for (std::size_t i = 0; i < cfg_.batch; ++i) {
    const TrainSlide& s = slides[plan.slide[i]];
    conds.push_back(&s.cond);
    x0.push_back(s.x0);
    z.push_back(rng.normal_matrix(s.x0.rows(), s.x0.cols()));
  }
  Var zv = model::stack(z);
  Var xt = ad::add(model::stack(x0), ad::mul(per_batch(sigmas(sched_, plan.t)), zv));
  ps_.zero_grad();
  Var loss = ad::mean_all(ad::square(ad::sub(zv, predict(xt, model::stack_visual(conds), model::stack_edges(conds), plan.t))));
  ad::backward(loss);
  const double l = loss.item();
  model::check_finite_step(l, ps_, static_cast<long>(opt.steps()));
  const double gn = opt.step(ps_);
  return {l, {{"l_diff", l}}, gn};
}

Matrix NodeOnlyModel::sample(const SlideCondition& cond, int steps, std::uint64_t seed) const {
  if (steps < 1) throw ContractError("sample: steps must be >= 1");
  ad::NoGradGuard no_grad;
  const auto n = static_cast<Eigen::Index>(cond.n());
  const auto g = static_cast<Eigen::Index>(cfg_.backbone.node_in);
  Rng rng(seed);
  const std::vector<const SlideCondition*> conds{&cond};
  const Var cv = model::stack_visual(conds), ce = model::stack_edges(conds);
  auto score_fn = [&](const Matrix& x, double t) -> Matrix {
    Var eps = predict(model::tile(x, 1), cv, ce, {t});
    return -model::unstack(eps, 0) / sched_.sigma(t);
  };
  return sde::heun_integrate(draw_prior(rng, n, g, sched_.sigma_max()), score_fn, sched_, steps);
}

}  // namespace flag::joint
