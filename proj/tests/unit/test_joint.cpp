#include <doctest.h>

#include <cmath>

#include "flag/data.hpp"
#include "flag/errors.hpp"
#include "flag/joint_diffusion.hpp"
#include "../support/gradcheck.hpp"

using namespace flag;
using namespace flag::joint;
using namespace flag::testing;

namespace {

double pearson_loop(const Matrix& x, Eigen::Index i, Eigen::Index j) {
  const Eigen::Index g = x.cols();
  double mi = 0, mj = 0;
  for (Eigen::Index k = 0; k < g; ++k) {
    mi += x(i, k) / static_cast<double>(g);
    mj += x(j, k) / static_cast<double>(g);
  }
  double num = 0, di = 0, dj = 0;
  for (Eigen::Index k = 0; k < g; ++k) {
    num += (x(i, k) - mi) * (x(j, k) - mj);
    di += (x(i, k) - mi) * (x(i, k) - mi);
    dj += (x(j, k) - mj) * (x(j, k) - mj);
  }
  return num / std::sqrt(di * dj);
}

double l1_loop(const Matrix& a, const Matrix& p) {
  const Eigen::Index n = a.rows();
  double acc = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) acc += std::abs(a(i, j) - p(i, j));
  return acc / static_cast<double>(n * (n - 1));
}

std::vector<model::TrainSlide> toy_slides(std::size_t count, std::size_t n, std::size_t g, std::size_t dv) {
  std::vector<model::TrainSlide> out;
  for (std::size_t i = 0; i < count; ++i) {
    data::SyntheticSpec spec;
    spec.n_spots = n;
    spec.n_genes = g;
    spec.visual_dim = dv;
    spec.seed = 100 + i;
    auto s = data::synth_slide(spec);
    out.push_back({model::SlideCondition::from_sample(s.sample), s.sample.expr});
  }
  return out;
}

JointConfig toy_config(std::size_t g, std::size_t dv) {
  JointConfig c;
  c.backbone.node_in = g;
  c.backbone.hidden = 8;
  c.backbone.layers = 1;
  c.backbone.heads = 2;
  c.backbone.cond_dim = dv;
  c.backbone.edge_hidden = 4;
  c.batch = 2;
  return c;
}

}  // namespace

TEST_CASE("empirical correlation") {
  Rng rng(1);
  SUBCASE("loop oracle") {
    Matrix x = rng.normal_matrix(3, 4);
    Matrix c = empirical_correlation(x);
    for (Eigen::Index i = 0; i < 3; ++i)
      for (Eigen::Index j = 0; j < 3; ++j) CHECK(std::abs(c(i, j) - pearson_loop(x, i, j)) < 1e-10);
    Var cv = empirical_correlation(model::tile(x, 2));
    CHECK((model::unstack(cv, 1) - c).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("perfect (anti)correlation") {
    Matrix x = rng.normal_matrix(3, 5);
    x.row(1) = x.row(0);
    x.row(2) = -x.row(0);
    Matrix c = empirical_correlation(x);
    CHECK(c(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(c(0, 2) == doctest::Approx(-1.0).epsilon(1e-12));
  }
  SUBCASE("symmetric, bounded, permutation covariant") {
    Matrix x = rng.normal_matrix(6, 7);
    Matrix c = empirical_correlation(x);
    CHECK((c - c.transpose()).norm() < 1e-14);
    CHECK(c.cwiseAbs().maxCoeff() <= 1.0 + 1e-6);
    auto perm = rng.permutation(6);
    Matrix px(6, 7), expect(6, 6);
    for (Eigen::Index i = 0; i < 6; ++i) px.row(i) = x.row(static_cast<Eigen::Index>(perm[i]));
    for (Eigen::Index i = 0; i < 6; ++i)
      for (Eigen::Index j = 0; j < 6; ++j)
        expect(i, j) = c(static_cast<Eigen::Index>(perm[i]), static_cast<Eigen::Index>(perm[j]));
    CHECK((empirical_correlation(px) - expect).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("zero-variance spot stays finite") {
    Matrix x = rng.normal_matrix(3, 4);
    x.row(1).setConstant(2.0);
    CHECK(empirical_correlation(x).allFinite());
  }
  SUBCASE("contract") {
    CHECK_THROWS_AS(empirical_correlation(Matrix(3, 1)), ContractError);
    CHECK_THROWS_AS(empirical_correlation(Matrix(1, 4)), ContractError);
  }
  SUBCASE("gradient") {
    Var x = random_param({2, 4, 5}, rng);
    auto r = grad_check([&] { return probe_sum(empirical_correlation(x)); }, {{"x", x}}, 1e-5, 40);
    INFO(r.worst);
    CHECK(r.max_rel < 1e-6);
  }
}

TEST_CASE("graph score loss") {
  const sde::NoiseSchedule s;
  Rng rng(2);
  const double t = 0.4, sg = s.sigma(t);
  Matrix x0 = rng.normal_matrix(3, 4), a0 = rng.normal_matrix(3, 3);
  Matrix xt = x0 + sg * rng.normal_matrix(3, 4), at = a0 + sg * rng.normal_matrix(3, 3);
  Matrix sx = -(xt - x0) / (sg * sg), sa = -(at - a0) / (sg * sg);
  CHECK(graph_score_loss(sx, sa, xt, at, x0, a0, t, s) < 1e-24);

  SUBCASE("hand-evaluated unit instance") {
    const double t1 = std::log(100.0) / std::log(1000.0);  // σ(t1) = 1
    Matrix one = Matrix::Ones(1, 1), zero = Matrix::Zero(1, 1);
    CHECK(graph_score_loss(zero, zero, one, one, zero, zero, t1, s) == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("edge term masked") {
    Matrix bad_sa = Matrix::Zero(3, 3);
    Matrix zx = (xt - x0) / sg;
    const double node = graph_score_loss(0.5 * sx, bad_sa, xt, at, x0, a0, t, s, false);
    CHECK(node == doctest::Approx((zx + sg * 0.5 * sx).squaredNorm() / 12.0).epsilon(1e-12));
    CHECK(graph_score_loss(0.5 * sx, sa, xt, at, x0, a0, t, s) == doctest::Approx(node).epsilon(1e-12));
  }
  SUBCASE("non-finite output") {
    Matrix nan_sx = sx;
    nan_sx(0, 0) = std::nan("");
    CHECK_THROWS_AS(graph_score_loss(nan_sx, sa, xt, at, x0, a0, t, s), NumericError);
  }
}

TEST_CASE("consistency loss") {
  const sde::NoiseSchedule s;
  Rng rng(3);
  const double t = 0.3, sg2 = std::pow(s.sigma(t), 2);
  Matrix xt = rng.normal_matrix(5, 6), sx = rng.normal_matrix(5, 6);
  const Matrix p = empirical_correlation(xt + sg2 * sx);
  Matrix zero_sa = Matrix::Zero(5, 5);
  CHECK(consistency_loss(xt, p, sx, zero_sa, t, s) == 0.0);

  Matrix shifted = p.array() + 0.1;
  CHECK(consistency_loss(xt, shifted, sx, zero_sa, t, s) == doctest::Approx(0.1).epsilon(1e-12));

  Matrix at = rng.normal_matrix(5, 5), sa = rng.normal_matrix(5, 5);
  const double expect = l1_loop(at + sg2 * sa, p);
  CHECK(std::abs(consistency_loss(xt, at, sx, sa, t, s) - expect) < 1e-10);
  CHECK(consistency_loss(xt, at, sx, sa, t, s) > 0.0);
  CHECK_THROWS_AS(consistency_loss(xt.topRows(1), at.topLeftCorner(1, 1), sx.topRows(1), sa.topLeftCorner(1, 1), t, s),
                  ContractError);
}

TEST_CASE("joint model losses and training") {
  auto slides = toy_slides(2, 5, 4, 3);
  JointModel m(toy_config(4, 3), 7);
  Rng rng(8);
  JointBatch b = make_joint_batch(slides, 2, rng);

  SUBCASE("autodiff losses agree with the matrix definitions") {
    JointBatch one = b;
    one.cond.resize(1);
    one.x0.resize(1);
    one.a0.resize(1);
    one.zx.resize(1);
    one.za.resize(1);
    one.t.resize(1);
    auto l = m.losses(one, 1.0);
    const double sg = m.schedule().sigma(one.t[0]);
    const Matrix xt = one.x0[0] + sg * one.zx[0], at = one.a0[0] + sg * one.za[0];
    auto [sx, sa] = m.scores(xt, at, *one.cond[0], one.t[0]);
    CHECK(l.l_graph.item() ==
          doctest::Approx(graph_score_loss(sx, sa, xt, at, one.x0[0], one.a0[0], one.t[0], m.schedule())).epsilon(1e-10));
    CHECK(l.l_cons.item() == doctest::Approx(consistency_loss(xt, at, sx, sa, one.t[0], m.schedule())).epsilon(1e-10));
  }
  SUBCASE("report bookkeeping") {
    nn::AdamW opt;
    auto r = joint_train_step(m, b, 0.7, opt);
    CHECK(std::abs(r.total - (r.l_graph + 0.7 * r.l_cons)) < 1e-9);
    CHECK(r.lambda_c == 0.7);
    auto r0 = joint_train_step(m, b, 0.0, opt);
    CHECK(r0.total == r0.l_graph);
    CHECK_THROWS_AS(joint_train_step(m, b, -1.0, opt), ContractError);
  }
  SUBCASE("zero learning rate leaves weights") {
    const auto before = m.params().flat_values();
    nn::AdamWConfig oc;
    oc.lr = 0.0;
    nn::AdamW opt(oc);
    for (int i = 0; i < 3; ++i) m.train_step(slides, opt, rng);
    CHECK(m.params().flat_values() == before);
  }
  SUBCASE("end-to-end gradients") {
    JointModel small(toy_config(4, 3), 9);
    randomize_store(small.params(), 10, 0.3);
    auto r = grad_check([&] { return small.losses(b, 1.0).total; }, store_params(small.params()), 1e-5, 2, 7, 1e-5);
    INFO(r.worst);
    CHECK(r.max_rel < 1e-3);
  }
}

TEST_CASE("joint sampling") {
  auto slides = toy_slides(1, 5, 4, 3);
  JointModel m(toy_config(4, 3), 11);
  const auto& cond = slides[0].cond;
  GraphState gs = joint_sample(m, cond, 3, 12);
  CHECK(gs.x.rows() == 5);
  CHECK(gs.x.cols() == 4);
  CHECK(gs.a.rows() == 5);
  CHECK(gs.a.cols() == 5);
  CHECK((gs.a - gs.a.transpose()).norm() == 0.0);
  CHECK(gs.a.diagonal() == Eigen::VectorXd::Ones(5));
  GraphState again = joint_sample(m, cond, 3, 12);
  CHECK(again.x == gs.x);
  CHECK_THROWS_AS(joint_sample(m, cond, 0, 1), ContractError);

  SUBCASE("zero score returns the prior draw") {
    m.params().zero_values("backbone.node_head");
    m.params().zero_values("backbone.edge_head");
    GraphState z = joint_sample(m, cond, 4, 13);
    Rng rng(13);
    const Matrix px = 10.0 * rng.normal_matrix(5, 4);
    const Matrix pa = 10.0 * rng.normal_matrix(5, 5);
    CHECK(z.x == px);
    CHECK(z.asymmetry == doctest::Approx((pa - pa.transpose()).norm()).epsilon(1e-14));
    Matrix sym = 0.5 * (pa + pa.transpose());
    sym.diagonal().setOnes();
    CHECK(z.a == sym);
  }
}

TEST_CASE("node-only baseline") {
  auto slides = toy_slides(2, 5, 4, 3);
  NodeOnlyConfig c;
  c.backbone = toy_config(4, 3).backbone;
  c.batch = 2;
  NodeOnlyModel m(c, 3);
  CHECK(m.mode() == "node_only");
  CHECK_FALSE(m.params().contains("backbone.edge_embed.weight"));
  Rng rng(4);
  nn::AdamW opt;
  auto r = m.train_step(slides, opt, rng);
  CHECK(std::isfinite(r.total));
  Matrix x = m.sample(slides[0].cond, 2, 5);
  CHECK(x.rows() == 5);
  CHECK(x.cols() == 4);
  CHECK(x == m.sample(slides[0].cond, 2, 5));
}
