#include <doctest.h>

#include <cmath>

#include "flag/errors.hpp"
#include "flag/rng.hpp"
#include "flag/spatial_graph.hpp"

using namespace flag;
using Eigen::MatrixXd;

namespace {
SlideSample random_slide(std::size_t n, std::size_t dv, std::uint64_t seed) {
  Rng rng(seed);
  SlideSample s;
  s.coords = 300.0 * rng.normal_matrix(static_cast<Eigen::Index>(n), 2);
  s.visual = rng.normal_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dv));
  s.expr = MatrixXd::Zero(static_cast<Eigen::Index>(n), 1);
  s.gene_names = {"g"};
  s.slide_id = "r";
  return s;
}
}  // namespace

TEST_CASE("edge condition examples") {
  SlideSample s;
  s.coords = MatrixXd(3, 2);
  s.coords << 0, 0, 224, 0, 0, 50;
  s.visual = MatrixXd(3, 2);
  s.visual << 1, 2, 1, 2, 0, 0;
  EdgeCondition e = build_edge_condition(s, 224.0);
  CHECK(e.channels == 2);
  CHECK(e.at(0, 0, 0) == 1.0);
  CHECK(e.at(0, 1, 0) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
  CHECK(e.at(0, 1, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(e.at(0, 2, 1) == 0.0);  // zero visual row
  CHECK(e.at(2, 2, 1) == 1.0);
  s.coords(0, 0) = NAN;
  CHECK_THROWS_AS(build_edge_condition(s, 224.0), ContractError);
  CHECK_THROWS_AS(distance_kernel(MatrixXd::Zero(2, 2), 0.0), ContractError);
}

TEST_CASE("edge condition invariants") {
  SlideSample s = random_slide(7, 5, 3);
  EdgeCondition e = build_edge_condition(s);
  for (std::size_t c = 0; c < 2; ++c) {
    MatrixXd m = e.channel(c);
    CHECK((m - m.transpose()).norm() == 0.0);
    CHECK(m.diagonal().isOnes());
  }
  MatrixXd d = e.channel(0), v = e.channel(1);
  CHECK(d.minCoeff() > 0.0);
  CHECK(d.maxCoeff() <= 1.0);
  CHECK(v.maxCoeff() <= 1.0 + 1e-12);
  CHECK(v.minCoeff() >= -1.0 - 1e-12);

  SlideSample moved = s;
  moved.coords.rowwise() += Eigen::RowVector2d(1234.5, -77.0);
  CHECK((build_edge_condition(moved).channel(0) - d).cwiseAbs().maxCoeff() < 1e-12);

  SlideSample scaled = s;
  scaled.visual *= 3.7;
  CHECK((build_edge_condition(scaled).channel(1) - v).cwiseAbs().maxCoeff() < 1e-12);

  MatrixXd d2 = build_edge_condition(s, 448.0).channel(0);
  CHECK((d2 - d).minCoeff() >= 0.0);
}

TEST_CASE("knn graph examples") {
  MatrixXd c(4, 2);
  c << 0, 0, 1, 0, 3, 0, 10, 0;
  SpatialWeightGraph g = build_knn_graph(c, 1);
  MatrixXd expect = MatrixXd::Zero(4, 4);
  expect(0, 1) = expect(1, 0) = expect(1, 2) = expect(2, 1) = expect(2, 3) = expect(3, 2) = 1;
  CHECK(g.W == expect);
  CHECK(g.s0() == 6.0);

  SpatialWeightGraph full = build_knn_graph(c, 3);
  CHECK(full.W == MatrixXd::Ones(4, 4) - MatrixXd::Identity(4, 4));
  CHECK_THROWS_AS(build_knn_graph(c, 4), ContractError);
  CHECK_THROWS_AS(build_knn_graph(c, 0), ContractError);

  // equal distances: lower index wins
  MatrixXd t(3, 2);
  t << 0, 0, -1, 0, 1, 0;
  SpatialWeightGraph tg = build_knn_graph(t, 1);
  CHECK(tg.W(0, 1) == 1.0);
}

TEST_CASE("knn graph invariants") {
  Rng rng(11);
  MatrixXd c = 100.0 * rng.normal_matrix(20, 2);
  SpatialWeightGraph g = build_knn_graph(c, 4);
  CHECK((g.W - g.W.transpose()).norm() == 0.0);
  CHECK(g.W.diagonal().isZero());
  for (Eigen::Index i = 0; i < 20; ++i) CHECK(g.W.row(i).sum() >= 4.0);

  auto perm = rng.permutation(20);
  Eigen::PermutationMatrix<Eigen::Dynamic> p(20);
  for (int i = 0; i < 20; ++i) p.indices()(i) = static_cast<int>(perm[static_cast<std::size_t>(i)]);
  SpatialWeightGraph gp = build_knn_graph(p * c, 4);
  CHECK((gp.W - p * g.W * p.transpose()).norm() == 0.0);
}
