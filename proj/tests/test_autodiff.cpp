#include "doctest.h"

#include "gradcheck.hpp"
#include "styleeq/seqmodel.hpp"
#include "styleeq/style.hpp"

using namespace styleeq;
using styleeq::testing::max_gradient_error;
using styleeq::testing::project;
using ad::Graph;
using ad::Var;
using Inputs = std::vector<Var>;

namespace {

Matrix randn(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng = make_rng(seed, "test");
  return standard_normal<Real>(r, c, rng);
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("elementwise and structural ops") {
  const Matrix a = randn(3, 4, 1), b = randn(3, 4, 2), w = randn(3, 4, 3), col = randn(3, 1, 4);
  CHECK(max_gradient_error([&](Graph<Real>& g, const Inputs& x) { return project(g, ad::add(g, x[0], x[1]), w); },
                           {a, b}) < kTol);
  CHECK(max_gradient_error([&](Graph<Real>& g, const Inputs& x) { return project(g, ad::sub(g, x[0], x[1]), w); },
                           {a, b}) < kTol);
  CHECK(max_gradient_error([&](Graph<Real>& g, const Inputs& x) { return project(g, ad::scale(g, x[0], 1.7), w); },
                           {a}) < kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::cwise_mul(g, x[0], x[1]), w); }, {a, b}) < kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::add_colwise(g, x[0], x[1]), w); }, {a, col}) <
        kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::add_n(g, {x[0], x[1], x[0]}), w); }, {a, b}) <
        kTol);
  for (auto op : {0, 1, 2, 3}) {
    CHECK(max_gradient_error(
              [&](Graph<Real>& g, const Inputs& x) {
                Var y = op == 0 ? ad::exp(g, x[0]) : op == 1 ? ad::sigmoid(g, x[0]) : op == 2 ? ad::tanh(g, x[0]) : ad::swish(g, x[0]);
                return project(g, y, w);
              },
              {a}) < kTol);
  }
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) {
              return project(g, ad::concat_rows(g, {x[0], x[1]}), randn(6, 4, 5));
            },
            {a, b}) < kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) {
              return project(g, ad::concat_cols(g, {x[0], x[1]}), randn(3, 8, 6));
            },
            {a, b}) < kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::slice_rows(g, x[0], 1, 2), randn(2, 4, 7)); },
            {a}) < kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::slice_cols(g, x[0], 1, 2), randn(3, 2, 8)); },
            {a}) < kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::transpose(g, x[0]), randn(4, 3, 9)); }, {a}) <
        kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::mean_cols(g, x[0]), col); }, {a}) < kTol);
  CHECK(max_gradient_error([&](Graph<Real>& g, const Inputs& x) { return ad::sum_sq(g, x[0]); }, {a}) < kTol);
}

TEST_CASE("matrix products") {
  const Matrix a = randn(3, 5, 10), b = randn(5, 2, 11), c = randn(3, 2, 12), bias = randn(3, 1, 13);
  CHECK(max_gradient_error([&](Graph<Real>& g, const Inputs& x) { return project(g, ad::matmul(g, x[0], x[1]), c); },
                           {a, b}) < kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::matmul_tn(g, x[0], x[1]), randn(5, 2, 14)); },
            {a, c}) < kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::linear(g, x[0], x[1], x[2]), c); },
            {a, bias, b}) < kTol);
}

TEST_CASE("lstm cell") {
  const int I = 3, H = 4, B = 2;
  const Matrix w = randn(4 * H, I + H, 20) * 0.5, b = randn(4 * H, 1, 21), x = randn(I, B, 22),
               s = randn(2 * H, B, 23), proj = randn(2 * H, B, 24);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& v) { return project(g, ad::lstm_cell(g, v[0], v[1], v[2], v[3]), proj); },
            {w, b, x, s}) < kTol);
  // two chained steps exercise the state path
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& v) {
              Var s1 = ad::lstm_cell(g, v[0], v[1], v[2], v[3]);
              return project(g, ad::lstm_cell(g, v[0], v[1], v[2], s1), proj);
            },
            {w, b, x, s}) < kTol);
}

TEST_CASE("blur and strided convolution") {
  const Matrix a = randn(3, 20, 30), w = randn(5, 9, 31) * 0.3, b = randn(5, 1, 32);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::blur(g, x[0]), randn(3, 17, 33)); }, {a}) <
        kTol);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) {
              return project(g, ad::conv_stride2(g, x[0], x[1], x[2]), randn(5, 9, 34));
            },
            {w, b, a}) < kTol);
  CHECK_THROWS_AS(
      [] {
        Graph<Real> g;
        ad::blur(g, g.leaf(Matrix::Zero(2, 3)));
      }(),
      InvalidInput);
}

TEST_CASE("window attention") {
  const int K = 3, V = 4, B = 2;
  auto content = std::make_shared<std::vector<Matrix>>();
  content->push_back(Matrix::Identity(V, 4).leftCols(3));
  content->push_back(randn(V, 5, 40).cwiseAbs());
  const Matrix raw = randn(3 * K, B, 41) * 0.5, kappa = randn(K, B, 42).cwiseAbs() * 2,
               proj = randn(V + K, B, 43);
  const ad::ContentBatch<Real> c = content;
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return project(g, ad::window_attention(g, x[0], x[1], c), proj); },
            {raw, kappa}) < kTol);
}

TEST_CASE("style attention") {
  const int heads = 2, D = 3, B = 2;
  auto offsets = std::make_shared<std::vector<Eigen::Index>>(std::vector<Eigen::Index>{0, 3, 7});
  const ad::FrameOffsets off = offsets;
  const Matrix q = randn(heads * D, B, 50), k = randn(heads * D, 7, 51), v = randn(heads * D, 7, 52),
               proj = randn(heads * D, B, 53);
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) {
              return project(g, ad::style_attention(g, x[0], x[1], x[2], off, heads), proj);
            },
            {q, k, v}) < kTol);
}

TEST_CASE("mixture head negative log-likelihood") {
  const int M = 3, B = 3;
  Matrix raw = randn(6 * M + 2, B, 60) * 0.5;
  Matrix targets = randn(3, B, 61);
  targets.row(2) << 1, 0, 1;
  Matrix is_last(1, B), mask(1, B);
  is_last << 0, 1, 0;
  mask << 1, 1, 0.5;
  CHECK(max_gradient_error(
            [&](Graph<Real>& g, const Inputs& x) { return ad::mdn_nll(g, x[0], targets, is_last, mask); }, {raw}) <
        kTol);

  // agrees with the per-frame reference log-probability
  Graph<Real> g(false);
  Matrix per;
  ad::mdn_nll(g, g.leaf(raw), targets, is_last, mask, &per);
  for (int b = 0; b < B; ++b) {
    const auto d = output_dist_from_raw<Real>(raw.col(b));
    const Frame<Real> f{targets(0, b), targets(1, b), targets(2, b)};
    CHECK(per(0, b) == doctest::Approx(-output_log_prob(d, f, is_last(0, b) > 0.5)).epsilon(1e-12));
  }
}

TEST_CASE("diagonal Gaussian KL") {
  const int Z = 4, B = 3;
  const Matrix q = randn(2 * Z, B, 70) * 0.7, p = randn(2 * Z, B, 71) * 0.7;
  Matrix mask(1, B);
  mask << 1, 0, 1;
  CHECK(max_gradient_error([&](Graph<Real>& g, const Inputs& x) { return ad::kl_diag(g, x[0], x[1], mask); },
                           {q, p}) < kTol);
  Graph<Real> g(false);
  Matrix per;
  ad::kl_diag(g, g.leaf(q), g.leaf(p), mask, &per);
  for (int b = 0; b < B; ++b) {
    const auto gq = GaussianDiag<Real>::from_raw(q.col(b)), gp = GaussianDiag<Real>::from_raw(p.col(b));
    CHECK(per(0, b) == doctest::Approx(kl_diag_gaussians(gq, gp)).epsilon(1e-12));
  }
}

TEST_CASE("parameters receive flushed gradients") {
  ad::Parameter<Real> w{"w", randn(2, 3, 80), {}};
  w.zero_grad();
  const Matrix x = randn(3, 1, 81);
  Graph<Real> g(true);
  Var out = ad::sum_all(g, ad::matmul(g, g.param(w), g.constant(x)));
  g.backward(out);
  g.flush_parameter_grads();
  for (int r = 0; r < 2; ++r) CHECK((w.grad.row(r).transpose() - x).norm() == doctest::Approx(0.0));

  Graph<Real> frozen(true);
  const ad::Parameter<Real>& cw = w;
  Var y = ad::sum_all(frozen, ad::matmul(frozen, frozen.param(cw), frozen.constant(x)));
  CHECK_FALSE(frozen.requires_grad(y));
}
