#include "doctest.h"

#include "gradcheck.hpp"
#include "styleeq/model.hpp"

#include <cmath>
#include <numbers>

using namespace styleeq;
using ad::Graph;
using ad::Var;

namespace {

Matrix randn(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng = make_rng(seed, "seqmodel-test");
  return standard_normal<Real>(r, c, rng);
}

ModelConfig small_config() {
  ModelConfig c;
  c.bottom_dim = 6;
  c.top_dim = 5;
  c.z_dim = 3;
  c.num_windows = 2;
  c.num_mixtures = 2;
  c.alphabet_size = 4;
  c.conv_channels = {3, 4, 4, 6};
  c.style_subspace_dim = 2;
  c.attention_heads = 2;
  c.head_dim = 2;
  c.prior_hidden = 5;
  return c;
}

ModelParams<Real> zeroed(const ModelConfig& cfg) {
  auto p = ModelParams<Real>::init(cfg, 1);
  p.visit([](ad::Parameter<Real>& q) { q.value.setZero(); });
  return p;
}

}  // namespace

TEST_CASE("content attention window examples") {
  Matrix content = Matrix::Identity(5, 5);
  Vector alpha(1), beta(1), kappa(1);
  alpha << 1;
  beta << 1e4;
  kappa << 3;
  const auto r = gaussian_window<Real>(alpha, beta, kappa, content);
  Vector expected = Vector::Zero(5);
  expected(2) = 1;
  CHECK((r.weights - expected).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((r.attended - content.col(2)).cwiseAbs().maxCoeff() < 1e-12);

  // κ advances by exp(κ̂) > 0
  Vector raw(3), prev(1);
  raw << 0.3, 0.1, -5.0;
  prev << 1.25;
  CHECK(content_attention<Real>(raw, prev, content).kappa(0) > prev(0));

  // α̂ → −∞ switches the window off
  raw(0) = -800;
  const auto off = content_attention<Real>(raw, prev, content);
  CHECK(off.weights.cwiseAbs().maxCoeff() == 0.0);
  CHECK(off.attended.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("window positions never move backwards") {
  const ModelConfig cfg = small_config();
  auto params = ModelParams<Real>::init(cfg, 3);
  params.window_w.value = randn(3 * cfg.num_windows, cfg.bottom_dim, 4) * 3;
  params.window_b.value = randn(3 * cfg.num_windows, 1, 5) * 3;
  Graph<Real> g(false);
  const auto p = model::bind(g, std::as_const(params));
  auto content = std::make_shared<std::vector<Matrix>>(2, randn(cfg.alphabet_size, 4, 6).cwiseAbs());
  model::State s = model::initial_state(g, cfg, 2);
  Matrix prev_kappa = g.value(s.kappa);
  for (int t = 0; t < 30; ++t) {
    auto b = model::bottom_step<Real>(g, p, cfg, s, g.constant(randn(3, 2, 100 + t)), content);
    const Matrix& k = g.value(b.kappa);
    CHECK((k.array() >= prev_kappa.array()).all());
    prev_kappa = k;
    s.bottom = b.bottom;
    s.kappa = b.kappa;
    s.attended = b.attended;
  }
}

TEST_CASE("zero parameters give the neutral output distribution") {
  const ModelConfig cfg = small_config();
  const auto params = zeroed(cfg);
  Graph<Real> g(false);
  const auto p = model::bind(g, params);
  auto content = std::make_shared<std::vector<Matrix>>(1, Matrix::Identity(cfg.alphabet_size, 3));
  const model::State s = model::initial_state(g, cfg, 1);
  auto b = model::bottom_step<Real>(g, p, cfg, s, g.constant(Matrix::Zero(3, 1)), content);
  Var z = g.constant(randn(cfg.z_dim, 1, 7));
  auto top = model::top_step(g, p, cfg, s, b.h, z, b.attended);
  const auto d = output_dist_from_raw<Real>(g.value(top.out_raw).col(0));
  CHECK((d.weights.array() - 0.5).abs().maxCoeff() < 1e-15);
  CHECK(d.means.cwiseAbs().maxCoeff() == 0.0);
  CHECK((d.stds.array() - 1).abs().maxCoeff() == 0.0);
  CHECK(d.corr.cwiseAbs().maxCoeff() == 0.0);
  CHECK(d.pen_prob == 0.5);
  CHECK(d.stop_prob == 0.5);

  const Matrix prior = g.value(model::prior_raw(g, p, b.h, b.attended));
  CHECK(prior.rows() == 2 * cfg.z_dim);
  CHECK(prior.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("output head width") {
  ModelConfig c;
  c.num_mixtures = 20;
  CHECK(c.output_width() == 122);
  CHECK(ModelConfig{}.output_width() == 62);
}

TEST_CASE("a step is a pure function of its inputs") {
  const ModelConfig cfg = small_config();
  const auto params = ModelParams<Real>::init(cfg, 9);
  auto run = [&] {
    Graph<Real> g(false);
    const auto p = model::bind(g, params);
    auto content = std::make_shared<std::vector<Matrix>>(1, Matrix::Identity(cfg.alphabet_size, 3));
    const model::State s = model::initial_state(g, cfg, 1);
    auto b = model::bottom_step<Real>(g, p, cfg, s, g.constant(randn(3, 1, 10)), content);
    auto top = model::top_step(g, p, cfg, s, b.h, g.constant(randn(cfg.z_dim, 1, 11)), b.attended);
    return Matrix(g.value(top.out_raw));
  };
  CHECK(run() == run());
}

TEST_CASE("output log probability examples") {
  OutputDistParams<Real> d;
  d.weights = Vector::Ones(1);
  d.means = Matrix::Zero(1, 2);
  d.stds = Matrix::Ones(1, 2);
  d.corr = Vector::Zero(1);
  d.pen_prob = 0.5;
  d.stop_prob = 0.5;
  const double expected = std::log(1 / (2 * std::numbers::pi)) + 2 * std::log(0.5);
  CHECK(output_log_prob(d, Frame<Real>{0, 0, 1}, false) == doctest::Approx(expected).epsilon(1e-14));

  // a zero-weight component has no influence
  OutputDistParams<Real> two;
  two.weights = Vector(2);
  two.weights << 1, 0;
  two.means = Matrix::Zero(2, 2);
  two.stds = Matrix::Ones(2, 2);
  two.corr = Vector::Zero(2);
  const Frame<Real> x{0.3, -0.2, 0};
  const double base = output_log_prob(two, x, true);
  two.means.row(1) << 5, -4;
  two.stds.row(1) << 0.1, 3;
  two.corr(1) = 0.9;
  CHECK(output_log_prob(two, x, true) == base);

  OutputDistParams<Real> bad = d;
  bad.corr(0) = 1.0;
  CHECK_THROWS_AS(output_log_prob(bad, x, false), InvalidInput);
  bad = d;
  bad.stds(0, 1) = 0;
  CHECK_THROWS_AS(output_log_prob(bad, x, false), InvalidInput);
}

TEST_CASE("mixture density integrates to one") {
  Vector raw = randn(6 * 2 + 2, 1, 20).col(0) * 0.5;
  const auto d = output_dist_from_raw<Real>(raw);
  CHECK(std::abs(d.weights.sum() - 1) < 1e-12);
  const double h = 0.05;
  const int n = static_cast<int>(std::lround(16 / h));
  double total = 0;
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j) {
      const double x = -8 + i * h, y = -8 + j * h;
      const double w = (i == 0 || i == n ? 0.5 : 1.0) * (j == 0 || j == n ? 0.5 : 1.0);
      total += w * std::exp(mixture_log_density(d, x, y));
    }
  total *= h * h;
  CHECK(total >= 0.99);
  CHECK(total <= 1.01);
}

TEST_CASE("KL divergence of diagonal Gaussians") {
  GaussianDiag<Real> q{Vector::Constant(1, 1.0), Vector::Zero(1)}, p{Vector::Zero(1), Vector::Zero(1)};
  CHECK(kl_diag_gaussians(q, p) == 0.5);
  CHECK(kl_diag_gaussians(q, q) == 0.0);

  const GaussianDiag<Real> a{randn(3, 1, 30).col(0), randn(3, 1, 31).col(0) * 0.3};
  const GaussianDiag<Real> b{randn(3, 1, 32).col(0), randn(3, 1, 33).col(0) * 0.3};
  const double exact = kl_diag_gaussians(a, b);
  CHECK(exact >= 0);
  Rng rng = make_rng(34, "mc");
  const int n = 100000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const Vector z = reparam_sample<Real>(a, standard_normal<Real>(3, 1, rng).col(0));
    const double v = log_normal_diag<Real>(a, z) - log_normal_diag<Real>(b, z);
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  CHECK(std::abs(mean - exact) < 3 * se);
}

TEST_CASE("reparameterized samples") {
  GaussianDiag<Real> g{Vector(2), Vector(2)};
  g.mean << 3.0, -2.0;
  g.log_std << std::log(0.5), std::log(1.5);
  CHECK(reparam_sample<Real>(g, Vector::Zero(2)) == g.mean);
  GaussianDiag<Real> unit{g.mean, Vector::Zero(2)};
  Vector n(2);
  n << 0.25, -1.5;
  CHECK(reparam_sample<Real>(unit, n) == g.mean + n);
  CHECK_THROWS_AS(reparam_sample<Real>(g, Vector::Zero(3)), InvalidInput);

  Rng rng = make_rng(40, "mc");
  const int draws = 100000;
  Vector sum = Vector::Zero(2), sq = Vector::Zero(2);
  for (int i = 0; i < draws; ++i) {
    const Vector z = reparam_sample<Real>(g, standard_normal<Real>(2, 1, rng).col(0));
    sum += z;
    sq += z.cwiseAbs2();
  }
  const Vector mean = sum / draws;
  const Vector sd = (sq / draws - mean.cwiseAbs2()).cwiseSqrt();
  for (int i = 0; i < 2; ++i) {
    CHECK(std::abs(mean(i) - g.mean(i)) < 0.01 * std::abs(g.mean(i)));
    CHECK(std::abs(sd(i) - std::exp(g.log_std(i))) < 0.01 * std::exp(g.log_std(i)));
  }
}

TEST_CASE("gradient of the KL with respect to prior parameters") {
  const ModelConfig cfg = small_config();
  auto params = ModelParams<Real>::init(cfg, 50);
  const Matrix h = randn(cfg.bottom_dim, 2, 51), a = randn(cfg.alphabet_size, 2, 52),
               q = randn(2 * cfg.z_dim, 2, 53) * 0.5;
  const Matrix mask = Matrix::Ones(1, 2);
  const double err = testing::max_gradient_error(
      [&](Graph<Real>& g, const std::vector<Var>& x) {
        Var hidden = ad::swish(g, ad::linear(g, x[0], x[1], ad::concat_rows(g, {g.constant(h), g.constant(a)})));
        Var prior = ad::linear(g, x[2], x[3], hidden);
        return ad::kl_diag(g, g.constant(q), prior, mask);
      },
      {params.prior1_w.value, params.prior1_b.value, params.prior2_w.value, params.prior2_b.value});
  CHECK(err < 1e-4);
}
