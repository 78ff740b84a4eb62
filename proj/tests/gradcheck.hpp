#ifndef STYLEEQ_TESTS_GRADCHECK_HPP
#define STYLEEQ_TESTS_GRADCHECK_HPP

#include "styleeq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace styleeq::testing {

/// Builds a scalar from leaf nodes holding `inputs`.
using ScalarFn = std::function<ad::Var(ad::Graph<Real>&, const std::vector<ad::Var>&)>;

inline double evaluate(const ScalarFn& f, const std::vector<Matrix>& inputs) {
  ad::Graph<Real> g(false);
  std::vector<ad::Var> leaves;
  for (const auto& m : inputs) leaves.push_back(g.leaf(m));
  return g.value(f(g, leaves))(0, 0);
}

/// Largest relative error between the tape gradient and central differences,
/// with |a − b| / max(|a|, |b|, floor).
inline double max_gradient_error(const ScalarFn& f, std::vector<Matrix> inputs, double h = 1e-5,
                                 double floor = 1e-6) {
  ad::Graph<Real> g(true);
  std::vector<ad::Var> leaves;
  for (const auto& m : inputs) leaves.push_back(g.leaf(m));
  ad::Var out = f(g, leaves);
  g.backward(out);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix analytic = g.has_grad(leaves[k].id) ? g.grad(leaves[k]) : Matrix::Zero(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k].data()[i];
      inputs[k].data()[i] = orig + h;
      const double up = evaluate(f, inputs);
      inputs[k].data()[i] = orig - h;
      const double down = evaluate(f, inputs);
      inputs[k].data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.data()[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Weighted sum Σ w ⊙ v with fixed random weights, turning any node into a
/// scalar with a generic upstream gradient.
inline ad::Var project(ad::Graph<Real>& g, ad::Var v, const Matrix& weights) {
  return ad::sum_all(g, ad::cwise_mul(g, v, g.constant(weights)));
}

}  // namespace styleeq::testing

#endif  // STYLEEQ_TESTS_GRADCHECK_HPP
