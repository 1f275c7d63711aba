#pragma once

// Central finite-difference oracle. Used from translation units compiled with
// FPEFT_REAL_DOUBLE so that the oracle and the reverse sweep both run at f64.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "fpeft/autodiff.hpp"

namespace fpeft_test {

using fpeft::Real;
using fpeft::Tape;
using fpeft::Tensor;
using fpeft::Var;

using LossFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheck {
  std::vector<double> rel_err;  // one per input tensor
  double max_rel_err() const { return rel_err.empty() ? 0.0 : *std::max_element(rel_err.begin(), rel_err.end()); }
};

inline double eval_loss(const LossFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, false));
  return static_cast<double>(f(tape, leaves).value().item());
}

// Norm-wise relative error between the reverse-mode gradient and central
// differences with step h, per input.
inline GradCheck grad_check(const LossFn& f, const std::vector<Tensor>& inputs, double h = 1e-3) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
  Var loss = f(tape, leaves);
  tape.backward(loss);

  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor* g = tape.grad(leaves[i]);
    double diff2 = 0, an2 = 0, fd2 = 0;
    std::vector<Tensor> work = inputs;
    for (std::int64_t j = 0; j < inputs[i].size(); ++j) {
      const Real orig = inputs[i][j];
      work[i][j] = static_cast<Real>(orig + h);
      const double fp = eval_loss(f, work);
      work[i][j] = static_cast<Real>(orig - h);
      const double fm = eval_loss(f, work);
      work[i][j] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double an = g ? static_cast<double>((*g)[j]) : 0.0;
      diff2 += (an - fd) * (an - fd);
      an2 += an * an;
      fd2 += fd * fd;
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(fd2), 1e-12});
    out.rel_err.push_back(std::sqrt(an2) < 1e-12 && std::sqrt(fd2) < 1e-12 ? 0.0 : std::sqrt(diff2) / denom);
  }
  return out;
}

inline Tensor random_tensor(fpeft::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(u(rng));
  return t;
}

}  // namespace fpeft_test
