#pragma once

// Finite-difference check of gradients with respect to named entries of a
// ParameterStore. Large tensors are probed on a random subset of elements;
// the norm-wise error is taken over the probed elements.
//
// The reference is the central difference at h refined with the one at h/2,
// (4 D(h/2) - D(h)) / 3, which cancels the h^2 truncation term. Whole-model
// losses can be curved enough that D(h) alone is off by ~1e-3 relative.

#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fpeft/params.hpp"
#include "support/gradcheck.hpp"

namespace fpeft_test {

using fpeft::Binder;
using fpeft::ParameterStore;

inline constexpr double kAbsFloor = 1e-7;

using StoreLossFn = std::function<Var(Binder&)>;

inline double store_loss(ParameterStore& store, const StoreLossFn& f) {
  Tape tape;
  Binder b(tape, store);
  return static_cast<double>(f(b).value().item());
}

inline std::map<std::string, double> store_grad_check(ParameterStore& store, const std::vector<std::string>& names,
                                                      const StoreLossFn& f, std::mt19937_64& rng,
                                                      std::int64_t max_probe = 24, double h = 1e-3) {
  for (auto& [n, p] : store) p.trainable = false;
  for (const auto& n : names) store.at(n).trainable = true;
  fpeft::GradMap grads;
  {
    Tape tape;
    Binder b(tape, store);
    Var loss = f(b);
    tape.backward(loss);
    b.collect_grads(grads);
  }
  std::map<std::string, double> out;
  for (const auto& n : names) {
    Tensor& v = store.at(n).value;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(v.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    if (static_cast<std::int64_t>(idx.size()) > max_probe) idx.resize(static_cast<std::size_t>(max_probe));
    const auto git = grads.find(n);
    double diff2 = 0, an2 = 0, fd2 = 0;
    for (auto j : idx) {
      const Real orig = v[j];
      auto central = [&](double step) {
        v[j] = static_cast<Real>(orig + step);
        const double fp = store_loss(store, f);
        v[j] = static_cast<Real>(orig - step);
        const double fm = store_loss(store, f);
        v[j] = orig;
        return (fp - fm) / (2 * step);
      };
      const double fd = (4 * central(h / 2) - central(h)) / 3;
      const double an = git == grads.end() ? 0.0 : static_cast<double>(git->second[j]);
      diff2 += (an - fd) * (an - fd);
      an2 += an * an;
      fd2 += fd * fd;
    }
    // Entries whose true gradient vanishes (for example attention key biases)
    // leave both estimates at round-off level; the floor keeps that noise
    // from reading as a relative error.
    const double denom = std::max({std::sqrt(an2), std::sqrt(fd2), kAbsFloor});
    out[n] = std::sqrt(diff2) / denom;
  }
  return out;
}

inline double max_err(const std::map<std::string, double>& m, std::string* worst = nullptr) {
  double e = 0;
  for (const auto& [n, v] : m)
    if (v >= e) {
      e = v;
      if (worst) *worst = n;
    }
  return e;
}

}  // namespace fpeft_test
