#pragma once

#include <map>
#include <stdexcept>
#include <string>

#include "fpeft/params.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

// Raised when a gradient or update is not finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Moments exist only for parameters that were trainable when stepped.
struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, Tensor> m, v;
};

// Decoupled weight decay, then the bias-corrected Adam update:
//   theta -= lr * wd * theta
//   theta -= lr * mhat / (sqrt(vhat) + eps)
// Frozen parameters are skipped. A trainable parameter without an entry in
// `grads` is stepped with a zero gradient.
void adamw_step(ParameterStore& store, const GradMap& grads, AdamState& state, double lr, const AdamWConfig& cfg);

// lr * 0.5 * (1 + cos(pi * t / total)); exactly 0 at t >= total.
double cosine_lr(double lr, std::uint64_t t, std::uint64_t total);

}  // namespace fpeft
