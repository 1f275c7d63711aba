#include "acceptance/gradients.hpp"

#include "support/grad_suite.hpp"

namespace acceptance {

std::vector<GradCaseResult> run_gradient_suite(int first_seed, int n_seeds) {
  std::vector<GradCaseResult> out;
  auto cases = fpeft_test::op_cases();
  for (auto& c : fpeft_test::model_cases()) cases.push_back(std::move(c));
  for (const auto& c : cases) {
    GradCaseResult r{c.name, n_seeds, 0.0};
    for (int s = first_seed; s < first_seed + n_seeds; ++s) {
      const double e = c.run(s);
      if (!(e <= r.worst)) r.worst = e;  // NaN sticks
    }
    out.push_back(r);
  }
  return out;
}

double gradient_tolerance() { return fpeft_test::kGradTol; }

}  // namespace acceptance
