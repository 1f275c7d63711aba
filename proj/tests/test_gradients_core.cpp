// Finite-difference checks of every differentiable tensor op, f64 build.

#include "doctest.h"
#include "support/grad_suite.hpp"

TEST_CASE("grad: tensor ops, 10 seeds each") {
  for (const auto& c : fpeft_test::op_cases()) {
    for (int s = 0; s < 10; ++s) {
      const double e = c.run(s);
      INFO(c.name << " seed " << s << " rel err " << e);
      CHECK(e < fpeft_test::kGradTol);
    }
  }
}
