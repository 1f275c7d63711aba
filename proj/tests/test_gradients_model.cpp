// Finite-difference checks of embedders, encoder/decoder, prompts, adapters,
// LoRA, heads and the composite losses at a toy size, f64 build.

#include "doctest.h"
#include "support/grad_suite.hpp"

TEST_CASE("grad: model components and composite losses, 10 seeds each") {
  for (const auto& c : fpeft_test::model_cases()) {
    for (int s = 0; s < 10; ++s) {
      const double e = c.run(s);
      INFO(c.name << " seed " << s << " rel err " << e);
      CHECK(e < fpeft_test::kGradTol);
    }
  }
}
