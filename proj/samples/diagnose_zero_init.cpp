// Prints the zero-initialization degeneracy report for each regime.

#include <cstdio>

#include "gbt/diagnostics.hpp"

int main() {
  using gbt::DiagnosticRegime;
  for (auto regime : {DiagnosticRegime::Zero, DiagnosticRegime::StartToken, DiagnosticRegime::StartTokenPosEmb}) {
    const auto r = gbt::zero_init_diagnostic(16, 4, 4, regime, 7);
    std::printf("%-20s prediction blocks max|s| %-12.4g row spread %-12.4g posemb diff %-10.3g %s\n",
                gbt::regime_name(regime), r.max_abs_prediction_blocks, r.prediction_row_spread,
                r.posemb_recompute_diff, r.verdict.c_str());
  }
  return 0;
}
