#pragma once

#include <string>
#include <vector>

namespace metavrf::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool passed = false;
};

/// Central finite-difference audit of every graph primitive plus key
/// composites (LSTM cell, attention, KL, ridge) and the full training
/// objective on a tiny 2-way 1-shot task (3-d features, 4 bases, vanilla
/// LSTM). Each entry compares analytic gradients for every leaf against
/// central differences and passes when the max relative error is within tol.
std::vector<CheckResult> run_all(double tol = 1e-4);

}  // namespace metavrf::gradcheck
