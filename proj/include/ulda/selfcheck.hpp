#pragma once

#include "ulda/simulation.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ulda {

struct CheckResult {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

using PinFn = std::function<FeatureMap(const FeatureMap&, const StyleParams&, double)>;

struct SelfcheckOptions {
  // Transform under test for the PIN statistics check; tests swap in broken
  // variants to confirm the check catches them.
  PinFn pin_impl;
  bool include_end_to_end = true;
  std::uint64_t seed = 2024;
  // When non-empty, only checks with these names run.
  std::vector<std::string> only;
};

CheckResult check_pin_statistics(const PinFn& pin_impl, int instances, std::uint64_t seed);

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& opt = {});

std::string format_check(const CheckResult& r);

}  // namespace ulda
