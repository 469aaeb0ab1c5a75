#include "doctest.h"

#include "ulda/selfcheck.hpp"

#include <set>

using namespace ulda;

TEST_CASE("selfcheck: every check passes and is named") {
  const auto results = run_selfcheck();
  CHECK(results.size() >= 12);
  std::set<std::string> names;
  for (const auto& r : results) {
    CAPTURE(format_check(r));
    CHECK(r.passed);
    CHECK(std::isfinite(r.measured));
    names.insert(r.name);
  }
  CHECK(names.size() == results.size());
  for (const char* required :
       {"pin_statistics", "tdr_closed_form", "tdr_degeneracy_witness", "grad_scene_alignment", "grad_regional",
        "grad_pixel", "grad_hca", "grad_dcrl", "grad_seg", "grad_rectify", "oracle_masked_average_pool",
        "oracle_regional_loss", "oracle_metrics", "oracle_stage1_total", "determinism_artifacts",
        "no_domain_id_shuffle"}) {
    CHECK(names.count(required) == 1);
  }
}

TEST_CASE("selfcheck: a sign-flipped sigma fails the pin statistics check") {
  SelfcheckOptions opt;
  opt.include_end_to_end = false;
  opt.pin_impl = [](const FeatureMap& f, const StyleParams& s, double eps) {
    StyleParams bad = s;
    bad.sigma = -s.sigma;
    return pin(f, bad, eps);
  };
  const auto results = run_selfcheck(opt);
  bool found = false;
  for (const auto& r : results) {
    if (r.name != "pin_statistics") continue;
    found = true;
    CHECK_FALSE(r.passed);
    CHECK(format_check(r).find("FAIL") != std::string::npos);
  }
  CHECK(found);
}

TEST_CASE("selfcheck: format line carries name, verdict and measured error") {
  const CheckResult r{"example", true, 1.25e-11, 1e-10, "detail"};
  const std::string line = format_check(r);
  CHECK(line.find("example") != std::string::npos);
  CHECK(line.find("PASS") != std::string::npos);
  CHECK(line.find("1.250e-11") != std::string::npos);
}
