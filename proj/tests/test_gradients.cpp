#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ntseg/gradient_suite.hpp"

using namespace ntseg;

// [DERIVED] oracle: central finite differences on seeded inputs. Covers every
// primitive plus a tiny end-to-end network where all parameters are probed.

TEST_CASE("every adjoint matches finite differences") {
  auto entries = run_gradient_suite(2024);
  REQUIRE(entries.size() == 10);
  for (const auto& e : entries) {
    INFO(e.name, ": max_rel_err=", e.result.max_rel_err, " worst=",
         e.result.worst);
    CHECK(e.passed);
    CHECK(e.result.probes > 0);
  }
  CHECK(all_passed(entries));
}

TEST_CASE("the harness catches a deliberately broken adjoint") {
  auto entries = run_gradient_suite(2024, /*inject_bug=*/true);
  bool conv_failed = false;
  for (const auto& e : entries)
    if (e.name == "conv2d" && !e.passed) conv_failed = true;
  CHECK(conv_failed);
  CHECK(!all_passed(entries));
}
