#pragma once

#include <cstdio>
#include <string>
#include <vector>

namespace hatkit::selftest {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Fast invariant suite behind the `selftest` subcommand.
std::vector<CheckResult> run_all(uint64_t seed);

}  // namespace hatkit::selftest
