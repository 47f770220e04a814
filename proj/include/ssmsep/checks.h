// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Self-contained invariant checks over the whole pipeline. Each compares a
// production path against an independent oracle and reports the worst
// observed error next to its threshold.

#ifndef SSMSEP_CHECKS_H_
#define SSMSEP_CHECKS_H_

#include <cstdint>
#include <string>
#include <vector>

namespace ssmsep {

enum class Precision { kF32, kF64 };

struct CheckOptions {
  Precision precision = Precision::kF64;
  std::uint64_t seed = 0;
  // Replaces the production scan with one whose outputs lag by one step.
  bool scan_off_by_one = false;
  std::size_t scan_instances = 1000;
  std::size_t stft_signals = 100;
  std::size_t pit_instances = 500;
  // Core of the tiny model used by check_model_gradient (false selects GRU).
  bool fd_uses_bmamba = true;
  bool td_uses_bmamba = true;
};

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0;      // worst observed error (or the measured quantity)
  double threshold = 0;
  double seconds = 0;
  std::string detail;
};

CheckResult check_scan_oracle(const CheckOptions& opts);
CheckResult check_zoh_closed_form(const CheckOptions& opts);
CheckResult check_scan_gradient(const CheckOptions& opts);
CheckResult check_bmamba_gradient(const CheckOptions& opts);
CheckResult check_model_gradient(const CheckOptions& opts);
CheckResult check_stft_roundtrip(const CheckOptions& opts);
CheckResult check_pit_bruteforce(const CheckOptions& opts);
CheckResult check_lufs_closed_loop(const CheckOptions& opts);
CheckResult check_mixgen_audit(const CheckOptions& opts);

std::vector<CheckResult> run_all_checks(const CheckOptions& opts);

// Fixed-width table, one row per check.
std::string format_checks(const std::vector<CheckResult>& results);

}  // namespace ssmsep

#endif  // SSMSEP_CHECKS_H_
