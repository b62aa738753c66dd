#pragma once

#include <cstddef>
#include <span>
#include <string_view>

#include "json.hpp"

namespace mvseg {

enum class TestMethod { wilcoxon_signed_rank, mann_whitney_u };

std::string_view to_string(TestMethod method);

/// automatic: exact for small samples (signed-rank n <= 20, rank-sum
/// n1 + n2 <= 16), normal approximation otherwise.
enum class PValueMode { automatic, exact, asymptotic };

struct TestResult {
  double statistic = 0.0;  // W+ (signed-rank) or U of the first sample
  double p_value = 1.0;    // two-sided
  TestMethod method = TestMethod::wilcoxon_signed_rank;
  std::size_t n1 = 0;      // signed-rank: nonzero differences
  std::size_t n2 = 0;
  bool exact = false;
  bool degenerate = false;  // every difference was zero

  nlohmann::json to_json() const;
};

inline constexpr std::size_t kExactSignedRankMax = 20;
inline constexpr std::size_t kExactRankSumMax = 16;

/// Two-sided signed-rank test on paired differences. Zeros are dropped and
/// tied magnitudes get mid-ranks. The exact p-value is the share of the 2^n
/// sign assignments whose W+ lies at least as far from its mean as the
/// observed one; the asymptotic path uses the tie-corrected variance with a
/// 0.5 continuity correction.
TestResult wilcoxon_signed_rank(std::span<const double> differences, PValueMode mode = PValueMode::automatic);

/// Two-sided rank-sum test. The exact p-value enumerates all C(n1+n2, n1)
/// labelings of the pooled mid-ranks.
TestResult mann_whitney_u(std::span<const double> a, std::span<const double> b,
                          PValueMode mode = PValueMode::automatic);

struct MedianIqr {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};

/// Type-7 quantiles at 0.25 / 0.5 / 0.75. Throws ContractError when empty.
MedianIqr median_iqr(std::span<const double> sample);

}  // namespace mvseg
