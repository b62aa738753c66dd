#include "mvseg/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mvseg/error.hpp"
#include "mvseg/metrics.hpp"

namespace mvseg {

std::string_view to_string(TestMethod method) {
  return method == TestMethod::wilcoxon_signed_rank ? "wilcoxon-signed-rank" : "mann-whitney-u";
}

nlohmann::json TestResult::to_json() const {
  return {{"method", std::string(to_string(method))},
          {"statistic", statistic},
          {"p_value", p_value},
          {"n1", n1},
          {"n2", n2},
          {"exact", exact},
          {"degenerate", degenerate}};
}

namespace {

// Mid-ranks times two (always integers), plus sum(t^3 - t) over tie groups.
struct Ranks {
  std::vector<std::int64_t> doubled;
  double tie_term = 0.0;
};

Ranks doubled_midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  Ranks r;
  r.doubled.resize(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // Ranks i+1 .. j+1 share the mean (i + j + 2) / 2.
    const auto twice = static_cast<std::int64_t>(i + j + 2);
    for (std::size_t t = i; t <= j; ++t) r.doubled[order[t]] = twice;
    const double t = static_cast<double>(j - i + 1);
    r.tie_term += t * t * t - t;
    i = j + 1;
  }
  return r;
}

double two_sided_normal(double distance, double sd) {
  if (!(sd > 0.0)) return 1.0;
  const double z = std::max(0.0, (distance - 0.5) / sd);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

bool use_exact(PValueMode mode, std::size_t n, std::size_t automatic_max, std::size_t hard_max) {
  if (mode == PValueMode::asymptotic) return false;
  if (mode == PValueMode::exact) {
    if (n > hard_max) throw ConfigError("sample too large for exact enumeration: n=" + std::to_string(n));
    return true;
  }
  return n <= automatic_max;
}

}  // namespace

TestResult wilcoxon_signed_rank(std::span<const double> differences, PValueMode mode) {
  TestResult res;
  res.method = TestMethod::wilcoxon_signed_rank;
  std::vector<double> magnitudes;
  std::vector<bool> positive;
  for (double d : differences) {
    if (std::isnan(d)) throw ContractError("signed-rank test given a NaN difference");
    if (d == 0.0) continue;
    magnitudes.push_back(std::abs(d));
    positive.push_back(d > 0.0);
  }
  const std::size_t n = magnitudes.size();
  res.n1 = n;
  if (n == 0) {
    res.degenerate = true;
    res.exact = true;
    return res;
  }

  const Ranks ranks = doubled_midranks(magnitudes);
  std::int64_t total = 0, observed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += ranks.doubled[i];
    if (positive[i]) observed += ranks.doubled[i];
  }
  res.statistic = static_cast<double>(observed) / 2.0;

  res.exact = use_exact(mode, n, kExactSignedRankMax, 62);
  if (res.exact) {
    // counts[s] = number of sign assignments with doubled W+ equal to s.
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(total) + 1, 0);
    counts[0] = 1;
    std::int64_t reach = 0;
    for (std::int64_t r : ranks.doubled) {
      for (std::int64_t s = reach; s >= 0; --s) counts[static_cast<std::size_t>(s + r)] += counts[static_cast<std::size_t>(s)];
      reach += r;
    }
    const std::int64_t dist = std::llabs(2 * observed - total);
    std::uint64_t extreme = 0;
    for (std::int64_t s = 0; s <= total; ++s) {
      if (std::llabs(2 * s - total) >= dist) extreme += counts[static_cast<std::size_t>(s)];
    }
    res.p_value = std::ldexp(static_cast<double>(extreme), -static_cast<int>(n));
    return res;
  }

  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - ranks.tie_term / 48.0;
  res.p_value = two_sided_normal(std::abs(res.statistic - mean), std::sqrt(std::max(0.0, var)));
  return res;
}

TestResult mann_whitney_u(std::span<const double> a, std::span<const double> b, PValueMode mode) {
  if (a.empty() || b.empty()) throw ContractError("rank-sum test needs two nonempty samples");
  TestResult res;
  res.method = TestMethod::mann_whitney_u;
  const std::size_t n1 = a.size(), n2 = b.size(), n = n1 + n2;
  res.n1 = n1;
  res.n2 = n2;

  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  for (double v : pooled) {
    if (std::isnan(v)) throw ContractError("rank-sum test given a NaN value");
  }
  const Ranks ranks = doubled_midranks(pooled);
  std::int64_t total = 0, r1 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += ranks.doubled[i];
    if (i < n1) r1 += ranks.doubled[i];
  }
  const double d1 = static_cast<double>(n1), d2 = static_cast<double>(n2), dn = static_cast<double>(n);
  res.statistic = static_cast<double>(r1) / 2.0 - d1 * (d1 + 1.0) / 2.0;

  res.exact = use_exact(mode, n, kExactRankSumMax, 60);
  if (res.exact) {
    // ways[c][s]: subsets of size c with doubled rank sum s.
    const auto width = static_cast<std::size_t>(total) + 1;
    std::vector<std::vector<std::uint64_t>> ways(n1 + 1, std::vector<std::uint64_t>(width, 0));
    ways[0][0] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<std::size_t>(ranks.doubled[i]);
      for (std::size_t c = std::min(i + 1, n1); c >= 1; --c) {
        for (std::size_t s = width; s-- > r;) ways[c][s] += ways[c - 1][s - r];
      }
    }
    const auto in = static_cast<std::int64_t>(n), in1 = static_cast<std::int64_t>(n1);
    const std::int64_t dist = std::llabs(in * r1 - in1 * total);
    std::uint64_t extreme = 0, all = 0;
    for (std::size_t s = 0; s < width; ++s) {
      all += ways[n1][s];
      if (std::llabs(in * static_cast<std::int64_t>(s) - in1 * total) >= dist) extreme += ways[n1][s];
    }
    res.p_value = static_cast<double>(extreme) / static_cast<double>(all);
    return res;
  }

  const double mean = d1 * d2 / 2.0;
  const double var = d1 * d2 / 12.0 * ((dn + 1.0) - ranks.tie_term / (dn * (dn - 1.0)));
  res.p_value = two_sided_normal(std::abs(res.statistic - mean), std::sqrt(std::max(0.0, var)));
  return res;
}

MedianIqr median_iqr(std::span<const double> sample) {
  if (sample.empty()) throw ContractError("median of an empty sample");
  std::vector<double> sorted(sample.begin(), sample.end());
  std::sort(sorted.begin(), sorted.end());
  return {percentile_sorted(sorted, 0.5), percentile_sorted(sorted, 0.25), percentile_sorted(sorted, 0.75)};
}

}  // namespace mvseg
