#include "mvseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mvseg/error.hpp"

namespace mvseg {
namespace {

void check_pair(const Volume& g, const Volume& p) {
  if (g.shape() != p.shape()) throw ContractError("metric inputs differ in shape");
}

struct Counts {
  std::size_t g = 0, p = 0, both = 0;
};

Counts count(const Volume& g, const Volume& p) {
  check_pair(g, p);
  Counts c;
  const auto gd = g.data(), pd = p.data();
  for (std::size_t i = 0; i < gd.size(); ++i) {
    const bool a = gd[i] != 0.0f, b = pd[i] != 0.0f;
    c.g += a;
    c.p += b;
    c.both += a && b;
  }
  return c;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Squared distance to the nearest foreground voxel of `mask`, for every
// voxel. Separable: exact nearest along axis 0, then minima over axes 1 and
// 2 scanning outward until the axis term alone cannot improve the result.
std::vector<double> squared_edt(const std::vector<unsigned char>& mask, const Shape3& shape, const Spacing3& sp) {
  const std::size_t d0 = shape[0], d1 = shape[1], d2 = shape[2];
  std::vector<double> f(mask.size(), kInf);

  for (std::size_t k = 0; k < d2; ++k) {
    for (std::size_t j = 0; j < d1; ++j) {
      const std::size_t base = d0 * (j + d1 * k);
      // Forward then backward sweep for the nearest index on the line.
      long last = -1;
      std::vector<long> nearest(d0, -1);
      for (std::size_t i = 0; i < d0; ++i) {
        if (mask[base + i]) last = static_cast<long>(i);
        nearest[i] = last;
      }
      last = -1;
      for (std::size_t i = d0; i-- > 0;) {
        if (mask[base + i]) last = static_cast<long>(i);
        if (last >= 0 && (nearest[i] < 0 || last - static_cast<long>(i) < static_cast<long>(i) - nearest[i])) {
          nearest[i] = last;
        }
      }
      for (std::size_t i = 0; i < d0; ++i) {
        if (nearest[i] < 0) continue;
        const double dx = static_cast<double>(static_cast<long>(i) - nearest[i]) * sp[0];
        f[base + i] = dx * dx;
      }
    }
  }

  std::vector<double> line, out;
  auto pass = [&](std::size_t n, std::size_t stride, double s, auto&& line_starts) {
    line.resize(n);
    out.resize(n);
    line_starts([&](std::size_t start) {
      for (std::size_t t = 0; t < n; ++t) line[t] = f[start + t * stride];
      for (std::size_t t = 0; t < n; ++t) {
        double best = line[t];
        for (std::size_t r = 1; r < n; ++r) {
          const double dr = static_cast<double>(r) * s;
          const double step = dr * dr;
          if (step >= best) break;
          if (t >= r && line[t - r] + step < best) best = line[t - r] + step;
          if (t + r < n && line[t + r] + step < best) best = line[t + r] + step;
          if (t < r && t + r >= n) break;
        }
        out[t] = best;
      }
      for (std::size_t t = 0; t < n; ++t) f[start + t * stride] = out[t];
    });
  };

  pass(d1, d0, sp[1], [&](auto&& fn) {
    for (std::size_t k = 0; k < d2; ++k)
      for (std::size_t i = 0; i < d0; ++i) fn(i + d0 * d1 * k);
  });
  pass(d2, d0 * d1, sp[2], [&](auto&& fn) {
    for (std::size_t j = 0; j < d1; ++j)
      for (std::size_t i = 0; i < d0; ++i) fn(i + d0 * j);
  });
  return f;
}

std::vector<unsigned char> point_set(const Volume& v, DistanceSet set) {
  const auto& s = v.shape();
  const auto d = v.data();
  std::vector<unsigned char> fg(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) fg[i] = d[i] != 0.0f;
  if (set == DistanceSet::full) return fg;

  std::vector<unsigned char> surf(fg.size(), 0);
  for (std::size_t k = 0; k < s[2]; ++k) {
    for (std::size_t j = 0; j < s[1]; ++j) {
      for (std::size_t i = 0; i < s[0]; ++i) {
        const std::size_t idx = v.index(i, j, k);
        if (!fg[idx]) continue;
        const bool edge = i == 0 || j == 0 || k == 0 || i + 1 == s[0] || j + 1 == s[1] || k + 1 == s[2];
        surf[idx] = edge || !fg[idx - 1] || !fg[idx + 1] || !fg[idx - s[0]] || !fg[idx + s[0]] ||
                    !fg[idx - s[0] * s[1]] || !fg[idx + s[0] * s[1]];
      }
    }
  }
  return surf;
}

}  // namespace

double volumetric_similarity(const Volume& g, const Volume& p) {
  const Counts c = count(g, p);
  if (c.g + c.p == 0) return 1.0;
  const double diff = c.g > c.p ? static_cast<double>(c.g - c.p) : static_cast<double>(c.p - c.g);
  return 1.0 - diff / static_cast<double>(c.g + c.p);
}

double dice_coefficient(const Volume& g, const Volume& p) {
  const Counts c = count(g, p);
  if (c.g + c.p == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.g + c.p);
}

double percentile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ContractError("percentile of an empty sample");
  const double h = static_cast<double>(sorted.size() - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

std::vector<double> directed_distances(const Volume& from, const Volume& to, DistanceSet set) {
  check_pair(from, to);
  if (from.spacing() != to.spacing()) throw ContractError("metric inputs differ in spacing");
  const auto src = point_set(from, set);
  const auto dst = point_set(to, set);
  if (std::find(dst.begin(), dst.end(), 1) == dst.end()) throw MetricError("HD undefined for empty mask");
  const auto sq = squared_edt(dst, to.shape(), to.spacing());
  std::vector<double> out;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i]) out.push_back(std::sqrt(sq[i]));
  }
  return out;
}

double hausdorff95(const Volume& g, const Volume& p, DistanceSet set) {
  check_pair(g, p);
  if (g.spacing() != p.spacing()) throw ContractError("metric inputs differ in spacing");
  if (g.count_nonzero() == 0 || p.count_nonzero() == 0) throw MetricError("HD undefined for empty mask");
  auto a = directed_distances(g, p, set);
  auto b = directed_distances(p, g, set);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return std::max(percentile_sorted(a, 0.95), percentile_sorted(b, 0.95));
}

MetricTriple evaluate_subject(const Volume& g, const Volume& p, std::optional<Spacing3> spacing) {
  check_pair(g, p);
  MetricTriple out;
  out.vs = volumetric_similarity(g, p);
  out.dsc = dice_coefficient(g, p);
  try {
    if (spacing) {
      Volume gs = g, ps = p;
      gs.set_spacing(*spacing);
      ps.set_spacing(*spacing);
      out.hd95 = hausdorff95(gs, ps);
    } else {
      out.hd95 = hausdorff95(g, p);
    }
  } catch (const MetricError& e) {
    out.hd95_error = e.what();
  }
  return out;
}

}  // namespace mvseg
