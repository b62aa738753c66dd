#include <cmath>
#include <queue>

#include "doctest.h"
#include "mvseg/error.hpp"
#include "mvseg/preprocess.hpp"
#include "mvseg/rng.hpp"

using namespace mvseg;

namespace {

Volume ball_volume(Shape3 shape, double radius, float value) {
  Volume v(shape, {1, 1, 1}, VolumeKind::image);
  const double c[3] = {(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0, (shape[2] - 1) / 2.0};
  for (std::size_t k = 0; k < shape[2]; ++k)
    for (std::size_t j = 0; j < shape[1]; ++j)
      for (std::size_t i = 0; i < shape[0]; ++i) {
        const double d2 = (i - c[0]) * (i - c[0]) + (j - c[1]) * (j - c[1]) + (k - c[2]) * (k - c[2]);
        if (d2 <= radius * radius) v.at(i, j, k) = value;
      }
  return v;
}

// Breadth-first 6-connected labelling; returns the voxel indices of the
// largest component of `fg`.
std::vector<std::size_t> largest_component(const std::vector<bool>& fg, Shape3 s) {
  std::vector<int> label(fg.size(), -1);
  std::vector<std::size_t> best;
  int next = 0;
  for (std::size_t start = 0; start < fg.size(); ++start) {
    if (!fg[start] || label[start] >= 0) continue;
    std::vector<std::size_t> comp;
    std::queue<std::size_t> q;
    q.push(start);
    label[start] = next;
    while (!q.empty()) {
      const std::size_t v = q.front();
      q.pop();
      comp.push_back(v);
      const std::size_t i = v % s[0], j = (v / s[0]) % s[1], k = v / (s[0] * s[1]);
      const long d[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
      for (const auto& o : d) {
        const long ni = long(i) + o[0], nj = long(j) + o[1], nk = long(k) + o[2];
        if (ni < 0 || nj < 0 || nk < 0 || ni >= long(s[0]) || nj >= long(s[1]) || nk >= long(s[2])) continue;
        const std::size_t w = std::size_t(ni) + s[0] * (std::size_t(nj) + s[1] * std::size_t(nk));
        if (fg[w] && label[w] < 0) {
          label[w] = next;
          q.push(w);
        }
      }
    }
    if (comp.size() > best.size()) best = comp;
    ++next;
  }
  std::sort(best.begin(), best.end());
  return best;
}

std::vector<std::size_t> ones(const Volume& m) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m.data()[i] != 0.0f) out.push_back(i);
  return out;
}

BrainMask mask_from(const Volume& m) { return {m, m.count_nonzero()}; }

}  // namespace

TEST_SUITE("preprocess") {
  TEST_CASE("brain mask of a ball is the ball") {
    const Volume img = ball_volume({32, 32, 32}, 10.0, 100.0f);
    const BrainMask b = compute_brain_mask(img);
    CHECK(b.voxel_count == img.count_nonzero());
    CHECK(b.mask.kind() == VolumeKind::mask);
    CHECK(ones(b.mask) == ones(img));
  }

  TEST_CASE("all-zero volume has no brain") {
    Volume img({8, 8, 8}, {1, 1, 1}, VolumeKind::image);
    CHECK_THROWS_AS(compute_brain_mask(img), PreprocessError);
  }

  TEST_CASE("two blobs keep only the large one") {
    Volume img({30, 30, 30}, {1, 1, 1}, VolumeKind::image);
    for (std::size_t k = 2; k < 12; ++k)
      for (std::size_t j = 2; j < 12; ++j)
        for (std::size_t i = 2; i < 12; ++i) img.at(i, j, k) = 80.0f;  // 1000 voxels
    for (std::size_t i = 20; i < 30; ++i) img.at(i, 25, 25) = 90.0f;   // 10 voxels
    REQUIRE(img.count_nonzero() == 1010);
    BrainMaskOptions opt;
    opt.closing_radius = 0;
    const BrainMask b = compute_brain_mask(img, opt);
    std::vector<bool> fg(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) fg[i] = img.data()[i] > 0.05f * 90.0f;
    CHECK(ones(b.mask) == largest_component(fg, img.shape()));
    CHECK(b.voxel_count == 1000);
    // Closing with the default ball leaves the blobs apart as well.
    CHECK(compute_brain_mask(img).voxel_count == 1000);
  }

  TEST_CASE("brain mask scales with the image and the threshold") {
    Rng rng(3);
    Volume img = ball_volume({24, 24, 24}, 9.0, 1.0f);
    for (auto& x : img.data())
      if (x > 0) x = static_cast<float>(rng.uniform(20.0, 120.0));
    for (double c : {2.0, 8.0, 1000.0}) {
      Volume scaled = img;
      for (auto& x : scaled.data()) x = static_cast<float>(x * c);
      BrainMaskOptions a, b;
      a.absolute_threshold = 30.0;
      b.absolute_threshold = 30.0 * c;
      CHECK(ones(compute_brain_mask(img, a).mask) == ones(compute_brain_mask(scaled, b).mask));
    }
    CHECK(ones(compute_brain_mask(img).mask) == ones(compute_brain_mask(img).mask));
  }

  TEST_CASE("z-score of {2,4,6}") {
    Volume img({3, 1, 1}, {1, 1, 1}, VolumeKind::image, {2.0f, 4.0f, 6.0f});
    Volume m({3, 1, 1}, {1, 1, 1}, VolumeKind::mask, {1.0f, 1.0f, 1.0f});
    const BrainMask b = mask_from(m);
    const IntensityStats st = brain_statistics(img, b);
    CHECK(st.mean == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(st.stddev == doctest::Approx(std::sqrt(8.0 / 3.0)).epsilon(1e-12));
    const Volume z = zscore_normalize(img, b);
    const double e = std::sqrt(1.5);
    CHECK(z.data()[0] == doctest::Approx(-e).epsilon(1e-6));
    CHECK(z.data()[1] == doctest::Approx(0.0));
    CHECK(z.data()[2] == doctest::Approx(e).epsilon(1e-6));
  }

  TEST_CASE("z-score on random volumes, all voxels transformed, idempotent") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      Volume img({12, 10, 9}, {1, 1, 1}, VolumeKind::image);
      Volume m = img.zeros_like(VolumeKind::mask);
      for (std::size_t i = 0; i < img.size(); ++i) {
        img.data()[i] = static_cast<float>(rng.uniform(-50.0, 400.0));
        if (rng.uniform01() < 0.4) m.data()[i] = 1.0f;
      }
      const BrainMask b = mask_from(m);
      const Volume z = zscore_normalize(img, b);
      double s = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i)
        if (m.data()[i] != 0.0f) s += z.data()[i];
      const double mean = s / b.voxel_count;
      for (std::size_t i = 0; i < z.size(); ++i)
        if (m.data()[i] != 0.0f) ss += (z.data()[i] - mean) * (z.data()[i] - mean);
      CHECK(std::abs(mean) <= 1e-6);
      CHECK(std::abs(std::sqrt(ss / b.voxel_count) - 1.0) <= 1e-6);

      const IntensityStats st = brain_statistics(img, b);
      const std::size_t outside = [&] {
        for (std::size_t i = 0; i < m.size(); ++i)
          if (m.data()[i] == 0.0f) return i;
        return std::size_t{0};
      }();
      CHECK(z.data()[outside] ==
            doctest::Approx((img.data()[outside] - st.mean) / st.stddev).epsilon(1e-5));

      const Volume zz = zscore_normalize(z, b);
      for (std::size_t i = 0; i < z.size(); ++i)
        if (m.data()[i] != 0.0f) REQUIRE(std::abs(zz.data()[i] - z.data()[i]) <= 1e-5);
    }
  }

  TEST_CASE("z-score errors") {
    Volume img({4, 1, 1}, {1, 1, 1}, VolumeKind::image, {5, 5, 5, 9});
    Volume m({4, 1, 1}, {1, 1, 1}, VolumeKind::mask, {1, 1, 1, 0});
    CHECK_THROWS_AS(zscore_normalize(img, mask_from(m)), PreprocessError);
    Volume one({4, 1, 1}, {1, 1, 1}, VolumeKind::mask, {1, 0, 0, 0});
    CHECK_THROWS_AS(zscore_normalize(img, mask_from(one)), PreprocessError);
  }

  TEST_CASE("crop/pad offsets") {
    Volume v({170, 190, 3}, {1, 1, 1}, VolumeKind::image);
    auto [out, rec] = crop_pad_inplane(v, {180, 180}, ViewAxis::axial);
    CHECK(out.shape() == Shape3{180, 180, 3});
    CHECK(rec.offsets[0] == std::array<long, 2>{5, 5});
    CHECK(rec.offsets[1] == std::array<long, 2>{-5, -5});
    CHECK(rec.offsets[2] == std::array<long, 2>{0, 0});
    CHECK(rec.output_shape() == out.shape());

    Volume sq({180, 180, 2}, {1, 1, 1}, VolumeKind::image);
    auto [same, r2] = crop_pad_inplane(sq, {180, 180}, ViewAxis::axial);
    CHECK(same.shape() == sq.shape());
    CHECK(r2.offsets[0] == std::array<long, 2>{0, 0});
    CHECK(r2.offsets[1] == std::array<long, 2>{0, 0});

    Volume odd({179, 180, 2}, {1, 1, 1}, VolumeKind::image);
    CHECK(crop_pad_inplane(odd, {180, 180}, ViewAxis::axial).second.offsets[0] == std::array<long, 2>{0, 1});
    Volume odd_crop({181, 180, 2}, {1, 1, 1}, VolumeKind::image);
    CHECK(crop_pad_inplane(odd_crop, {180, 180}, ViewAxis::axial).second.offsets[0] == std::array<long, 2>{0, -1});

    // Coronal slices span array axes 0 and 2.
    Volume c({170, 4, 190}, {1, 1, 1}, VolumeKind::image);
    auto [co, crec] = crop_pad_inplane(c, {180, 180}, ViewAxis::coronal);
    CHECK(co.shape() == Shape3{180, 4, 180});
    CHECK(crec.normal_axis == 1);
  }

  TEST_CASE("crop/pad voxel placement and inversion") {
    Rng rng(5);
    Volume m({170, 190, 64}, {1, 1, 1}, VolumeKind::mask);
    for (std::size_t k = 0; k < 64; ++k)
      for (std::size_t j = 5; j < 185; ++j)
        for (std::size_t i = 0; i < 170; ++i) m.at(i, j, k) = rng.uniform01() < 0.5 ? 1.0f : 0.0f;
    auto [out, rec] = crop_pad_inplane(m, {180, 180}, ViewAxis::axial);
    CHECK(out.kind() == VolumeKind::mask);
    CHECK(out.at(5, 0, 7) == m.at(0, 5, 7));
    CHECK(out.at(4, 10, 7) == 0.0f);
    const Volume back = invert_crop_pad(out, rec);
    CHECK(back.shape() == m.shape());
    CHECK(std::equal(back.data().begin(), back.data().end(), m.data().begin()));

    Volume big({200, 200, 2}, {1, 1, 1}, VolumeKind::image);
    for (auto& x : big.data()) x = 1.0f;
    auto [cropped, crec] = crop_pad_inplane(big, {180, 180}, ViewAxis::axial);
    const Volume restored = invert_crop_pad(cropped, crec);
    CHECK(restored.shape() == big.shape());
    CHECK(restored.count_nonzero() == 180 * 180 * 2);
    CHECK(restored.at(9, 100, 0) == 0.0f);
    CHECK(restored.at(10, 10, 0) == 1.0f);
    CHECK(restored.at(190, 100, 1) == 0.0f);
    CHECK(restored.at(189, 189, 1) == 1.0f);

    Volume wrong({181, 180, 2}, {1, 1, 1}, VolumeKind::image);
    CHECK_THROWS_AS(invert_crop_pad(wrong, crec), ContractError);
  }
}
