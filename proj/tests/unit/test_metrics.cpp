#include <cmath>

#include "doctest.h"
#include "mvseg/error.hpp"
#include "mvseg/metrics.hpp"
#include "mvseg/rng.hpp"
#include "../support/oracles.hpp"

using namespace mvseg;

namespace {

Volume mask_of(Shape3 s, Spacing3 sp = {1, 1, 1}) { return Volume(s, sp, VolumeKind::mask); }

std::vector<float> raw(const Volume& v) { return {v.data().begin(), v.data().end()}; }

Volume random_mask(Rng& rng, Shape3 s, Spacing3 sp, double density) {
  Volume v = mask_of(s, sp);
  for (auto& x : v.data()) x = rng.uniform01() < density ? 1.0f : 0.0f;
  return v;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("volumetric similarity examples") {
    Volume g = mask_of({10, 10, 2}), p = mask_of({10, 10, 2});
    for (int i = 0; i < 100; ++i) g.data()[i] = 1.0f;
    for (int i = 0; i < 80; ++i) p.data()[100 + i] = 1.0f;
    CHECK(volumetric_similarity(g, p) == doctest::Approx(1.0 - 20.0 / 180.0).epsilon(1e-15));
    CHECK(volumetric_similarity(g, g) == 1.0);
    Volume g50 = mask_of({10, 10, 2}), empty = mask_of({10, 10, 2});
    for (int i = 0; i < 50; ++i) g50.data()[i] = 1.0f;
    CHECK(volumetric_similarity(g50, empty) == 0.0);
    CHECK(volumetric_similarity(empty, empty) == 1.0);
  }

  TEST_CASE("dice examples") {
    Volume g = mask_of({10, 10, 2}), p = mask_of({10, 10, 2});
    for (int i = 0; i < 100; ++i) g.data()[i] = 1.0f;
    for (int i = 40; i < 120; ++i) p.data()[i] = 1.0f;
    CHECK(dice_coefficient(g, p) == doctest::Approx(120.0 / 180.0).epsilon(1e-15));
    Volume d = mask_of({10, 10, 2});
    for (int i = 150; i < 160; ++i) d.data()[i] = 1.0f;
    CHECK(dice_coefficient(g, d) == 0.0);
    CHECK(dice_coefficient(g, g) == 1.0);
    const Volume e = mask_of({10, 10, 2});
    CHECK(dice_coefficient(e, e) == 1.0);
    CHECK_THROWS_AS(dice_coefficient(g, mask_of({10, 10, 3})), ContractError);
  }

  TEST_CASE("hd95 examples") {
    Volume g = mask_of({5, 2, 2}), p = mask_of({5, 2, 2});
    g.at(0, 0, 0) = 1.0f;
    p.at(3, 0, 0) = 1.0f;
    CHECK(hausdorff95(g, p) == 3.0);
    CHECK(hausdorff95(g, g) == 0.0);

    Rng rng(3);
    Volume a = mask_of({12, 12, 6}), b = mask_of({12, 12, 6});
    for (int n = 0; n < 10;) {
      const std::size_t i = rng.uniform_index(11), j = rng.uniform_index(11), k = rng.uniform_index(6);
      if (a.at(i, j, k) != 0.0f) continue;
      a.at(i, j, k) = 1.0f;
      b.at(i + 1, j + 1, k) = 1.0f;
      ++n;
    }
    const double h = hausdorff95(a, b);
    CHECK(h == oracle::hd95(raw(a), raw(b), a.shape(), {1, 1, 1}));
    CHECK(h <= std::sqrt(2.0));
  }

  TEST_CASE("hd95 errors") {
    Volume g = mask_of({4, 4, 4}), e = mask_of({4, 4, 4});
    g.at(1, 1, 1) = 1.0f;
    CHECK_THROWS_AS(hausdorff95(g, e), MetricError);
    CHECK_THROWS_AS(hausdorff95(e, g), MetricError);
    CHECK_THROWS_AS(hausdorff95(g, mask_of({4, 4, 5})), ContractError);
    CHECK_THROWS_AS(hausdorff95(g, mask_of({4, 4, 4}, {1, 1, 2})), ContractError);
  }

  TEST_CASE("type-7 percentile") {
    const std::vector<double> x{1, 2, 3, 4, 5};
    CHECK(percentile_sorted(x, 0.5) == 3.0);
    CHECK(percentile_sorted(x, 0.95) == doctest::Approx(4.8));
    CHECK(percentile_sorted(x, 0.0) == 1.0);
    CHECK(percentile_sorted(x, 1.0) == 5.0);
    const std::vector<double> one{7.5};
    CHECK(percentile_sorted(one, 0.95) == 7.5);
  }

  TEST_CASE("exact agreement with the all-pairs oracle") {
    Rng rng(101);
    for (int trial = 0; trial < 60; ++trial) {
      const Shape3 s{2 + rng.uniform_index(19), 2 + rng.uniform_index(19), 2 + rng.uniform_index(19)};
      const Spacing3 sp{rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0)};
      const double dg = rng.uniform(0.005, 0.3), dp = rng.uniform(0.005, 0.3);
      Volume g = random_mask(rng, s, sp, dg), p = random_mask(rng, s, sp, dp);
      g.data()[rng.uniform_index(g.size())] = 1.0f;
      p.data()[rng.uniform_index(p.size())] = 1.0f;
      const auto vg = oracle::voxels(raw(g), s), vp = oracle::voxels(raw(p), s);
      REQUIRE(directed_distances(g, p) == oracle::all_pairs_nearest(vg, vp, sp));
      REQUIRE(hausdorff95(g, p) == oracle::hd95(raw(g), raw(p), s, sp));
      const auto c = oracle::set_counts(raw(g), raw(p));
      CHECK(dice_coefficient(g, p) == doctest::Approx(2.0 * c.both / double(c.g + c.p)).epsilon(1e-12));
      CHECK(volumetric_similarity(g, p) ==
            doctest::Approx(1.0 - std::abs(double(c.g) - double(c.p)) / double(c.g + c.p)).epsilon(1e-12));
    }
  }

  TEST_CASE("surface distances use boundary voxels only") {
    Volume g = mask_of({9, 9, 9}), p = mask_of({9, 9, 9});
    for (std::size_t k = 2; k < 7; ++k)
      for (std::size_t j = 2; j < 7; ++j)
        for (std::size_t i = 2; i < 7; ++i) g.at(i, j, k) = 1.0f;
    p.at(4, 4, 4) = 1.0f;
    // Full set: the centre matches itself; surface: the centre is 2 from the shell.
    CHECK(directed_distances(p, g, DistanceSet::full) == std::vector<double>{0.0});
    CHECK(directed_distances(p, g, DistanceSet::surface) == std::vector<double>{2.0});
    CHECK(directed_distances(g, p, DistanceSet::surface).size() == 125 - 27);
  }

  TEST_CASE("symmetry, translation invariance and spacing scaling") {
    Rng rng(55);
    for (int trial = 0; trial < 20; ++trial) {
      const Shape3 s{14, 12, 10};
      const Spacing3 sp{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
      Volume g = mask_of(s, sp), p = mask_of(s, sp);
      for (std::size_t k = 0; k < 8; ++k)
        for (std::size_t j = 0; j < 9; ++j)
          for (std::size_t i = 0; i < 10; ++i) {
            if (rng.uniform01() < 0.15) g.at(i, j, k) = 1.0f;
            if (rng.uniform01() < 0.15) p.at(i, j, k) = 1.0f;
          }
      g.at(0, 0, 0) = 1.0f;
      p.at(1, 1, 1) = 1.0f;

      CHECK(volumetric_similarity(g, p) == volumetric_similarity(p, g));
      CHECK(dice_coefficient(g, p) == dice_coefficient(p, g));
      CHECK(hausdorff95(g, p) == hausdorff95(p, g));

      Volume gs = mask_of(s, sp), ps = mask_of(s, sp);
      for (std::size_t k = 0; k < 8; ++k)
        for (std::size_t j = 0; j < 9; ++j)
          for (std::size_t i = 0; i < 10; ++i) {
            gs.at(i + 3, j + 2, k + 1) = g.at(i, j, k);
            ps.at(i + 3, j + 2, k + 1) = p.at(i, j, k);
          }
      CHECK(volumetric_similarity(gs, ps) == volumetric_similarity(g, p));
      CHECK(dice_coefficient(gs, ps) == dice_coefficient(g, p));
      CHECK(hausdorff95(gs, ps) == hausdorff95(g, p));

      const double c = rng.uniform(0.2, 5.0);
      Volume gc = g, pc = p;
      gc.set_spacing({sp[0] * c, sp[1] * c, sp[2] * c});
      pc.set_spacing(gc.spacing());
      CHECK(hausdorff95(gc, pc) == doctest::Approx(c * hausdorff95(g, p)).epsilon(1e-12));
      CHECK(dice_coefficient(gc, pc) == dice_coefficient(g, p));
      CHECK(volumetric_similarity(gc, pc) == volumetric_similarity(g, p));
    }
  }

  TEST_CASE("evaluate_subject composes the three metrics") {
    Rng rng(8);
    const Volume g = random_mask(rng, {20, 20, 20}, {1, 1, 1}, 0.1);
    const Volume p = random_mask(rng, {20, 20, 20}, {1, 1, 1}, 0.1);
    const MetricTriple t = evaluate_subject(g, p);
    CHECK(t.vs == volumetric_similarity(g, p));
    CHECK(t.dsc == dice_coefficient(g, p));
    REQUIRE(t.hd95.has_value());
    CHECK(*t.hd95 == hausdorff95(g, p));

    const MetricTriple same = evaluate_subject(g, g);
    CHECK(same.vs == 1.0);
    CHECK(same.hd95 == 0.0);
    CHECK(same.dsc == 1.0);

    const MetricTriple none = evaluate_subject(g, g.zeros_like(VolumeKind::mask));
    CHECK(none.vs == 0.0);
    CHECK(none.dsc == 0.0);
    CHECK_FALSE(none.hd95.has_value());
    CHECK(none.hd95_error.find("empty") != std::string::npos);

    const MetricTriple scaled = evaluate_subject(g, p, Spacing3{2, 2, 2});
    CHECK(*scaled.hd95 == doctest::Approx(2.0 * *t.hd95).epsilon(1e-12));
  }
}
