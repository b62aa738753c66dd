#include <cmath>
#include <cstring>
#include <set>

#include "doctest.h"
#include "mvseg/error.hpp"
#include "mvseg/nifti.hpp"
#include "mvseg/phantom.hpp"
#include "../support/temp_dir.hpp"

using namespace mvseg;

namespace {

bool same_bits(const Volume& a, const Volume& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

// Length of the labelled run through (i,j,k) along `axis`.
std::size_t run_length(const Volume& m, std::size_t i, std::size_t j, std::size_t k, int axis) {
  std::array<long, 3> p{long(i), long(j), long(k)};
  const auto s = m.shape();
  auto inside = [&](std::array<long, 3> q) {
    return q[0] >= 0 && q[1] >= 0 && q[2] >= 0 && q[0] < long(s[0]) && q[1] < long(s[1]) && q[2] < long(s[2]) &&
           m.at(std::size_t(q[0]), std::size_t(q[1]), std::size_t(q[2])) != 0.0f;
  };
  std::size_t len = 1;
  for (int dir : {-1, 1}) {
    auto q = p;
    for (q[axis] += dir; inside(q); q[axis] += dir) ++len;
  }
  return len;
}

}  // namespace

TEST_SUITE("phantom") {
  TEST_CASE("style names") {
    for (auto s : kAllStyles) CHECK(parse_scanner_style(to_string(s)) == s);
    CHECK(parse_scanner_style("C") == ScannerStyle::style_C);
    CHECK_FALSE(parse_scanner_style("style_Z").has_value());
    // Contrast gap ordering: high, medium, low, medium.
    CHECK(style_preset(ScannerStyle::style_A).contrast_gap > style_preset(ScannerStyle::style_B).contrast_gap);
    CHECK(style_preset(ScannerStyle::style_B).contrast_gap > style_preset(ScannerStyle::style_C).contrast_gap);
    CHECK(style_preset(ScannerStyle::style_D).contrast_gap == style_preset(ScannerStyle::style_B).contrast_gap);
  }

  TEST_CASE("default phantoms are claustrum-sized and inside the slab") {
    const auto [lo, hi] = sheet_slab(64);
    CHECK(lo == 12);
    CHECK(hi == 52);
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      PhantomSpec spec;
      spec.seed = seed;
      spec.style = kAllStyles[seed % 4];
      const Phantom ph = generate_phantom(spec);
      CHECK(ph.image.kind() == VolumeKind::image);
      CHECK(ph.label.kind() == VolumeKind::mask);
      CHECK(ph.image.shape() == spec.shape);
      const std::size_t n = ph.label.count_nonzero();
      CHECK(n >= 300);
      CHECK(n <= 3000);
      std::size_t left = 0, right = 0;
      for (std::size_t k = 0; k < 64; ++k)
        for (std::size_t j = 0; j < 64; ++j)
          for (std::size_t i = 0; i < 64; ++i) {
            if (ph.label.at(i, j, k) == 0.0f) continue;
            REQUIRE(k >= lo);
            REQUIRE(k < hi);
            (i < 32 ? left : right) += 1;
          }
      CHECK(left > 0);
      CHECK(right > 0);
    }
  }

  TEST_CASE("sheets are thin") {
    for (std::uint64_t seed = 10; seed < 14; ++seed) {
      PhantomSpec spec;
      spec.seed = seed;
      const Phantom ph = generate_phantom(spec);
      const auto bound = static_cast<std::size_t>(std::ceil(spec.sheet_thickness / 1.0)) + 1;
      for (std::size_t k = 0; k < 64; ++k)
        for (std::size_t j = 0; j < 64; ++j)
          for (std::size_t i = 0; i < 64; ++i) {
            if (ph.label.at(i, j, k) == 0.0f) continue;
            std::size_t shortest = run_length(ph.label, i, j, k, 0);
            for (int a = 1; a < 3; ++a) shortest = std::min(shortest, run_length(ph.label, i, j, k, a));
            REQUIRE(shortest <= bound);
          }
    }
  }

  TEST_CASE("determinism and noise-seed independence of the label") {
    PhantomSpec spec;
    spec.seed = 99;
    spec.style = ScannerStyle::style_C;
    const Phantom a = generate_phantom(spec), b = generate_phantom(spec);
    CHECK(same_bits(a.image, b.image));
    CHECK(same_bits(a.label, b.label));
    spec.noise_seed = 12345;
    const Phantom c = generate_phantom(spec);
    CHECK(same_bits(a.label, c.label));
    CHECK_FALSE(same_bits(a.image, c.image));
    spec.style = ScannerStyle::style_A;
    CHECK(same_bits(generate_phantom(spec).label, a.label));
  }

  TEST_CASE("sheet contrast sits between the tissue levels") {
    PhantomSpec spec;
    spec.seed = 3;
    const Phantom ph = generate_phantom(spec);
    double sum = 0;
    std::size_t n = 0, background = 0;
    for (std::size_t i = 0; i < ph.image.size(); ++i) {
      if (ph.label.data()[i] != 0.0f) {
        sum += ph.image.data()[i];
        ++n;
      }
      background += ph.image.data()[i] == 0.0f;
    }
    const double mean = sum / n;
    CHECK(mean > spec.grey_level);
    CHECK(mean < spec.white_level);
    CHECK(background > 0);
  }

  TEST_CASE("single sheet and configuration errors") {
    PhantomSpec spec;
    spec.sheet_count = 1;
    const Phantom one = generate_phantom(spec);
    std::size_t left = 0;
    for (std::size_t k = 0; k < 64; ++k)
      for (std::size_t j = 0; j < 64; ++j)
        for (std::size_t i = 0; i < 32; ++i) left += one.label.at(i, j, k) != 0.0f;
    CHECK((left == 0 || left == one.label.count_nonzero()));

    PhantomSpec thin;
    thin.sheet_thickness = 0.8;
    CHECK_THROWS_AS(generate_phantom(thin), ConfigError);
    PhantomSpec small;
    small.shape = {8, 64, 64};
    CHECK_THROWS_AS(generate_phantom(small), ConfigError);
    PhantomSpec three;
    three.sheet_count = 3;
    CHECK_THROWS_AS(generate_phantom(three), ConfigError);
  }

  TEST_CASE("cohort layout") {
    TempDir dir("cohort");
    PhantomSpec base;
    base.shape = {24, 24, 24};
    const std::map<ScannerStyle, std::size_t> counts{{ScannerStyle::style_A, 2},
                                                     {ScannerStyle::style_B, 0},
                                                     {ScannerStyle::style_C, 1},
                                                     {ScannerStyle::style_D, 2}};
    const Manifest m = generate_cohort(counts, 5, dir.path(), base);
    REQUIRE(m.subjects.size() == 5);
    std::set<std::string> ids, scanners;
    for (const auto& s : m.subjects) {
      ids.insert(s.subject_id);
      scanners.insert(s.scanner_id);
      CHECK(std::filesystem::exists(m.resolve(s.image_path)));
      REQUIRE(s.label_path.has_value());
      const Volume label = load_volume(m.resolve(*s.label_path).string());
      CHECK(label.kind() == VolumeKind::mask);
      CHECK(label.shape() == base.shape);
    }
    CHECK(ids.size() == 5);
    CHECK(scanners == std::set<std::string>{"style_A", "style_C", "style_D"});
    CHECK(m.subjects[0].subject_id == "A_000");
    const Manifest back = read_manifest(dir.path() / "manifest.csv");
    CHECK(back.subjects.size() == 5);

    TempDir dir2("cohort");
    const Manifest again = generate_cohort(counts, 5, dir2.path(), base);
    const Volume x = load_volume(m.resolve(m.subjects[3].image_path).string());
    const Volume y = load_volume(again.resolve(again.subjects[3].image_path).string());
    CHECK(same_bits(x, y));
  }

  TEST_CASE("cohort with the clinical scanner proportions") {
    TempDir dir("cohort");
    PhantomSpec base;
    base.shape = {16, 16, 16};
    const Manifest m = generate_cohort({{ScannerStyle::style_A, 15},
                                        {ScannerStyle::style_B, 46},
                                        {ScannerStyle::style_C, 103},
                                        {ScannerStyle::style_D, 17}},
                                       1, dir.path(), base);
    CHECK(m.subjects.size() == 181);
    std::map<std::string, std::size_t> per;
    for (const auto& s : m.subjects) ++per[s.scanner_id];
    CHECK(per == std::map<std::string, std::size_t>{{"style_A", 15}, {"style_B", 46}, {"style_C", 103}, {"style_D", 17}});
  }
}
