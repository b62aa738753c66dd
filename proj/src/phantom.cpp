#include "mvseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "mvseg/error.hpp"
#include "mvseg/nifti.hpp"
#include "mvseg/rng.hpp"

namespace mvseg {

std::string_view to_string(ScannerStyle style) {
  switch (style) {
    case ScannerStyle::style_A: return "style_A";
    case ScannerStyle::style_B: return "style_B";
    case ScannerStyle::style_C: return "style_C";
    case ScannerStyle::style_D: return "style_D";
  }
  return "style_A";
}

std::optional<ScannerStyle> parse_scanner_style(std::string_view text) {
  for (auto s : kAllStyles) {
    const auto name = to_string(s);
    if (text == name || text == name.substr(6)) return s;
  }
  return std::nullopt;
}

StylePreset style_preset(ScannerStyle style) {
  switch (style) {
    case ScannerStyle::style_A: return {0.60, 3.0, 1.00};  // high contrast
    case ScannerStyle::style_B: return {0.45, 4.0, 1.15};
    case ScannerStyle::style_C: return {0.30, 5.0, 0.90};  // low contrast
    case ScannerStyle::style_D: return {0.45, 6.0, 1.05};
  }
  return {0.45, 4.0, 1.0};
}

void PhantomSpec::validate() const {
  for (double s : spacing) {
    if (!(s > 0.0)) throw ConfigError("phantom spacing must be positive");
  }
  for (std::size_t d : shape) {
    if (d < 16) throw ConfigError("phantom shape must be at least 16 voxels per axis");
  }
  if (sheet_thickness < spacing[0]) {
    throw ConfigError("sheet thickness " + std::to_string(sheet_thickness) + " mm is below one voxel (" +
                      std::to_string(spacing[0]) + " mm)");
  }
  if (sheet_count != 1 && sheet_count != 2) throw ConfigError("sheet_count must be 1 or 2");
  if (!(white_level > grey_level && grey_level > 0.0)) throw ConfigError("need white_level > grey_level > 0");
}

std::pair<std::size_t, std::size_t> sheet_slab(std::size_t axial_slices) {
  const auto margin = static_cast<std::size_t>(std::floor(0.2 * static_cast<double>(axial_slices)));
  return {margin, axial_slices - margin};
}

namespace {

struct Geometry {
  double cx, cy, cz;       // brain centre (mm, relative to grid centre)
  double a, b, c;          // brain semi-axes
  double sheet_x;          // mean |x| of the sheets
  double ly, lz;           // sheet half extents along y and z
  double amp1, amp2;       // surface perturbation amplitudes
  double fy, fz, ph1, ph2; // perturbation frequencies and phases
  double tilt;             // dx/dz slope of the sheets
  double tex_phase[3];
};

Geometry draw_geometry(const PhantomSpec& spec, Rng& rng) {
  Geometry g{};
  const double e0 = static_cast<double>(spec.shape[0]) * spec.spacing[0];
  const double e1 = static_cast<double>(spec.shape[1]) * spec.spacing[1];
  const double e2 = static_cast<double>(spec.shape[2]) * spec.spacing[2];
  g.cx = rng.uniform(-1.0, 1.0) * spec.spacing[0];
  g.cy = rng.uniform(-1.0, 1.0) * spec.spacing[1];
  g.cz = rng.uniform(-1.0, 1.0) * spec.spacing[2];
  g.a = 0.42 * e0 * rng.uniform(0.95, 1.05);
  g.b = 0.45 * e1 * rng.uniform(0.95, 1.05);
  g.c = 0.40 * e2 * rng.uniform(0.95, 1.05);
  g.sheet_x = 0.55 * g.a * rng.uniform(0.96, 1.04);
  g.ly = 0.35 * g.b * rng.uniform(0.9, 1.1);
  g.lz = 0.22 * e2 * rng.uniform(0.9, 1.0);
  g.amp1 = 0.035 * g.a * rng.uniform(0.5, 1.0);
  g.amp2 = 0.025 * g.a * rng.uniform(0.5, 1.0);
  g.fy = rng.uniform(0.8, 1.4) * std::numbers::pi / g.ly;
  g.fz = rng.uniform(0.8, 1.4) * std::numbers::pi / g.lz;
  g.ph1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  g.ph2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  g.tilt = rng.uniform(-0.08, 0.08);
  for (double& p : g.tex_phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return g;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng geo_rng(derive_seed(spec.seed, 1));
  const Geometry g = draw_geometry(spec, geo_rng);
  const StylePreset style = style_preset(spec.style);

  Phantom out{Volume(spec.shape, spec.spacing, VolumeKind::image), Volume(spec.shape, spec.spacing, VolumeKind::mask)};
  const auto [slab_lo, slab_hi] = sheet_slab(spec.shape[2]);
  const double half = spec.sheet_thickness / 2.0;
  const double grey = spec.grey_level, white = spec.white_level;
  const double sheet_level = white - style.contrast_gap * (white - grey);

  // Tissue map: 0 background, 1 white, 2 grey, 3 sheet.
  std::vector<unsigned char> tissue(out.image.size(), 0);
  for (std::size_t k = 0; k < spec.shape[2]; ++k) {
    const double z = (static_cast<double>(k) + 0.5 - spec.shape[2] / 2.0) * spec.spacing[2] - g.cz;
    for (std::size_t j = 0; j < spec.shape[1]; ++j) {
      const double y = (static_cast<double>(j) + 0.5 - spec.shape[1] / 2.0) * spec.spacing[1] - g.cy;
      // Sheet surface for this (y, z): x = +/-(sheet_x + perturbation + tilt z).
      const double ey = y / g.ly, ez = z / g.lz;
      const bool in_sheet_domain = ey * ey + ez * ez <= 1.0 && k >= slab_lo && k < slab_hi;
      const double surface = g.sheet_x + g.amp1 * std::sin(g.fy * y + g.ph1) + g.amp2 * std::sin(g.fz * z + g.ph2) +
                             g.tilt * z;
      for (std::size_t i = 0; i < spec.shape[0]; ++i) {
        const double x = (static_cast<double>(i) + 0.5 - spec.shape[0] / 2.0) * spec.spacing[0] - g.cx;
        const double r2 = (x / g.a) * (x / g.a) + (y / g.b) * (y / g.b) + (z / g.c) * (z / g.c);
        if (r2 > 1.0) continue;
        const std::size_t idx = out.image.index(i, j, k);
        const double ax = std::abs(x);
        unsigned char t = 1;
        if (r2 > 0.85 * 0.85) t = 2;  // cortex
        const double px = (ax - 0.35 * g.a) / (0.10 * g.a), py = y / (0.28 * g.b), pz = z / (0.25 * g.c);
        if (px * px + py * py + pz * pz <= 1.0) t = 2;  // deep nucleus
        if (ax >= 0.70 * g.a && ax <= 0.80 * g.a && std::abs(y) <= 0.5 * g.b && std::abs(z) <= 0.35 * g.c) t = 2;
        const bool right = x >= 0.0;
        if (in_sheet_domain && (right || spec.sheet_count == 2) && std::abs(ax - surface) <= half) t = 3;
        tissue[idx] = t;
      }
    }
  }

  Rng noise_rng(spec.noise_seed.value_or(derive_seed(spec.seed, 2)));
  auto img = out.image.data();
  auto lab = out.label.data();
  for (std::size_t k = 0, idx = 0; k < spec.shape[2]; ++k) {
    for (std::size_t j = 0; j < spec.shape[1]; ++j) {
      for (std::size_t i = 0; i < spec.shape[0]; ++i, ++idx) {
        const unsigned char t = tissue[idx];
        if (t == 0) continue;
        lab[idx] = t == 3 ? 1.0f : 0.0f;
        double level = t == 1 ? white : t == 2 ? grey : sheet_level;
        // Gentle low-frequency texture within tissue classes.
        level *= 1.0 + 0.03 * std::sin(0.21 * static_cast<double>(i) + g.tex_phase[0]) *
                           std::sin(0.17 * static_cast<double>(j) + g.tex_phase[1]) *
                           std::sin(0.19 * static_cast<double>(k) + g.tex_phase[2]);
        const double v = style.gain * (level + style.noise_sigma * noise_rng.normal());
        img[idx] = static_cast<float>(std::max(v, 1.0));
      }
    }
  }
  return out;
}

Manifest generate_cohort(const std::map<ScannerStyle, std::size_t>& counts, std::uint64_t seed,
                         const std::filesystem::path& out_dir, const PhantomSpec& base) {
  base.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "labels", ec);
  if (ec) throw IoError("cannot create cohort directory " + out_dir.string() + ": " + ec.message());

  Manifest manifest;
  manifest.base_dir = out_dir;
  for (const auto& [style, n] : counts) {
    const auto style_index = static_cast<std::uint64_t>(style);
    const std::string letter(to_string(style).substr(6));
    for (std::size_t i = 0; i < n; ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "%s_%03zu", letter.c_str(), i);
      PhantomSpec spec = base;
      spec.style = style;
      spec.seed = derive_seed(seed, style_index * 100000 + i);
      spec.noise_seed.reset();
      const Phantom ph = generate_phantom(spec);
      const std::string image_rel = "images/" + std::string(id) + ".nii.gz";
      const std::string label_rel = "labels/" + std::string(id) + ".nii.gz";
      save_volume(ph.image, out_dir / image_rel);
      save_volume(ph.label, out_dir / label_rel);
      manifest.subjects.push_back({id, std::string(to_string(style)), image_rel, label_rel});
    }
  }
  write_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace mvseg
