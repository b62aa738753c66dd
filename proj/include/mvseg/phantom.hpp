#pragma once

// Synthetic head volumes with two thin, mirrored, sagittally oriented grey
// sheets inside white matter, flanked by a deep grey nucleus medially and an
// insular grey band laterally. Scanner styles vary the sheet contrast, noise
// level and global intensity gain.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include "mvseg/manifest.hpp"
#include "mvseg/volume.hpp"

namespace mvseg {

enum class ScannerStyle { style_A, style_B, style_C, style_D };

inline constexpr ScannerStyle kAllStyles[] = {ScannerStyle::style_A, ScannerStyle::style_B, ScannerStyle::style_C,
                                              ScannerStyle::style_D};

std::string_view to_string(ScannerStyle style);
std::optional<ScannerStyle> parse_scanner_style(std::string_view text);  // "style_A" or "A"

struct StylePreset {
  double contrast_gap;  // sheet sits this far from white towards grey (0..1)
  double noise_sigma;   // Gaussian noise, before gain
  double gain;          // global intensity scale
};

StylePreset style_preset(ScannerStyle style);

struct PhantomSpec {
  Shape3 shape{64, 64, 64};
  Spacing3 spacing{1.0, 1.0, 1.0};
  double sheet_thickness = 1.5;  // mm
  int sheet_count = 2;           // 1 (right only) or 2 (bilateral)
  double grey_level = 60.0;
  double white_level = 100.0;
  ScannerStyle style = ScannerStyle::style_A;
  std::uint64_t seed = 0;                  // geometry
  std::optional<std::uint64_t> noise_seed;  // defaults to a stream derived from seed

  /// Throws ConfigError for a sheet thinner than one voxel along the
  /// left-right axis, non-positive spacing or a shape below 16 voxels.
  void validate() const;
};

struct Phantom {
  Volume image;  // kind=image, RAS axis order
  Volume label;  // kind=mask
};

Phantom generate_phantom(const PhantomSpec& spec);

/// Axial slice range [first, last) the sheets may occupy: the middle 60%.
std::pair<std::size_t, std::size_t> sheet_slab(std::size_t axial_slices);

/// Writes images/<id>.nii.gz and labels/<id>.nii.gz under `out_dir` plus
/// manifest.csv, and returns the manifest. Subject ids are "<letter>_<nnn>",
/// scanner ids the style names; styles with a zero count are absent.
Manifest generate_cohort(const std::map<ScannerStyle, std::size_t>& counts, std::uint64_t seed,
                         const std::filesystem::path& out_dir, const PhantomSpec& base = {});

}  // namespace mvseg
