#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <utility>

#include "mvseg/views.hpp"
#include "mvseg/volume.hpp"

namespace mvseg {

struct BrainMaskOptions {
  /// Threshold as a fraction of the volume maximum; ignored when
  /// absolute_threshold is set.
  double threshold_fraction = 0.05;
  std::optional<double> absolute_threshold;
  /// Radius (voxels) of the ball used for binary closing; 0 disables it.
  int closing_radius = 2;
};

struct BrainMask {
  Volume mask;
  std::size_t voxel_count = 0;
};

/// Threshold, close with a ball, keep the largest 6-connected component.
/// Throws PreprocessError("no brain voxels") when nothing survives.
BrainMask compute_brain_mask(const Volume& image, const BrainMaskOptions& options = {});

struct IntensityStats {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

IntensityStats brain_statistics(const Volume& image, const BrainMask& brain);

/// (image - mean) / stddev over every voxel, with mean and population stddev
/// taken over brain voxels only. Throws PreprocessError for fewer than two
/// brain voxels or constant brain intensity.
Volume zscore_normalize(const Volume& image, const BrainMask& brain);

/// Bookkeeping to undo crop_pad_inplane. Offsets are signed per array axis:
/// positive values were padded, negative values were cropped.
struct CropPadRecord {
  Shape3 original_shape{0, 0, 0};
  std::array<std::size_t, 2> target{0, 0};
  std::size_t normal_axis = 2;
  std::array<std::array<long, 2>, 3> offsets{};  // {low, high} per array axis

  Shape3 output_shape() const;
};

/// Center-crop or zero-pad every slice perpendicular to `axis` to
/// target = (rows, cols); an odd difference puts the extra voxel on the
/// high-index side.
std::pair<Volume, CropPadRecord> crop_pad_inplane(const Volume& v, std::array<std::size_t, 2> target,
                                                  ViewAxis axis);

/// Restore the original shape; voxels lost to cropping come back as 0.
/// Throws ContractError when `v` does not have the recorded target shape.
Volume invert_crop_pad(const Volume& v, const CropPadRecord& record);

}  // namespace mvseg
