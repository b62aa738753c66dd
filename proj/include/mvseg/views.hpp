#pragma once

#include <cstddef>
#include <optional>
#include <string_view>
#include <vector>

#include "mvseg/volume.hpp"

namespace mvseg {

enum class ViewAxis { axial, coronal, sagittal };

inline constexpr ViewAxis kAllViews[] = {ViewAxis::axial, ViewAxis::coronal, ViewAxis::sagittal};

std::string_view to_string(ViewAxis axis);

/// Accepts "axial"/"coronal"/"sagittal" and the one-letter forms A/C/S.
std::optional<ViewAxis> parse_view_axis(std::string_view text);

/// Anatomical direction perpendicular to the slices of a view.
AnatomicalAxis normal_direction(ViewAxis axis);

/// Array axis of `v` perpendicular to the view's slices. Throws ContractError
/// when the volume has no usable axis-order metadata.
std::size_t view_array_axis(const Volume& v, ViewAxis axis);

/// The two array axes spanning a slice, in ascending order.
std::array<std::size_t, 2> inplane_axes(std::size_t normal_axis);

struct Slice2D {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;  // row-major, rows x cols

  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// Slices of a volume taken perpendicular to one anatomical axis, in
/// ascending voxel order along that axis, plus what from_view() needs to
/// reassemble the volume.
struct ViewStack {
  std::vector<Slice2D> slices;
  ViewAxis axis = ViewAxis::axial;
  Shape3 source_shape{0, 0, 0};
  std::size_t normal_axis = 2;
  Spacing3 spacing{1.0, 1.0, 1.0};
  VolumeKind kind = VolumeKind::image;
  std::optional<AxisOrder> axes;

  std::size_t n() const { return slices.size(); }
};

/// Pure index permutation: voxel (i,j,k) lands at (p,q) of slice s, where s
/// is the coordinate along the view's normal axis and (p,q) are the two
/// remaining coordinates in ascending axis order. Warns on anisotropic
/// spacing (no resampling is done).
ViewStack to_view(const Volume& v, ViewAxis axis);

/// Exact inverse of to_view. Throws ContractError on inconsistent stacks.
Volume from_view(const ViewStack& stack);

}  // namespace mvseg
