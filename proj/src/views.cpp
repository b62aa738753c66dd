#include "mvseg/views.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mvseg/error.hpp"
#include "mvseg/log.hpp"

namespace mvseg {

std::string_view to_string(ViewAxis axis) {
  switch (axis) {
    case ViewAxis::axial: return "axial";
    case ViewAxis::coronal: return "coronal";
    case ViewAxis::sagittal: return "sagittal";
  }
  return "unknown";
}

std::optional<ViewAxis> parse_view_axis(std::string_view text) {
  if (text == "axial" || text == "A" || text == "a") return ViewAxis::axial;
  if (text == "coronal" || text == "C" || text == "c") return ViewAxis::coronal;
  if (text == "sagittal" || text == "S" || text == "s") return ViewAxis::sagittal;
  return std::nullopt;
}

AnatomicalAxis normal_direction(ViewAxis axis) {
  switch (axis) {
    case ViewAxis::axial: return AnatomicalAxis::inferior_superior;
    case ViewAxis::coronal: return AnatomicalAxis::posterior_anterior;
    case ViewAxis::sagittal: return AnatomicalAxis::left_right;
  }
  return AnatomicalAxis::inferior_superior;
}

std::size_t view_array_axis(const Volume& v, ViewAxis axis) {
  const auto a = array_axis_for(v.axes(), normal_direction(axis));
  if (!a) {
    throw ContractError("volume has no axis-order metadata for the " + std::string(to_string(axis)) + " view");
  }
  return *a;
}

std::array<std::size_t, 2> inplane_axes(std::size_t normal_axis) {
  switch (normal_axis) {
    case 0: return {1, 2};
    case 1: return {0, 2};
    default: return {0, 1};
  }
}

namespace {

// Strides (in voxels) of the three array axes for NIfTI order.
std::array<std::size_t, 3> strides(const Shape3& shape) { return {1, shape[0], shape[0] * shape[1]}; }

void warn_if_anisotropic(const Spacing3& s) {
  const double lo = std::min({s[0], s[1], s[2]});
  const double hi = std::max({s[0], s[1], s[2]});
  if (hi > lo * 1.01) {
    log::warn("anisotropic voxel spacing (" + std::to_string(s[0]) + ", " + std::to_string(s[1]) + ", " +
              std::to_string(s[2]) + " mm); slicing without resampling");
  }
}

}  // namespace

ViewStack to_view(const Volume& v, ViewAxis axis) {
  const std::size_t normal = view_array_axis(v, axis);
  warn_if_anisotropic(v.spacing());
  const auto [a0, a1] = inplane_axes(normal);
  const auto& shape = v.shape();
  const auto st = strides(shape);

  ViewStack stack;
  stack.axis = axis;
  stack.source_shape = shape;
  stack.normal_axis = normal;
  stack.spacing = v.spacing();
  stack.kind = v.kind();
  stack.axes = v.axes();
  stack.slices.resize(shape[normal]);

  const auto data = v.data();
  for (std::size_t s = 0; s < shape[normal]; ++s) {
    Slice2D& slice = stack.slices[s];
    slice.rows = shape[a0];
    slice.cols = shape[a1];
    slice.data.resize(slice.rows * slice.cols);
    const std::size_t base = s * st[normal];
    for (std::size_t p = 0; p < slice.rows; ++p) {
      for (std::size_t q = 0; q < slice.cols; ++q) {
        slice.data[p * slice.cols + q] = data[base + p * st[a0] + q * st[a1]];
      }
    }
  }
  return stack;
}

Volume from_view(const ViewStack& stack) {
  if (stack.normal_axis > 2) throw ContractError("view stack has an invalid normal axis");
  const auto& shape = stack.source_shape;
  const std::size_t normal = stack.normal_axis;
  const auto [a0, a1] = inplane_axes(normal);
  if (stack.slices.size() != shape[normal]) {
    throw ContractError("view stack has " + std::to_string(stack.slices.size()) + " slices, expected " +
                        std::to_string(shape[normal]));
  }
  for (std::size_t s = 0; s < stack.slices.size(); ++s) {
    const Slice2D& slice = stack.slices[s];
    if (slice.rows != shape[a0] || slice.cols != shape[a1] || slice.data.size() != slice.rows * slice.cols) {
      throw ContractError("slice " + std::to_string(s) + " of the view stack has an inconsistent shape");
    }
  }

  Volume v(shape, stack.spacing, stack.kind, stack.axes);
  const auto st = strides(shape);
  auto data = v.data();
  for (std::size_t s = 0; s < stack.slices.size(); ++s) {
    const Slice2D& slice = stack.slices[s];
    const std::size_t base = s * st[normal];
    for (std::size_t p = 0; p < slice.rows; ++p) {
      for (std::size_t q = 0; q < slice.cols; ++q) {
        data[base + p * st[a0] + q * st[a1]] = slice.data[p * slice.cols + q];
      }
    }
  }
  return v;
}

}  // namespace mvseg
