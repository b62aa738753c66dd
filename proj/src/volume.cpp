#include "mvseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mvseg/error.hpp"

namespace mvseg {

std::string_view to_string(VolumeKind kind) {
  switch (kind) {
    case VolumeKind::image: return "image";
    case VolumeKind::mask: return "mask";
    case VolumeKind::probability: return "probability";
  }
  return "unknown";
}

namespace {

void check_spacing(const Spacing3& spacing) {
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw ContractError("voxel spacing must be strictly positive, got " + std::to_string(s));
    }
  }
}

std::size_t voxel_count(const Shape3& shape) { return shape[0] * shape[1] * shape[2]; }

}  // namespace

Volume::Volume(Shape3 shape, Spacing3 spacing, VolumeKind kind, std::optional<AxisOrder> axes)
    : shape_(shape), spacing_(spacing), kind_(kind), axes_(axes), data_(voxel_count(shape), 0.0f) {
  check_spacing(spacing_);
}

Volume::Volume(Shape3 shape, Spacing3 spacing, VolumeKind kind, std::vector<float> data,
               std::optional<AxisOrder> axes)
    : shape_(shape), spacing_(spacing), kind_(kind), axes_(axes), data_(std::move(data)) {
  check_spacing(spacing_);
  if (data_.size() != voxel_count(shape_)) {
    throw ContractError("volume data has " + std::to_string(data_.size()) + " voxels, shape needs " +
                        std::to_string(voxel_count(shape_)));
  }
}

void Volume::set_spacing(Spacing3 spacing) {
  check_spacing(spacing);
  spacing_ = spacing;
}

Volume Volume::zeros_like(VolumeKind kind) const { return Volume(shape_, spacing_, kind, axes_); }

std::size_t Volume::count_nonzero() const {
  return static_cast<std::size_t>(
      std::count_if(data_.begin(), data_.end(), [](float v) { return v != 0.0f; }));
}

void Volume::validate() const {
  check_spacing(spacing_);
  if (kind_ == VolumeKind::mask) {
    for (float v : data_) {
      if (v != 0.0f && v != 1.0f) throw ContractError("mask voxel outside {0,1}");
    }
  } else if (kind_ == VolumeKind::probability) {
    for (float v : data_) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("probability voxel outside [0,1]");
    }
  }
}

std::optional<std::size_t> array_axis_for(const std::optional<AxisOrder>& axes,
                                          AnatomicalAxis direction) {
  if (!axes) return std::nullopt;
  for (std::size_t a = 0; a < 3; ++a) {
    if ((*axes)[a] == direction) return a;
  }
  return std::nullopt;
}

}  // namespace mvseg
