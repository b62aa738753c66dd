#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace mvseg {

enum class VolumeKind { image, mask, probability };

std::string_view to_string(VolumeKind kind);

/// World direction an array axis runs along.
enum class AnatomicalAxis : unsigned char { left_right, posterior_anterior, inferior_superior };

/// For each of the three array axes, the anatomical direction it follows.
using AxisOrder = std::array<AnatomicalAxis, 3>;

inline constexpr AxisOrder kRasOrder{AnatomicalAxis::left_right, AnatomicalAxis::posterior_anterior,
                                     AnatomicalAxis::inferior_superior};

using Shape3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

/// Dense 3D scalar grid; axis 0 varies fastest (NIfTI storage order).
class Volume {
 public:
  Volume() = default;
  Volume(Shape3 shape, Spacing3 spacing, VolumeKind kind,
         std::optional<AxisOrder> axes = kRasOrder);
  Volume(Shape3 shape, Spacing3 spacing, VolumeKind kind, std::vector<float> data,
         std::optional<AxisOrder> axes = kRasOrder);

  const Shape3& shape() const { return shape_; }
  const Spacing3& spacing() const { return spacing_; }
  VolumeKind kind() const { return kind_; }
  const std::optional<AxisOrder>& axes() const { return axes_; }

  void set_kind(VolumeKind kind) { kind_ = kind; }
  void set_spacing(Spacing3 spacing);
  void set_axes(std::optional<AxisOrder> axes) { axes_ = axes; }

  std::size_t size() const { return data_.size(); }
  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return i + shape_[0] * (j + shape_[1] * k);
  }
  float& at(std::size_t i, std::size_t j, std::size_t k) { return data_[index(i, j, k)]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return data_[index(i, j, k)]; }

  /// Zero-filled volume with the same shape, spacing and axes.
  Volume zeros_like(VolumeKind kind) const;

  std::size_t count_nonzero() const;

  /// Throws ContractError when the kind's value-range invariant is violated.
  void validate() const;

 private:
  Shape3 shape_{0, 0, 0};
  Spacing3 spacing_{1.0, 1.0, 1.0};
  VolumeKind kind_ = VolumeKind::image;
  std::optional<AxisOrder> axes_ = kRasOrder;
  std::vector<float> data_;
};

/// Array axis (0..2) that runs along `direction`, if the volume carries axis
/// metadata containing it.
std::optional<std::size_t> array_axis_for(const std::optional<AxisOrder>& axes,
                                          AnatomicalAxis direction);

}  // namespace mvseg
