#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvseg/volume.hpp"

namespace mvseg {

enum class DistanceSet {
  full,     // every foreground voxel (default)
  surface,  // foreground voxels with a 6-neighbour outside the mask or grid
};

struct MetricTriple {
  double vs = 0.0;
  std::optional<double> hd95;  // empty when undefined
  double dsc = 0.0;
  std::string hd95_error;      // reason when hd95 is empty
};

/// 1 - |V_G - V_P| / (V_G + V_P); 1.0 when both masks are empty.
double volumetric_similarity(const Volume& g, const Volume& p);

/// 2|G n P| / (|G| + |P|); 1.0 when both masks are empty.
double dice_coefficient(const Volume& g, const Volume& p);

/// Symmetric 95th-percentile Hausdorff distance in mm. For every voxel of one
/// set the distance to the nearest voxel of the other set is taken, the
/// type-7 95th percentile of each direction is computed, and the larger of
/// the two is returned. Throws MetricError when either mask is empty and
/// ContractError on shape or spacing mismatch.
double hausdorff95(const Volume& g, const Volume& p, DistanceSet set = DistanceSet::full);

/// Per-voxel distances (mm) from each voxel of `from` to the nearest voxel of
/// `to`, in storage order of `from`'s voxels. Exact: squared distances are
/// accumulated as ((dx*sx)^2 + (dy*sy)^2) + (dz*sz)^2 in double.
std::vector<double> directed_distances(const Volume& from, const Volume& to, DistanceSet set = DistanceSet::full);

/// Linear interpolation between order statistics (type 7). `sorted` must be
/// ascending and nonempty; q in [0, 1].
double percentile_sorted(std::span<const double> sorted, double q);

/// The three metrics with per-field failure: an undefined HD95 is reported
/// in hd95_error rather than thrown. The spacing override, when given,
/// replaces both volumes' spacing.
MetricTriple evaluate_subject(const Volume& g, const Volume& p, std::optional<Spacing3> spacing = std::nullopt);

}  // namespace mvseg
