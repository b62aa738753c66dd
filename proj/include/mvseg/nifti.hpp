#pragma once

#include <optional>
#include <string>

#include "mvseg/volume.hpp"

namespace mvseg {

/// Read a NIfTI-1 volume (.nii or .nii.gz, either byte order).
///
/// When `kind` is not given it is taken from the file: volumes written by
/// save_volume record their kind in the description field, other files are
/// treated as masks if stored as unsigned 8-bit and as images otherwise.
/// Masks are binarised (any nonzero value becomes 1). Axis order comes from
/// the sform (preferred) or qform; files with neither carry no axis order.
///
/// Throws IoError for unreadable files and FormatError for anything that is
/// not a 3D NIfTI-1 volume.
Volume load_volume(const std::string& path, std::optional<VolumeKind> kind = std::nullopt);

/// Write a NIfTI-1 volume; gzip-compressed when the path ends in ".gz".
/// Masks are stored as uint8, images and probability maps as float32.
/// Throws IoError when the file cannot be created.
void save_volume(const Volume& volume, const std::string& path);

}  // namespace mvseg
