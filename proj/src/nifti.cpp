#include "mvseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string_view>
#include <vector>

#include "mvseg/error.hpp"

namespace mvseg {
namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

enum DataType : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUint16 = 512,
  kUint32 = 768,
};

constexpr std::string_view kKindTag = "mvseg kind=";

template <class T>
T byteswap_value(T v) {
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  std::reverse(bytes.begin(), bytes.end());
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

template <class T, std::size_t N>
void swap_array(T (&values)[N]) {
  for (auto& v : values) v = byteswap_value(v);
}

void swap_header(Nifti1Header& h) {
  h.sizeof_hdr = byteswap_value(h.sizeof_hdr);
  h.extents = byteswap_value(h.extents);
  h.session_error = byteswap_value(h.session_error);
  swap_array(h.dim);
  h.intent_p1 = byteswap_value(h.intent_p1);
  h.intent_p2 = byteswap_value(h.intent_p2);
  h.intent_p3 = byteswap_value(h.intent_p3);
  h.intent_code = byteswap_value(h.intent_code);
  h.datatype = byteswap_value(h.datatype);
  h.bitpix = byteswap_value(h.bitpix);
  h.slice_start = byteswap_value(h.slice_start);
  swap_array(h.pixdim);
  h.vox_offset = byteswap_value(h.vox_offset);
  h.scl_slope = byteswap_value(h.scl_slope);
  h.scl_inter = byteswap_value(h.scl_inter);
  h.slice_end = byteswap_value(h.slice_end);
  h.cal_max = byteswap_value(h.cal_max);
  h.cal_min = byteswap_value(h.cal_min);
  h.slice_duration = byteswap_value(h.slice_duration);
  h.toffset = byteswap_value(h.toffset);
  h.glmax = byteswap_value(h.glmax);
  h.glmin = byteswap_value(h.glmin);
  h.qform_code = byteswap_value(h.qform_code);
  h.sform_code = byteswap_value(h.sform_code);
  h.quatern_b = byteswap_value(h.quatern_b);
  h.quatern_c = byteswap_value(h.quatern_c);
  h.quatern_d = byteswap_value(h.quatern_d);
  h.qoffset_x = byteswap_value(h.qoffset_x);
  h.qoffset_y = byteswap_value(h.qoffset_y);
  h.qoffset_z = byteswap_value(h.qoffset_z);
  swap_array(h.srow_x);
  swap_array(h.srow_y);
  swap_array(h.srow_z);
}

struct GzCloser {
  void operator()(gzFile_s* f) const {
    if (f) gzclose(f);
  }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

void read_exact(gzFile f, void* dst, std::size_t bytes, const std::string& path) {
  auto* out = static_cast<unsigned char*>(dst);
  while (bytes > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes, 1u << 30));
    const int got = gzread(f, out, chunk);
    if (got <= 0) throw FormatError("truncated NIfTI file: " + path);
    out += got;
    bytes -= static_cast<std::size_t>(got);
  }
}

std::size_t bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUint8:
    case kInt8: return 1;
    case kInt16:
    case kUint16: return 2;
    case kInt32:
    case kUint32:
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: return 0;
  }
}

template <class T>
void convert(const unsigned char* raw, std::size_t n, bool swap, std::vector<float>& out) {
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw + i * sizeof(T), sizeof(T));
    if (swap) v = byteswap_value(v);
    out[i] = static_cast<float>(v);
  }
}

// Dominant world axis of each array axis; nullopt when degenerate.
std::optional<AxisOrder> axes_from_matrix(const double m[3][3]) {
  AxisOrder order{};
  bool used[3] = {false, false, false};
  for (int col = 0; col < 3; ++col) {
    int best = 0;
    for (int row = 1; row < 3; ++row) {
      if (std::fabs(m[row][col]) > std::fabs(m[best][col])) best = row;
    }
    if (m[best][col] == 0.0 || used[best]) return std::nullopt;
    used[best] = true;
    order[col] = static_cast<AnatomicalAxis>(best);
  }
  return order;
}

std::optional<AxisOrder> axes_from_header(const Nifti1Header& h) {
  if (h.sform_code > 0) {
    const double m[3][3] = {{h.srow_x[0], h.srow_x[1], h.srow_x[2]},
                            {h.srow_y[0], h.srow_y[1], h.srow_y[2]},
                            {h.srow_z[0], h.srow_z[1], h.srow_z[2]}};
    return axes_from_matrix(m);
  }
  if (h.qform_code > 0) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    const double m[3][3] = {
        {a * a + b * b - c * c - d * d, 2 * (b * c - a * d), qfac * 2 * (b * d + a * c)},
        {2 * (b * c + a * d), a * a + c * c - b * b - d * d, qfac * 2 * (c * d - a * b)},
        {2 * (b * d - a * c), 2 * (c * d + a * b), qfac * (a * a + d * d - c * c - b * b)}};
    return axes_from_matrix(m);
  }
  return std::nullopt;
}

// Quaternion (b, c, d) and qfac of an orthonormal 3x3 matrix, following the
// reference NIfTI conversion.
void set_quaternion(Nifti1Header& h, double r[3][3]) {
  const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                     r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                     r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
  double qfac = 1.0;
  if (det < 0) {
    qfac = -1.0;
    for (int i = 0; i < 3; ++i) r[i][2] = -r[i][2];
  }
  double a = r[0][0] + r[1][1] + r[2][2] + 1.0;
  double b, c, d;
  if (a > 0.5) {
    a = 0.5 * std::sqrt(a);
    b = 0.25 * (r[2][1] - r[1][2]) / a;
    c = 0.25 * (r[0][2] - r[2][0]) / a;
    d = 0.25 * (r[1][0] - r[0][1]) / a;
  } else {
    const double xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
    const double yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
    const double zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
    if (xd > 1.0) {
      b = 0.5 * std::sqrt(xd);
      c = 0.25 * (r[0][1] + r[1][0]) / b;
      d = 0.25 * (r[0][2] + r[2][0]) / b;
      a = 0.25 * (r[2][1] - r[1][2]) / b;
    } else if (yd > 1.0) {
      c = 0.5 * std::sqrt(yd);
      b = 0.25 * (r[0][1] + r[1][0]) / c;
      d = 0.25 * (r[1][2] + r[2][1]) / c;
      a = 0.25 * (r[0][2] - r[2][0]) / c;
    } else {
      d = 0.5 * std::sqrt(zd);
      b = 0.25 * (r[0][2] + r[2][0]) / d;
      c = 0.25 * (r[1][2] + r[2][1]) / d;
      a = 0.25 * (r[1][0] - r[0][1]) / d;
    }
    if (a < 0.0) {
      b = -b;
      c = -c;
      d = -d;
    }
  }
  h.quatern_b = static_cast<float>(b);
  h.quatern_c = static_cast<float>(c);
  h.quatern_d = static_cast<float>(d);
  h.pixdim[0] = static_cast<float>(qfac);
}

std::optional<VolumeKind> kind_from_description(const Nifti1Header& h) {
  const std::string_view descrip(h.descrip, strnlen(h.descrip, sizeof(h.descrip)));
  if (!descrip.starts_with(kKindTag)) return std::nullopt;
  const auto tag = descrip.substr(kKindTag.size());
  if (tag == "mask") return VolumeKind::mask;
  if (tag == "probability") return VolumeKind::probability;
  if (tag == "image") return VolumeKind::image;
  return std::nullopt;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

Volume load_volume(const std::string& path, std::optional<VolumeKind> kind) {
  if (!std::filesystem::is_regular_file(path)) throw IoError("cannot open volume: " + path);
  GzHandle file(gzopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open volume: " + path);

  Nifti1Header h{};
  const int got = gzread(file.get(), &h, sizeof(h));
  if (got != static_cast<int>(sizeof(h))) throw FormatError("not a NIfTI-1 file (short header): " + path);

  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    if (byteswap_value(h.sizeof_hdr) != 348) throw FormatError("not a NIfTI-1 file: " + path);
    swap_header(h);
    swapped = true;
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0 && std::memcmp(h.magic, "ni1", 4) != 0) {
    throw FormatError("missing NIfTI-1 magic: " + path);
  }
  if (std::memcmp(h.magic, "ni1", 4) == 0) {
    throw FormatError("two-file (.hdr/.img) NIfTI is not supported: " + path);
  }

  const int ndim = h.dim[0];
  if (ndim < 3 || ndim > 7) {
    throw FormatError("expected a 3D volume, file has " + std::to_string(ndim) + " dimensions: " + path);
  }
  for (int d = 1; d <= 3; ++d) {
    if (h.dim[d] < 1) throw FormatError("non-positive dimension in " + path);
  }
  for (int d = 4; d <= ndim; ++d) {
    if (h.dim[d] > 1) throw FormatError("expected a 3D volume, dimension " + std::to_string(d) + " > 1: " + path);
  }

  const std::size_t bpv = bytes_per_voxel(h.datatype);
  if (bpv == 0) throw FormatError("unsupported NIfTI datatype " + std::to_string(h.datatype) + ": " + path);

  const Shape3 shape{static_cast<std::size_t>(h.dim[1]), static_cast<std::size_t>(h.dim[2]),
                     static_cast<std::size_t>(h.dim[3])};
  Spacing3 spacing{std::fabs(h.pixdim[1]), std::fabs(h.pixdim[2]), std::fabs(h.pixdim[3])};
  for (double& s : spacing) {
    if (!(s > 0.0)) s = 1.0;
  }
  const std::size_t n = shape[0] * shape[1] * shape[2];

  const long offset = static_cast<long>(h.vox_offset);
  if (offset < static_cast<long>(sizeof(h))) throw FormatError("invalid vox_offset in " + path);
  if (gzseek(file.get(), offset, SEEK_SET) != offset) throw FormatError("cannot seek to voxel data: " + path);

  std::vector<unsigned char> raw(n * bpv);
  read_exact(file.get(), raw.data(), raw.size(), path);

  std::vector<float> values(n);
  switch (h.datatype) {
    case kUint8: convert<std::uint8_t>(raw.data(), n, false, values); break;
    case kInt8: convert<std::int8_t>(raw.data(), n, false, values); break;
    case kInt16: convert<std::int16_t>(raw.data(), n, swapped, values); break;
    case kUint16: convert<std::uint16_t>(raw.data(), n, swapped, values); break;
    case kInt32: convert<std::int32_t>(raw.data(), n, swapped, values); break;
    case kUint32: convert<std::uint32_t>(raw.data(), n, swapped, values); break;
    case kFloat32: convert<float>(raw.data(), n, swapped, values); break;
    case kFloat64: convert<double>(raw.data(), n, swapped, values); break;
    default: break;
  }

  const VolumeKind resolved =
      kind.value_or(kind_from_description(h).value_or(h.datatype == kUint8 ? VolumeKind::mask : VolumeKind::image));

  if (resolved == VolumeKind::mask) {
    for (float& v : values) v = v != 0.0f ? 1.0f : 0.0f;
  } else if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope) &&
             !(h.scl_slope == 1.0f && h.scl_inter == 0.0f)) {
    for (float& v : values) v = v * h.scl_slope + h.scl_inter;
  }

  Volume volume(shape, spacing, resolved, std::move(values), axes_from_header(h));
  if (resolved == VolumeKind::probability) volume.validate();
  return volume;
}

void save_volume(const Volume& volume, const std::string& path) {
  const std::filesystem::path target(path);
  const auto parent = target.has_parent_path() ? target.parent_path() : std::filesystem::path(".");
  if (!std::filesystem::is_directory(parent)) throw IoError("output directory does not exist: " + parent.string());

  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int d = 0; d < 3; ++d) {
    h.dim[d + 1] = static_cast<std::int16_t>(volume.shape()[d]);
    h.pixdim[d + 1] = static_cast<float>(volume.spacing()[d]);
  }
  for (int d = 4; d < 8; ++d) {
    h.dim[d] = 1;
    h.pixdim[d] = 1.0f;
  }
  for (std::size_t d : volume.shape()) {
    if (d > 32767) throw FormatError("dimension exceeds NIfTI-1 limit: " + path);
  }
  const bool as_mask = volume.kind() == VolumeKind::mask;
  h.datatype = as_mask ? kUint8 : kFloat32;
  h.bitpix = as_mask ? 8 : 32;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // millimetres
  const std::string descrip = std::string(kKindTag) + std::string(to_string(volume.kind()));
  std::memcpy(h.descrip, descrip.data(), std::min(descrip.size(), sizeof(h.descrip) - 1));
  std::memcpy(h.magic, "n+1", 4);

  h.pixdim[0] = 1.0f;
  if (volume.axes()) {
    double rot[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    float* srow[3] = {h.srow_x, h.srow_y, h.srow_z};
    for (int col = 0; col < 3; ++col) {
      const int row = static_cast<int>((*volume.axes())[col]);
      rot[row][col] = 1.0;
      srow[row][col] = static_cast<float>(volume.spacing()[col]);
    }
    set_quaternion(h, rot);
    h.qform_code = 1;
    h.sform_code = 1;
  }

  std::vector<unsigned char> payload;
  const auto data = volume.data();
  if (as_mask) {
    payload.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) payload[i] = data[i] != 0.0f ? 1 : 0;
  } else {
    payload.resize(data.size() * sizeof(float));
    // Native byte order; readers detect it from sizeof_hdr.
    std::memcpy(payload.data(), data.data(), payload.size());
  }

  const bool compressed = ends_with(path, ".gz");
  GzHandle file(gzopen(path.c_str(), compressed ? "wb6" : "wbT"));
  if (!file) throw IoError("cannot create volume file: " + path);
  const char extension[4] = {0, 0, 0, 0};
  bool ok = gzwrite(file.get(), &h, sizeof(h)) == static_cast<int>(sizeof(h));
  ok = ok && gzwrite(file.get(), extension, 4) == 4;
  std::size_t written = 0;
  while (ok && written < payload.size()) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(payload.size() - written, 1u << 30));
    ok = gzwrite(file.get(), payload.data() + written, chunk) == static_cast<int>(chunk);
    written += chunk;
  }
  gzFile_s* raw_handle = file.release();
  if (gzclose(raw_handle) != Z_OK) ok = false;
  if (!ok) throw IoError("failed writing volume file: " + path);
}

}  // namespace mvseg
