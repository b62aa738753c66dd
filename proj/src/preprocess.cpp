#include "mvseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mvseg/error.hpp"

namespace mvseg {
namespace {

struct Offset3 {
  long di, dj, dk;
};

std::vector<Offset3> ball_offsets(int radius) {
  std::vector<Offset3> out;
  const long r = radius;
  for (long k = -r; k <= r; ++k) {
    for (long j = -r; j <= r; ++j) {
      for (long i = -r; i <= r; ++i) {
        if (i * i + j * j + k * k <= r * r) out.push_back({i, j, k});
      }
    }
  }
  return out;
}

// Binary dilation or erosion of a 0/1 grid; voxels outside the grid count as
// background.
std::vector<unsigned char> morph(const std::vector<unsigned char>& in, const Shape3& shape,
                                 const std::vector<Offset3>& element, bool dilate) {
  const long n0 = static_cast<long>(shape[0]), n1 = static_cast<long>(shape[1]), n2 = static_cast<long>(shape[2]);
  std::vector<unsigned char> out(in.size());
  for (long k = 0; k < n2; ++k) {
    for (long j = 0; j < n1; ++j) {
      for (long i = 0; i < n0; ++i) {
        const std::size_t idx = static_cast<std::size_t>(i + n0 * (j + n1 * k));
        bool result = !dilate;
        for (const auto& o : element) {
          const long ii = i + o.di, jj = j + o.dj, kk = k + o.dk;
          const bool inside = ii >= 0 && ii < n0 && jj >= 0 && jj < n1 && kk >= 0 && kk < n2;
          const bool value = inside && in[static_cast<std::size_t>(ii + n0 * (jj + n1 * kk))] != 0;
          if (dilate && value) {
            result = true;
            break;
          }
          if (!dilate && !value) {
            result = false;
            break;
          }
        }
        out[idx] = result ? 1 : 0;
      }
    }
  }
  return out;
}

// Largest 6-connected component; ties go to the component found first in
// storage order.
std::vector<unsigned char> largest_component(const std::vector<unsigned char>& in, const Shape3& shape) {
  const std::size_t n0 = shape[0], n1 = shape[1], n2 = shape[2];
  std::vector<int> label(in.size(), 0);
  std::vector<std::size_t> queue;
  int best_label = 0;
  std::size_t best_size = 0;
  int next = 0;
  for (std::size_t start = 0; start < in.size(); ++start) {
    if (!in[start] || label[start]) continue;
    ++next;
    std::size_t size = 0;
    queue.clear();
    queue.push_back(start);
    label[start] = next;
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::size_t idx = queue[head];
      ++size;
      const std::size_t i = idx % n0, j = (idx / n0) % n1, k = idx / (n0 * n1);
      auto visit = [&](std::size_t nb) {
        if (in[nb] && !label[nb]) {
          label[nb] = next;
          queue.push_back(nb);
        }
      };
      if (i > 0) visit(idx - 1);
      if (i + 1 < n0) visit(idx + 1);
      if (j > 0) visit(idx - n0);
      if (j + 1 < n1) visit(idx + n0);
      if (k > 0) visit(idx - n0 * n1);
      if (k + 1 < n2) visit(idx + n0 * n1);
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
  }
  std::vector<unsigned char> out(in.size(), 0);
  if (best_label == 0) return out;
  for (std::size_t idx = 0; idx < in.size(); ++idx) out[idx] = label[idx] == best_label ? 1 : 0;
  return out;
}

}  // namespace

BrainMask compute_brain_mask(const Volume& image, const BrainMaskOptions& options) {
  const auto data = image.data();
  double threshold = 0.0;
  if (options.absolute_threshold) {
    threshold = *options.absolute_threshold;
  } else {
    const float max_value = data.empty() ? 0.0f : *std::max_element(data.begin(), data.end());
    threshold = options.threshold_fraction * static_cast<double>(max_value);
  }

  std::vector<unsigned char> bin(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) bin[i] = static_cast<double>(data[i]) > threshold ? 1 : 0;

  if (options.closing_radius > 0) {
    // Closing on a grid padded by the radius, so objects touching the border
    // are neither grown nor eroded there.
    const auto element = ball_offsets(options.closing_radius);
    const auto r = static_cast<std::size_t>(options.closing_radius);
    const Shape3& s = image.shape();
    const Shape3 ps{s[0] + 2 * r, s[1] + 2 * r, s[2] + 2 * r};
    std::vector<unsigned char> padded(ps[0] * ps[1] * ps[2], 0);
    for (std::size_t k = 0; k < s[2]; ++k)
      for (std::size_t j = 0; j < s[1]; ++j)
        for (std::size_t i = 0; i < s[0]; ++i)
          padded[(i + r) + ps[0] * ((j + r) + ps[1] * (k + r))] = bin[i + s[0] * (j + s[1] * k)];
    padded = morph(morph(padded, ps, element, true), ps, element, false);
    for (std::size_t k = 0; k < s[2]; ++k)
      for (std::size_t j = 0; j < s[1]; ++j)
        for (std::size_t i = 0; i < s[0]; ++i)
          bin[i + s[0] * (j + s[1] * k)] = padded[(i + r) + ps[0] * ((j + r) + ps[1] * (k + r))];
  }
  bin = largest_component(bin, image.shape());

  BrainMask brain{image.zeros_like(VolumeKind::mask), 0};
  auto out = brain.mask.data();
  for (std::size_t i = 0; i < bin.size(); ++i) {
    out[i] = bin[i] ? 1.0f : 0.0f;
    brain.voxel_count += bin[i];
  }
  if (brain.voxel_count == 0) throw PreprocessError("no brain voxels");
  return brain;
}

IntensityStats brain_statistics(const Volume& image, const BrainMask& brain) {
  if (brain.mask.shape() != image.shape()) throw ContractError("brain mask shape differs from image shape");
  const auto data = image.data();
  const auto mask = brain.mask.data();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (mask[i] != 0.0f) {
      sum += data[i];
      ++count;
    }
  }
  if (count < 2) throw PreprocessError("brain mask has fewer than two voxels");
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (mask[i] != 0.0f) {
      const double d = data[i] - mean;
      ss += d * d;
    }
  }
  return {mean, std::sqrt(ss / static_cast<double>(count))};
}

Volume zscore_normalize(const Volume& image, const BrainMask& brain) {
  const IntensityStats stats = brain_statistics(image, brain);
  if (!(stats.stddev > 0.0)) throw PreprocessError("constant brain intensity");
  Volume out = image.zeros_like(VolumeKind::image);
  const auto in = image.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) {
    dst[i] = static_cast<float>((in[i] - stats.mean) / stats.stddev);
  }
  return out;
}

Shape3 CropPadRecord::output_shape() const {
  Shape3 out = original_shape;
  for (std::size_t a = 0; a < 3; ++a) {
    out[a] = static_cast<std::size_t>(static_cast<long>(original_shape[a]) + offsets[a][0] + offsets[a][1]);
  }
  return out;
}

namespace {

// Copy the overlap of `src` into `dst` where dst coordinate = src coordinate
// + shift[axis].
void copy_shifted(const Volume& src, Volume& dst, const std::array<long, 3>& shift) {
  const auto& ss = src.shape();
  const auto& ds = dst.shape();
  std::array<long, 3> lo{}, hi{};
  for (std::size_t a = 0; a < 3; ++a) {
    lo[a] = std::max<long>(0, -shift[a]);
    hi[a] = std::min<long>(static_cast<long>(ss[a]), static_cast<long>(ds[a]) - shift[a]);
    if (hi[a] <= lo[a]) return;
  }
  const auto in = src.data();
  auto out = dst.data();
  for (long k = lo[2]; k < hi[2]; ++k) {
    for (long j = lo[1]; j < hi[1]; ++j) {
      const std::size_t s = src.index(static_cast<std::size_t>(lo[0]), static_cast<std::size_t>(j),
                                      static_cast<std::size_t>(k));
      const std::size_t d = dst.index(static_cast<std::size_t>(lo[0] + shift[0]),
                                      static_cast<std::size_t>(j + shift[1]), static_cast<std::size_t>(k + shift[2]));
      std::copy_n(in.begin() + static_cast<long>(s), hi[0] - lo[0], out.begin() + static_cast<long>(d));
    }
  }
}

}  // namespace

std::pair<Volume, CropPadRecord> crop_pad_inplane(const Volume& v, std::array<std::size_t, 2> target,
                                                  ViewAxis axis) {
  if (target[0] == 0 || target[1] == 0) throw ContractError("crop/pad target must be at least 1x1");
  CropPadRecord rec;
  rec.original_shape = v.shape();
  rec.target = target;
  rec.normal_axis = view_array_axis(v, axis);
  const auto plane = inplane_axes(rec.normal_axis);
  for (std::size_t t = 0; t < 2; ++t) {
    const long diff = static_cast<long>(target[t]) - static_cast<long>(v.shape()[plane[t]]);
    // Truncating division keeps the larger half on the high side for both
    // padding (diff > 0) and cropping (diff < 0).
    const long low = diff / 2;
    rec.offsets[plane[t]] = {low, diff - low};
  }

  Volume out(rec.output_shape(), v.spacing(), v.kind(), v.axes());
  copy_shifted(v, out, {rec.offsets[0][0], rec.offsets[1][0], rec.offsets[2][0]});
  return {std::move(out), rec};
}

Volume invert_crop_pad(const Volume& v, const CropPadRecord& record) {
  if (v.shape() != record.output_shape()) {
    throw ContractError("volume shape does not match the crop/pad record");
  }
  Volume out(record.original_shape, v.spacing(), v.kind(), v.axes());
  copy_shifted(v, out, {-record.offsets[0][0], -record.offsets[1][0], -record.offsets[2][0]});
  return out;
}

}  // namespace mvseg
