#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "metta/errors.hpp"
#include "metta/rng.hpp"
#include "metta/tensor.hpp"

namespace metta {

enum class PolicyKind { kCentralCrop, kRandomResizedCropFlip, kFlipGroup, kRot90Group, kMultiScale };

inline std::string to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::kCentralCrop: return "CentralCrop";
    case PolicyKind::kRandomResizedCropFlip: return "RandomResizedCropFlip";
    case PolicyKind::kFlipGroup: return "FlipGroup";
    case PolicyKind::kRot90Group: return "Rot90Group";
    case PolicyKind::kMultiScale: return "MultiScale";
  }
  return "?";
}

inline PolicyKind parse_policy_kind(const std::string& name) {
  for (PolicyKind k : {PolicyKind::kCentralCrop, PolicyKind::kRandomResizedCropFlip, PolicyKind::kFlipGroup,
                       PolicyKind::kRot90Group, PolicyKind::kMultiScale}) {
    if (to_string(k) == name) return k;
  }
  throw ValueError("unknown augmentation policy '" + name + "'");
}

/// A distribution over image transforms. `output_size` of 0 means "same as
/// the source image" for the crop policies.
struct AugmentationPolicy {
  PolicyKind kind = PolicyKind::kCentralCrop;
  double crop_fraction = 0.875;
  double scale_lo = 0.6;
  double scale_hi = 1.0;
  std::size_t output_size = 0;
  std::vector<double> scales;

  static AugmentationPolicy central_crop(double fraction = 0.875, std::size_t size = 0) {
    AugmentationPolicy p;
    p.kind = PolicyKind::kCentralCrop;
    p.crop_fraction = fraction;
    p.output_size = size;
    p.validate();
    return p;
  }
  static AugmentationPolicy random_resized_crop_flip(double lo = 0.6, double hi = 1.0, std::size_t size = 0) {
    AugmentationPolicy p;
    p.kind = PolicyKind::kRandomResizedCropFlip;
    p.scale_lo = lo;
    p.scale_hi = hi;
    p.output_size = size;
    p.validate();
    return p;
  }
  static AugmentationPolicy flip_group() {
    AugmentationPolicy p;
    p.kind = PolicyKind::kFlipGroup;
    return p;
  }
  static AugmentationPolicy rot90_group() {
    AugmentationPolicy p;
    p.kind = PolicyKind::kRot90Group;
    return p;
  }
  static AugmentationPolicy multi_scale(std::vector<double> s = {0.7071067811865476, 1.0, 1.4142135623730951}) {
    AugmentationPolicy p;
    p.kind = PolicyKind::kMultiScale;
    p.scales = std::move(s);
    p.validate();
    return p;
  }

  bool enumerable() const {
    return kind == PolicyKind::kFlipGroup || kind == PolicyKind::kRot90Group || kind == PolicyKind::kMultiScale;
  }
  bool deterministic() const { return kind == PolicyKind::kCentralCrop; }

  void validate() const {
    switch (kind) {
      case PolicyKind::kCentralCrop:
        if (!(crop_fraction > 0.0 && crop_fraction <= 1.0)) throw ValueError("CentralCrop: crop fraction must be in (0, 1]");
        break;
      case PolicyKind::kRandomResizedCropFlip:
        if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0)) {
          throw ValueError("RandomResizedCropFlip: need 0 < s_lo <= s_hi <= 1");
        }
        break;
      case PolicyKind::kMultiScale:
        if (scales.empty()) throw ValueError("MultiScale: scale list is empty");
        for (double s : scales) {
          if (!(s > 0.0)) throw ValueError("MultiScale: scales must be positive");
        }
        break;
      default:
        break;
    }
  }

  /// Stable textual descriptor, e.g. "RandomResizedCropFlip(s_lo=0.6,s_hi=1,size=32)".
  std::string descriptor() const {
    std::ostringstream os;
    os.precision(17);
    os << to_string(kind);
    switch (kind) {
      case PolicyKind::kCentralCrop:
        os << "(fraction=" << crop_fraction << ",size=" << output_size << ")";
        break;
      case PolicyKind::kRandomResizedCropFlip:
        os << "(s_lo=" << scale_lo << ",s_hi=" << scale_hi << ",size=" << output_size << ")";
        break;
      case PolicyKind::kMultiScale:
        os << "(";
        for (std::size_t i = 0; i < scales.size(); ++i) os << (i ? "," : "") << scales[i];
        os << ")";
        break;
      default:
        break;
    }
    return os.str();
  }

  friend bool operator==(const AugmentationPolicy&, const AugmentationPolicy&) = default;
};

struct CropBox {
  std::size_t x0 = 0, y0 = 0, width = 0, height = 0;
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

/// One concrete draw from a policy: crop, bilinear resize, optional
/// horizontal flip, then `quarter_turns` counter-clockwise rotations.
struct TransformParams {
  CropBox box;
  bool flip = false;
  std::size_t out_height = 0, out_width = 0;
  unsigned quarter_turns = 0;
  friend bool operator==(const TransformParams&, const TransformParams&) = default;
};

inline TransformParams identity_transform(std::size_t height, std::size_t width) {
  return TransformParams{{0, 0, width, height}, false, height, width, 0};
}

namespace detail {

inline std::size_t scaled_extent(double scale, std::size_t native) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * static_cast<double>(native))));
}

inline TransformParams central_params(const AugmentationPolicy& p, std::size_t h, std::size_t w) {
  const std::size_t ch = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(p.crop_fraction * h)), 1, h);
  const std::size_t cw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(p.crop_fraction * w)), 1, w);
  const std::size_t oh = p.output_size ? p.output_size : h;
  const std::size_t ow = p.output_size ? p.output_size : w;
  return TransformParams{{(w - cw) / 2, (h - ch) / 2, cw, ch}, false, oh, ow, 0};
}

// Scale of source area in [s_lo, s_hi], log-uniform aspect ratio in [3/4, 4/3],
// up to 10 attempts, then the whole image.
inline TransformParams random_resized_params(const AugmentationPolicy& p, std::size_t h, std::size_t w,
                                             CounterRng& rng) {
  const std::size_t oh = p.output_size ? p.output_size : h;
  const std::size_t ow = p.output_size ? p.output_size : w;
  const double area = static_cast<double>(h * w);
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  TransformParams t{{0, 0, w, h}, false, oh, ow, 0};
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(p.scale_lo, p.scale_hi);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const auto cw = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto ch = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (cw >= 1 && ch >= 1 && cw <= w && ch <= h) {
      const std::size_t x0 = rng.below(w - cw + 1);
      const std::size_t y0 = rng.below(h - ch + 1);
      t.box = CropBox{x0, y0, cw, ch};
      break;
    }
  }
  t.flip = rng.coin();
  return t;
}

}  // namespace detail

/// Draw number `sample_index` for image `image_index`. A pure function of its
/// arguments: the generator is keyed by (seed, image_index, sample_index).
inline TransformParams sample_transform(const AugmentationPolicy& policy, std::size_t src_height,
                                        std::size_t src_width, std::uint64_t global_seed,
                                        std::uint64_t image_index, std::uint64_t sample_index) {
  policy.validate();
  if (src_height == 0 || src_width == 0) throw GeometryError("sample_transform: empty source image");
  CounterRng rng({global_seed, static_cast<std::uint64_t>(Stream::kAugment), image_index, sample_index});
  TransformParams t = identity_transform(src_height, src_width);
  switch (policy.kind) {
    case PolicyKind::kCentralCrop:
      return detail::central_params(policy, src_height, src_width);
    case PolicyKind::kRandomResizedCropFlip:
      return detail::random_resized_params(policy, src_height, src_width, rng);
    case PolicyKind::kFlipGroup:
      t.flip = rng.coin();
      return t;
    case PolicyKind::kRot90Group:
      if (src_height != src_width) throw GeometryError("Rot90Group requires square images");
      t.quarter_turns = static_cast<unsigned>(rng.below(4));
      return t;
    case PolicyKind::kMultiScale: {
      const double s = policy.scales[rng.below(policy.scales.size())];
      t.out_height = detail::scaled_extent(s, src_height);
      t.out_width = detail::scaled_extent(s, src_width);
      return t;
    }
  }
  return t;
}

/// Exact member list of a finite policy: FlipGroup -> {identity, hflip};
/// Rot90Group -> the four rotations; MultiScale -> one full-image resize per scale.
inline std::vector<TransformParams> enumerate_group(const AugmentationPolicy& policy, std::size_t src_height,
                                                    std::size_t src_width) {
  policy.validate();
  std::vector<TransformParams> out;
  const TransformParams id = identity_transform(src_height, src_width);
  switch (policy.kind) {
    case PolicyKind::kFlipGroup:
      out = {id, id};
      out[1].flip = true;
      break;
    case PolicyKind::kRot90Group:
      if (src_height != src_width) throw GeometryError("Rot90Group requires square images");
      for (unsigned k = 0; k < 4; ++k) {
        out.push_back(id);
        out.back().quarter_turns = k;
      }
      break;
    case PolicyKind::kMultiScale:
      for (double s : policy.scales) {
        TransformParams t = id;
        t.out_height = detail::scaled_extent(s, src_height);
        t.out_width = detail::scaled_extent(s, src_width);
        out.push_back(t);
      }
      break;
    default:
      throw ValueError("enumerate_group: policy " + to_string(policy.kind) + " is not enumerable");
  }
  return out;
}

/// Bilinear resize with corner-aligned sampling: destination pixel d maps to
/// source coordinate d * (in - 1) / (out - 1); a single output pixel samples
/// the source center.
inline Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw ShapeError("resize_bilinear: image must be [C,H,W]");
  if (out_h == 0 || out_w == 0) throw GeometryError("resize_bilinear: empty target size");
  const std::size_t channels = image.dim(0), in_h = image.dim(1), in_w = image.dim(2);
  if (in_h == out_h && in_w == out_w) return image;
  auto coord = [](std::size_t d, std::size_t in, std::size_t out) {
    if (out == 1) return (static_cast<double>(in) - 1.0) / 2.0;
    return static_cast<double>(d) * (static_cast<double>(in) - 1.0) / (static_cast<double>(out) - 1.0);
  };
  Tensor out({channels, out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, in_h, out_h);
    const auto y0 = std::min(static_cast<std::size_t>(sy), in_h - 1);
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, in_w, out_w);
      const auto x0 = std::min(static_cast<std::size_t>(sx), in_w - 1);
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < channels; ++c) {
        const double a = image.at(c, y0, x0), b = image.at(c, y0, x1);
        const double d = image.at(c, y1, x0), e = image.at(c, y1, x1);
        const double v = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * d + fx * e);
        // Rounding must not leave the convex hull of the four taps.
        const double lo = std::min({a, b, d, e}), hi = std::max({a, b, d, e});
        out.at(c, y, x) = static_cast<float>(std::clamp(v, lo, hi));
      }
    }
  }
  return out;
}

inline Tensor hflip(const Tensor& image) {
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y, w - 1 - x);
  return out;
}

/// One counter-clockwise quarter turn: out(r, c) = in(c, W - 1 - r).
inline Tensor rot90(const Tensor& image) {
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out({channels, w, h});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t r = 0; r < w; ++r)
      for (std::size_t col = 0; col < h; ++col) out.at(c, r, col) = image.at(c, col, w - 1 - r);
  return out;
}

inline Tensor crop(const Tensor& image, const CropBox& box) {
  if (image.rank() != 3) throw ShapeError("crop: image must be [C,H,W]");
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (box.width == 0 || box.height == 0 || box.x0 + box.width > w || box.y0 + box.height > h) {
    throw GeometryError("crop box (" + std::to_string(box.x0) + "," + std::to_string(box.y0) + "," +
                        std::to_string(box.width) + "," + std::to_string(box.height) + ") outside image " +
                        to_string(image.shape()));
  }
  if (box.x0 == 0 && box.y0 == 0 && box.width == w && box.height == h) return image;
  Tensor out({channels, box.height, box.width});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < box.height; ++y)
      for (std::size_t x = 0; x < box.width; ++x) out.at(c, y, x) = image.at(c, box.y0 + y, box.x0 + x);
  return out;
}

inline Tensor apply_transform(const Tensor& image, const TransformParams& t) {
  Tensor out = resize_bilinear(crop(image, t.box), t.out_height, t.out_width);
  if (t.flip) out = hflip(out);
  for (unsigned k = 0; k < t.quarter_turns % 4; ++k) out = rot90(out);
  return out;
}

}  // namespace metta
