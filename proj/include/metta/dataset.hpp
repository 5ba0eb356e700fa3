#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "metta/binary_io.hpp"
#include "metta/errors.hpp"
#include "metta/rng.hpp"
#include "metta/tensor.hpp"

namespace metta {

/// Labelled images, each [C,H,W] with values in [0,1].
struct Dataset {
  std::vector<Tensor> images;
  std::vector<std::uint32_t> labels;
  std::uint32_t num_classes = 0;
  std::size_t channels = 0, height = 0, width = 0;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }
  Shape image_shape() const { return {channels, height, width}; }

  void validate() const {
    if (images.size() != labels.size()) throw ValueError("dataset: image/label count mismatch");
    for (std::size_t i = 0; i < images.size(); ++i) {
      require_shape(images[i], image_shape(), "dataset image");
      if (labels[i] >= num_classes) {
        throw ValueError("dataset: label " + std::to_string(labels[i]) + " >= num_classes " +
                         std::to_string(num_classes));
      }
    }
  }

  Dataset subset(std::size_t begin, std::size_t count) const {
    Dataset out{{}, {}, num_classes, channels, height, width};
    for (std::size_t i = begin; i < begin + count && i < size(); ++i) {
      out.images.push_back(images[i]);
      out.labels.push_back(labels[i]);
    }
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline constexpr std::size_t kMaxShapeClasses = 6;

enum class ShapeKind { kDisk, kSquare, kTriangle, kCross, kRing, kBar };

namespace detail {

// Membership in the unit-scale shape, local coordinates already rotated.
inline bool inside_shape(ShapeKind kind, double u, double v) {
  const double r2 = u * u + v * v;
  switch (kind) {
    case ShapeKind::kDisk:
      return r2 <= 1.0;
    case ShapeKind::kSquare:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeKind::kTriangle: {
      // Equilateral, circumradius 1: edge midpoints at distance 0.5 along 270, 30 and 150 degrees.
      constexpr double c = 0.8660254037844386;
      return -v <= 0.5 && (c * u + 0.5 * v) <= 0.5 && (-c * u + 0.5 * v) <= 0.5;
    }
    case ShapeKind::kCross:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case ShapeKind::kRing:
      return r2 <= 1.0 && r2 >= 0.36;
    case ShapeKind::kBar:
      return std::abs(u) <= 1.0 && std::abs(v) <= 0.28;
  }
  return false;
}

}  // namespace detail

/// Procedural shapes: class k draws ShapeKind k at a random position, size and
/// rotation over a noisy background. Labels are balanced (count / classes
/// each, remainder to the lowest classes) and shuffled. Fully determined by
/// `seed`; channels > 1 tints the shape per channel.
inline Dataset gen_shapes_dataset(std::uint64_t seed, std::size_t count, std::size_t num_classes,
                                  std::size_t image_size, std::size_t channels = 1) {
  if (num_classes < 1 || num_classes > kMaxShapeClasses) {
    throw ValueError("gen_shapes_dataset: num_classes must be in [1, 6], got " + std::to_string(num_classes));
  }
  if (count < num_classes) throw ValueError("gen_shapes_dataset: count must be >= num_classes");
  if (image_size < 8) throw ValueError("gen_shapes_dataset: image_size must be >= 8");
  if (channels < 1) throw ValueError("gen_shapes_dataset: channels must be >= 1");

  Dataset ds{{}, {}, static_cast<std::uint32_t>(num_classes), channels, image_size, image_size};
  std::vector<std::uint32_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<std::uint32_t>(i % num_classes);
  CounterRng shuffle({seed, static_cast<std::uint64_t>(Stream::kShuffle)});
  for (std::size_t i = count; i > 1; --i) std::swap(labels[i - 1], labels[shuffle.below(i)]);

  constexpr int kSuper = 3;  // supersampling per axis for edge coverage
  const double size = static_cast<double>(image_size);
  ds.images.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    CounterRng rng({seed, static_cast<std::uint64_t>(Stream::kDataset), i});
    const auto kind = static_cast<ShapeKind>(labels[i]);
    const double radius = rng.uniform(0.16, 0.30) * size;
    const double margin = radius * 1.15;
    const double cx = rng.uniform(margin, size - margin);
    const double cy = rng.uniform(margin, size - margin);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double background = rng.uniform(0.0, 0.35);
    const double foreground = rng.uniform(0.6, 1.0);
    std::vector<double> tint(channels, 1.0);
    if (channels > 1) {
      for (double& t : tint) t = rng.uniform(0.5, 1.0);
    }
    const double cs = std::cos(angle), sn = std::sin(angle);

    Tensor img({channels, image_size, image_size});
    for (std::size_t y = 0; y < image_size; ++y) {
      for (std::size_t x = 0; x < image_size; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = static_cast<double>(x) + (sx + 0.5) / kSuper - cx;
            const double py = static_cast<double>(y) + (sy + 0.5) / kSuper - cy;
            const double u = (cs * px + sn * py) / radius;
            const double v = (-sn * px + cs * py) / radius;
            hits += detail::inside_shape(kind, u, v) ? 1 : 0;
          }
        }
        const double coverage = static_cast<double>(hits) / (kSuper * kSuper);
        for (std::size_t c = 0; c < channels; ++c) {
          const double clean = background + coverage * (foreground * tint[c] - background);
          const double noisy = clean + 0.08 * rng.normal();
          img.at(c, y, x) = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
        }
      }
    }
    ds.images.push_back(std::move(img));
  }
  ds.labels = std::move(labels);
  return ds;
}

inline constexpr char kDatasetMagic[] = "MTDS";
inline constexpr std::uint32_t kDatasetVersion = 1;

/// MTDS v1: magic, u32 version, u32 K, u32 num_classes, u32 C, H, W, then K
/// records of (u32 label, C*H*W little-endian f32).
inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  io::Writer w;
  w.bytes(std::string_view(kDatasetMagic, 4));
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(ds.num_classes);
  w.u32(static_cast<std::uint32_t>(ds.channels));
  w.u32(static_cast<std::uint32_t>(ds.height));
  w.u32(static_cast<std::uint32_t>(ds.width));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.u32(ds.labels[i]);
    w.f32s(ds.images[i].data());
  }
  w.save(path);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  io::Reader r = io::Reader::open(path, "dataset " + path.string());
  if (r.bytes(4) != std::string_view(kDatasetMagic, 4)) throw FormatError("dataset " + path.string() + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("dataset " + path.string() + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  Dataset ds;
  ds.num_classes = r.u32();
  ds.channels = r.u32();
  ds.height = r.u32();
  ds.width = r.u32();
  const std::size_t pixels = ds.channels * ds.height * ds.width;
  if (count > 0 && pixels == 0) throw FormatError("dataset " + path.string() + ": zero-sized images");
  if (r.remaining() < static_cast<std::size_t>(count) * (4 + 4 * pixels)) {
    throw FormatError("dataset " + path.string() + ": truncated file");
  }
  ds.images.reserve(count);
  ds.labels.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ds.labels.push_back(r.u32());
    std::vector<float> values(pixels);
    r.f32s(values);
    ds.images.emplace_back(ds.image_shape(), std::move(values));
  }
  r.expect_end();
  try {
    ds.validate();
  } catch (const ValueError& e) {
    throw FormatError("dataset " + path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace metta
