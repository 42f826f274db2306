#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "fedopt/error.hpp"
#include "fedopt/random.hpp"

namespace fedopt {

// Row-major n x p feature matrix with integer labels in [0, num_classes).
// Quadratic tasks reuse the feature matrix as sample points and ignore labels.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::size_t feature_dim, std::size_t num_classes, std::vector<double> features,
          std::vector<int> labels)
      : dim_(feature_dim),
        num_classes_(num_classes),
        features_(std::move(features)),
        labels_(std::move(labels)) {
    if (dim_ == 0) throw StructuralError("Dataset: feature dimension must be >= 1");
    if (features_.size() != labels_.size() * dim_) {
      throw StructuralError("Dataset: feature matrix does not match label count");
    }
    for (int y : labels_) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes_) {
        throw StructuralError("Dataset: label out of range");
      }
    }
    for (double f : features_) {
      if (!std::isfinite(f)) throw NumericError("Dataset: non-finite feature");
    }
  }

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  std::size_t feature_dim() const noexcept { return dim_; }
  std::size_t num_classes() const noexcept { return num_classes_; }

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features_).subspan(i * dim_, dim_);
  }
  int label(std::size_t i) const { return labels_[i]; }
  const std::vector<int>& labels() const noexcept { return labels_; }
  const std::vector<double>& features() const noexcept { return features_; }

  Dataset subset(std::span<const std::size_t> indices) const {
    std::vector<double> f;
    std::vector<int> l;
    f.reserve(indices.size() * dim_);
    l.reserve(indices.size());
    for (std::size_t i : indices) {
      if (i >= size()) throw StructuralError("Dataset::subset: index out of range");
      const auto r = row(i);
      f.insert(f.end(), r.begin(), r.end());
      l.push_back(labels_[i]);
    }
    return Dataset(dim_, num_classes_, std::move(f), std::move(l));
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes_, 0);
    for (int y : labels_) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

 private:
  std::size_t dim_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<double> features_;
  std::vector<int> labels_;
};

// ---------------------------------------------------------------------------
// IDX files: big-endian u32 magic, u32 dims, then unsigned bytes.

inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                               const std::string& what) {
  if (offset + 4 > bytes.size()) throw FormatError(what + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void append_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

}  // namespace detail

// Features are scaled to [0, 1] by dividing bytes by 255.
inline Dataset load_idx_dataset(const std::filesystem::path& images_path,
                                const std::filesystem::path& labels_path,
                                std::size_t num_classes = 10) {
  const auto img = detail::read_file_bytes(images_path);
  const auto lab = detail::read_file_bytes(labels_path);
  const std::string img_name = images_path.string();
  const std::string lab_name = labels_path.string();

  const std::uint32_t img_magic = detail::read_be32(img, 0, img_name);
  if (img_magic != kIdxImageMagic) throw FormatError(img_name + ": bad image magic");
  const std::uint32_t lab_magic = detail::read_be32(lab, 0, lab_name);
  if (lab_magic != kIdxLabelMagic) throw FormatError(lab_name + ": bad label magic");

  const std::size_t n_img = detail::read_be32(img, 4, img_name);
  const std::size_t rows = detail::read_be32(img, 8, img_name);
  const std::size_t cols = detail::read_be32(img, 12, img_name);
  const std::size_t n_lab = detail::read_be32(lab, 4, lab_name);
  if (n_img != n_lab) {
    throw FormatError("IDX count mismatch: " + std::to_string(n_img) + " images vs " +
                      std::to_string(n_lab) + " labels");
  }
  const std::size_t p = rows * cols;
  if (p == 0) throw FormatError(img_name + ": zero-sized images");
  if (img.size() < 16 + n_img * p) throw FormatError(img_name + ": truncated pixel data");
  if (lab.size() < 8 + n_lab) throw FormatError(lab_name + ": truncated label data");

  std::vector<double> features(n_img * p);
  for (std::size_t i = 0; i < features.size(); ++i) features[i] = img[16 + i] / 255.0;
  std::vector<int> labels(n_lab);
  for (std::size_t i = 0; i < n_lab; ++i) {
    labels[i] = lab[8 + i];
    if (static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw FormatError(lab_name + ": label " + std::to_string(labels[i]) + " >= class count");
    }
  }
  return Dataset(p, num_classes, std::move(features), std::move(labels));
}

inline std::vector<unsigned char> encode_idx_images(std::size_t rows, std::size_t cols,
                                                    std::span<const unsigned char> pixels) {
  std::vector<unsigned char> out;
  detail::append_be32(out, kIdxImageMagic);
  detail::append_be32(out, static_cast<std::uint32_t>(pixels.size() / (rows * cols)));
  detail::append_be32(out, static_cast<std::uint32_t>(rows));
  detail::append_be32(out, static_cast<std::uint32_t>(cols));
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

inline std::vector<unsigned char> encode_idx_labels(std::span<const unsigned char> labels) {
  std::vector<unsigned char> out;
  detail::append_be32(out, kIdxLabelMagic);
  detail::append_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic "digit-like" classification data: one prototype in [0,1]^p per
// class, samples are prototype + Gaussian noise clipped back into [0,1].
// Labels cycle through the classes so every class has n/C (+1) samples.

struct SyntheticClassificationSpec {
  std::size_t samples = 10000;
  std::size_t features = 64;
  std::size_t classes = 10;
  double noise = 0.35;
};

inline Dataset make_synthetic_classification(const SyntheticClassificationSpec& spec,
                                             RngStream& prototype_rng, RngStream& sample_rng) {
  if (spec.samples == 0 || spec.features == 0 || spec.classes == 0) {
    throw ParameterError("synthetic classification: sizes must be positive");
  }
  std::vector<double> prototypes(spec.classes * spec.features);
  for (double& v : prototypes) v = prototype_rng.uniform() < 0.3 ? prototype_rng.uniform(0.6, 1.0) : 0.0;

  std::vector<double> features(spec.samples * spec.features);
  std::vector<int> labels(spec.samples);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const std::size_t y = i % spec.classes;
    labels[i] = static_cast<int>(y);
    for (std::size_t j = 0; j < spec.features; ++j) {
      const double v = prototypes[y * spec.features + j] + spec.noise * sample_rng.normal();
      features[i * spec.features + j] = std::clamp(v, 0.0, 1.0);
    }
  }
  return Dataset(spec.features, spec.classes, std::move(features), std::move(labels));
}

}  // namespace fedopt
