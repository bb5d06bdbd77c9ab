#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "more/tensor.hpp"

namespace more {

/// Labelled images, N×C×H×W with pixels in [0, 1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::string name;
  std::size_t num_classes = 0;
  std::uint64_t fingerprint = 0;

  /// Validates the invariants and computes the fingerprint.
  static Dataset make(Tensor images, std::vector<int> labels, std::string name, std::size_t num_classes);

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  Shape example_shape() const;

  std::vector<int> labels_at(std::span<const std::size_t> indices) const;
  Tensor images_at(std::span<const std::size_t> indices) const;
  Dataset head(std::size_t n) const;
};

/// FNV-1a over shape, labels and little-endian pixel bits.
std::uint64_t dataset_fingerprint(const Tensor& images, std::span<const int> labels);

/// $MORE_DATA_DIR if set, otherwise the build-time default.
std::filesystem::path data_root();

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// MNIST split ("train" or "test") from <data_root>/mnist.
Dataset load_mnist(const std::string& split, std::size_t limit = 0);

/// Two Gaussian clusters (σ = 0.1) at ±margin/2 on the first axis, mapped into
/// [0, 1] by x' = clamp(0.5 + x / blobs_scale(margin), 0, 1). Shape N×1×1×dim.
Dataset synth_blobs(std::size_t n, float margin, std::size_t dim, std::uint64_t seed);
float blobs_scale(float margin);

}  // namespace more
