#include "more/dataset.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iterator>

#include "more/error.hpp"
#include "more/rng.hpp"

#ifndef MORE_DEFAULT_DATA_DIR
#define MORE_DEFAULT_DATA_DIR "data"
#endif

namespace more {

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::string& what) {
  require(offset + 4 <= bytes.size(), Errc::truncated_file, what + ": header truncated");
  return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
         (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

}  // namespace

std::uint64_t dataset_fingerprint(const Tensor& images, std::span<const int> labels) {
  Fnv1a h;
  h.update_u32(static_cast<std::uint32_t>(images.rank()));
  for (std::size_t d : images.shape()) h.update_u64(d);
  for (int y : labels) h.update_u32(static_cast<std::uint32_t>(y));
  for (float v : images.data()) h.update_f32(v);
  return h.digest();
}

Dataset Dataset::make(Tensor images, std::vector<int> labels, std::string name, std::size_t num_classes) {
  require(images.rank() == 4, Errc::shape_mismatch, "dataset images must be N×C×H×W, got " + shape_string(images.shape()));
  require(images.dim(0) == labels.size(), Errc::count_mismatch,
          std::to_string(images.dim(0)) + " images vs " + std::to_string(labels.size()) + " labels");
  for (float v : images.data()) require(v >= 0.0f && v <= 1.0f, Errc::invalid_params, "pixel outside [0, 1]");
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < num_classes, Errc::label_out_of_range,
            "label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
  Dataset d;
  d.fingerprint = dataset_fingerprint(images, labels);
  d.images = std::move(images);
  d.labels = std::move(labels);
  d.name = std::move(name);
  d.num_classes = num_classes;
  return d;
}

Shape Dataset::example_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

std::vector<int> Dataset::labels_at(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Tensor Dataset::images_at(std::span<const std::size_t> indices) const {
  Shape s = images.shape();
  const std::size_t d = shape_size(example_shape());
  s[0] = indices.size();
  Tensor out(s);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    require(indices[b] < size(), Errc::shape_mismatch, "image index out of range");
    std::copy_n(images.ptr() + indices[b] * d, d, out.ptr() + b * d);
  }
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  return make(images.slice_rows(0, n), std::vector<int>(labels.begin(), labels.begin() + n), name, num_classes);
}

std::filesystem::path data_root() {
  if (const char* env = std::getenv("MORE_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return MORE_DEFAULT_DATA_DIR;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  require(read_be32(img, 0, images_path.string()) == kIdxImages, Errc::bad_magic,
          images_path.string() + " is not an IDX image file");
  require(read_be32(lab, 0, labels_path.string()) == kIdxLabels, Errc::bad_magic,
          labels_path.string() + " is not an IDX label file");
  const std::size_t n = read_be32(img, 4, images_path.string());
  const std::size_t rows = read_be32(img, 8, images_path.string());
  const std::size_t cols = read_be32(img, 12, images_path.string());
  const std::size_t nl = read_be32(lab, 4, labels_path.string());
  require(img.size() >= 16 + n * rows * cols, Errc::truncated_file, images_path.string() + ": payload truncated");
  require(lab.size() >= 8 + nl, Errc::truncated_file, labels_path.string() + ": payload truncated");
  require(n == nl, Errc::count_mismatch, std::to_string(n) + " images vs " + std::to_string(nl) + " labels");

  Tensor images({n, 1, rows, cols});
  for (std::size_t i = 0; i < images.size(); ++i) images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::vector<int> labels(n);
  int max_label = 1;
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = lab[8 + i];
    max_label = std::max(max_label, labels[i]);
  }
  return Dataset::make(std::move(images), std::move(labels), images_path.stem().string(),
                       static_cast<std::size_t>(max_label) + 1);
}

Dataset load_mnist(const std::string& split, std::size_t limit) {
  require(split == "train" || split == "test", Errc::invalid_params, "mnist split must be train or test");
  const std::string prefix = split == "train" ? "train" : "t10k";
  const auto dir = data_root() / "mnist";
  Dataset d = load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
  d.name = "mnist-" + split;
  if (limit != 0 && limit < d.size()) d = d.head(limit);
  // MNIST always has ten classes even when a small prefix misses some digits.
  d.num_classes = std::max<std::size_t>(d.num_classes, 10);
  return d;
}

float blobs_scale(float margin) { return margin + 0.8f; }

Dataset synth_blobs(std::size_t n, float margin, std::size_t dim, std::uint64_t seed) {
  require(n > 0 && n % 2 == 0, Errc::invalid_params, "blobs need an even, positive n");
  require(margin > 0.0f, Errc::invalid_params, "blobs margin must be > 0");
  require(dim >= 1, Errc::invalid_params, "blobs dim must be >= 1");
  Rng rng(derive_seed(seed, 0xb10b));
  const float scale = blobs_scale(margin);
  Tensor images({n, 1, 1, dim});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = i < n / 2 ? 0 : 1;
    labels[i] = y;
    for (std::size_t j = 0; j < dim; ++j) {
      float v = 0.1f * rng.normal();
      if (j == 0) v += y == 0 ? -margin / 2.0f : margin / 2.0f;
      images[i * dim + j] = std::clamp(0.5f + v / scale, 0.0f, 1.0f);
    }
  }
  return Dataset::make(std::move(images), std::move(labels), "blobs", 2);
}

}  // namespace more
