#include "more/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include "more/error.hpp"
#include "more/rng.hpp"

namespace more {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::non_finite: return "NonFinite";
    case Errc::label_out_of_range: return "LabelOutOfRange";
    case Errc::disconnected_tensor: return "DisconnectedTensor";
    case Errc::invalid_arch: return "InvalidArch";
    case Errc::invalid_params: return "InvalidParams";
    case Errc::non_finite_gradient: return "NonFiniteGradient";
    case Errc::empty_dataset: return "EmptyDataset";
    case Errc::empty_rotation: return "EmptyRotation";
    case Errc::bad_magic: return "BadMagic";
    case Errc::truncated_file: return "TruncatedFile";
    case Errc::count_mismatch: return "CountMismatch";
    case Errc::io_error: return "IoError";
    case Errc::version_mismatch: return "VersionMismatch";
    case Errc::hash_mismatch: return "HashMismatch";
    case Errc::gradient_unavailable: return "GradientUnavailable";
    case Errc::config_parse: return "ConfigParse";
    case Errc::stage_failure: return "StageFailure";
  }
  return "Unknown";
}

void Fnv1a::update_f32(float f) noexcept { update_u32(std::bit_cast<std::uint32_t>(f)); }

std::size_t shape_size(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  require(shape_size(shape_) == data_.size(), Errc::shape_mismatch,
          "shape " + shape_string(shape_) + " does not hold " + std::to_string(data_.size()) + " values");
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::from(std::initializer_list<float> values) {
  return Tensor({values.size()}, std::vector<float>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    require(row.size() == c, Errc::shape_mismatch, "ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

float Tensor::item() const {
  require(data_.size() == 1, Errc::shape_mismatch, "item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  require(shape_size(shape) == data_.size(), Errc::shape_mismatch,
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  require(!shape_.empty() && begin <= end && end <= shape_[0], Errc::shape_mismatch, "row slice out of range");
  const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<float>(data_.begin() + begin * stride, data_.begin() + end * stride));
}

bool Tensor::all_finite() const noexcept {
  // Integer OR-reduction over exponent bits so the loop vectorizes.
  std::uint32_t bad = 0;
  const float* p = data_.data();
  for (std::size_t i = 0, n = data_.size(); i < n; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, p + i, sizeof bits);
    bad |= static_cast<std::uint32_t>((bits & 0x7f800000u) == 0x7f800000u);
  }
  return bad == 0;
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

void Tensor::add_(const Tensor& other) {
  require(other.shape_ == shape_, Errc::shape_mismatch,
          "add_ " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  float* __restrict dst = data_.data();
  const float* __restrict src = other.data_.data();
  for (std::size_t i = 0, n = data_.size(); i < n; ++i) dst[i] += src[i];
}

bool Tensor::bit_equal(const Tensor& other) const noexcept {
  return shape_ == other.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

double l2_norm(std::span<const float> v) noexcept {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

float linf_norm(std::span<const float> v) noexcept {
  float m = 0.0f;
  for (float x : v) m = std::max(m, std::fabs(x));
  return m;
}

}  // namespace more
