#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "more/graph.hpp"
#include "more/tensor.hpp"

namespace more {

/// Anything that maps a batch of images to logits inside a graph. Attacks and
/// evaluation are written against this interface so a single Model and a
/// whole Ensemble are attacked the same way.
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual Var logits(Graph& graph, Var batch) const = 0;
  virtual const Shape& input_shape() const = 0;
  virtual std::size_t num_classes() const = 0;
  // False for subjects that only expose scores (black-box access).
  virtual bool differentiable() const { return true; }

  Tensor predict_logits(const Tensor& batch) const;
  std::vector<int> predict(const Tensor& batch) const;
};

enum class ArchKind { mlp, cnn };

struct ConvStage {
  std::size_t filters = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  std::size_t pool = 2;  // 1 disables pooling

  bool operator==(const ConvStage&) const = default;
};

struct ArchSpec {
  ArchKind kind = ArchKind::mlp;
  Shape input_shape;               // C×H×W per example
  std::vector<ConvStage> conv;     // cnn only
  std::vector<std::size_t> hidden; // dense widths before the head
  std::size_t num_classes = 10;

  static ArchSpec mlp(Shape input_shape, std::vector<std::size_t> hidden, std::size_t num_classes);
  static ArchSpec cnn(Shape input_shape, std::vector<ConvStage> conv, std::vector<std::size_t> hidden,
                      std::size_t num_classes);
  // MLP-784-256-10 and the two-stage 8/16 filter CNN used at desk scale.
  static ArchSpec desk_mlp(std::size_t num_classes = 10);
  static ArchSpec desk_cnn(std::size_t num_classes = 10);

  ArchSpec with_classes(std::size_t k) const;

  // Compact textual form, e.g. "cnn;in=1x28x28;conv=8:3:1:1:2,16:3:1:1:2;hidden=;classes=10".
  std::string to_string() const;
  static ArchSpec parse(const std::string& text);

  void validate() const;
  std::size_t feature_width() const;  // input width of the head
  std::size_t param_count() const;

  bool operator==(const ArchSpec&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Which parameters a bound forward pass exposes as graph variables.
enum class Trainable { none, head, all };

class Model : public Classifier {
 public:
  Model() = default;
  Model(ArchSpec arch, std::vector<NamedTensor> params, std::uint64_t seed);

  const ArchSpec& arch() const noexcept { return arch_; }
  std::uint64_t seed() const noexcept { return seed_; }

  std::span<const NamedTensor> params() const noexcept { return params_; }
  std::span<NamedTensor> params() noexcept { return params_; }
  // The last two entries are the head's weight and bias.
  std::size_t head_begin() const noexcept { return params_.size() - 2; }

  /// Places every parameter into the graph, as variables when selected by
  /// `trainable`, otherwise as constants. Result is aligned with params().
  std::vector<Var> bind(Graph& graph, Trainable trainable) const;

  Var features(Graph& graph, Var batch, std::span<const Var> bound) const;
  Var head(Var features, std::span<const Var> bound) const;
  Var forward(Graph& graph, Var batch, std::span<const Var> bound) const;

  Var logits(Graph& graph, Var batch) const override;
  const Shape& input_shape() const override { return arch_.input_shape; }
  std::size_t num_classes() const override { return arch_.num_classes; }

  // FNV-1a over parameter names, shapes and bits.
  std::uint64_t fingerprint() const;
  std::uint64_t backbone_fingerprint() const;

 private:
  ArchSpec arch_;
  std::vector<NamedTensor> params_;
  std::uint64_t seed_ = 0;
};

/// Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases.
Model build_classifier(const ArchSpec& arch, std::uint64_t seed);

struct HeadSplit {
  std::span<const NamedTensor> backbone;
  std::span<const NamedTensor> head;
};

HeadSplit split_head(const Model& model);

}  // namespace more
