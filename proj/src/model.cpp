#include "more/model.hpp"

#include <cmath>
#include <sstream>

#include "more/error.hpp"
#include "more/rng.hpp"

namespace more {

namespace {

constexpr std::size_t kPredictChunk = 256;

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::size_t parse_size(const std::string& s) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    fail(Errc::invalid_arch, "bad integer '" + s + "' in architecture string");
  }
}

struct Geometry {
  std::size_t channels, height, width;
};

Geometry conv_out(Geometry in, const ConvStage& st) {
  require(st.kernel <= in.height + 2 * st.pad && st.kernel <= in.width + 2 * st.pad, Errc::invalid_arch,
          "conv kernel larger than its padded input");
  Geometry g{st.filters, (in.height + 2 * st.pad - st.kernel) / st.stride + 1,
             (in.width + 2 * st.pad - st.kernel) / st.stride + 1};
  if (st.pool > 1) {
    require(g.height >= st.pool && g.width >= st.pool, Errc::invalid_arch, "pooling window larger than feature map");
    g.height /= st.pool;
    g.width /= st.pool;
  }
  return g;
}

void kaiming_fill(Tensor& t, std::size_t fan_in, Rng& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  for (float& v : t.data()) v = rng.uniform(-bound, bound);
}

}  // namespace

Tensor Classifier::predict_logits(const Tensor& batch) const {
  require(batch.rank() >= 1, Errc::shape_mismatch, "predict on rank-0 tensor");
  const std::size_t n = batch.dim(0);
  std::vector<float> data;
  data.reserve(n * num_classes());
  for (std::size_t start = 0; start < n; start += kPredictChunk) {
    const std::size_t end = std::min(n, start + kPredictChunk);
    Graph g;
    Var out = logits(g, g.constant(batch.slice_rows(start, end)));
    data.insert(data.end(), out.value().data().begin(), out.value().data().end());
  }
  return Tensor({n, num_classes()}, std::move(data));
}

std::vector<int> Classifier::predict(const Tensor& batch) const { return argmax_rows(predict_logits(batch)); }

// ---- ArchSpec --------------------------------------------------------------

ArchSpec ArchSpec::mlp(Shape input_shape, std::vector<std::size_t> hidden, std::size_t num_classes) {
  ArchSpec a;
  a.kind = ArchKind::mlp;
  a.input_shape = std::move(input_shape);
  a.hidden = std::move(hidden);
  a.num_classes = num_classes;
  return a;
}

ArchSpec ArchSpec::cnn(Shape input_shape, std::vector<ConvStage> conv, std::vector<std::size_t> hidden,
                       std::size_t num_classes) {
  ArchSpec a;
  a.kind = ArchKind::cnn;
  a.input_shape = std::move(input_shape);
  a.conv = std::move(conv);
  a.hidden = std::move(hidden);
  a.num_classes = num_classes;
  return a;
}

ArchSpec ArchSpec::desk_mlp(std::size_t num_classes) { return mlp({1, 28, 28}, {256}, num_classes); }

ArchSpec ArchSpec::desk_cnn(std::size_t num_classes) {
  return cnn({1, 28, 28}, {ConvStage{8}, ConvStage{16}}, {}, num_classes);
}

ArchSpec ArchSpec::with_classes(std::size_t k) const {
  ArchSpec a = *this;
  a.num_classes = k;
  return a;
}

std::string ArchSpec::to_string() const {
  std::ostringstream os;
  os << (kind == ArchKind::mlp ? "mlp" : "cnn") << ";in=";
  for (std::size_t i = 0; i < input_shape.size(); ++i) os << (i ? "x" : "") << input_shape[i];
  os << ";conv=";
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const auto& c = conv[i];
    os << (i ? "," : "") << c.filters << ':' << c.kernel << ':' << c.stride << ':' << c.pad << ':' << c.pool;
  }
  os << ";hidden=";
  for (std::size_t i = 0; i < hidden.size(); ++i) os << (i ? "," : "") << hidden[i];
  os << ";classes=" << num_classes;
  return os.str();
}

ArchSpec ArchSpec::parse(const std::string& text) {
  const auto fields = split(text, ';');
  require(fields.size() == 5, Errc::invalid_arch, "malformed architecture string '" + text + "'");
  ArchSpec a;
  if (fields[0] == "mlp") {
    a.kind = ArchKind::mlp;
  } else if (fields[0] == "cnn") {
    a.kind = ArchKind::cnn;
  } else {
    fail(Errc::invalid_arch, "unknown architecture kind '" + fields[0] + "'");
  }
  auto value_of = [&](const std::string& field, const std::string& key) {
    require(field.rfind(key + "=", 0) == 0, Errc::invalid_arch, "expected '" + key + "=' in '" + text + "'");
    return field.substr(key.size() + 1);
  };
  for (const auto& d : split(value_of(fields[1], "in"), 'x')) a.input_shape.push_back(parse_size(d));
  const std::string conv = value_of(fields[2], "conv");
  if (!conv.empty()) {
    for (const auto& stage : split(conv, ',')) {
      const auto p = split(stage, ':');
      require(p.size() == 5, Errc::invalid_arch, "conv stage needs filters:kernel:stride:pad:pool");
      a.conv.push_back(ConvStage{parse_size(p[0]), parse_size(p[1]), parse_size(p[2]), parse_size(p[3]),
                                 parse_size(p[4])});
    }
  }
  const std::string hidden = value_of(fields[3], "hidden");
  if (!hidden.empty()) {
    for (const auto& h : split(hidden, ',')) a.hidden.push_back(parse_size(h));
  }
  a.num_classes = parse_size(value_of(fields[4], "classes"));
  a.validate();
  return a;
}

void ArchSpec::validate() const {
  require(input_shape.size() == 3, Errc::invalid_arch, "input shape must be C×H×W");
  for (std::size_t d : input_shape) require(d > 0, Errc::invalid_arch, "zero-sized input dimension");
  require(num_classes >= 2, Errc::invalid_arch, "num_classes must be >= 2 (head missing)");
  for (std::size_t h : hidden) require(h > 0, Errc::invalid_arch, "zero-width hidden layer");
  if (kind == ArchKind::mlp) {
    require(conv.empty(), Errc::invalid_arch, "mlp cannot have conv stages");
  } else {
    require(!conv.empty(), Errc::invalid_arch, "cnn needs at least one conv stage");
  }
  Geometry g{input_shape[0], input_shape[1], input_shape[2]};
  for (const auto& st : conv) {
    require(st.filters > 0 && st.kernel > 0 && st.stride > 0 && st.pool > 0, Errc::invalid_arch,
            "zero-sized conv stage parameter");
    g = conv_out(g, st);
  }
}

std::size_t ArchSpec::feature_width() const {
  if (!hidden.empty()) return hidden.back();
  Geometry g{input_shape.at(0), input_shape.at(1), input_shape.at(2)};
  for (const auto& st : conv) g = conv_out(g, st);
  return g.channels * g.height * g.width;
}

std::size_t ArchSpec::param_count() const {
  validate();
  std::size_t total = 0;
  Geometry g{input_shape[0], input_shape[1], input_shape[2]};
  for (const auto& st : conv) {
    total += st.filters * g.channels * st.kernel * st.kernel + st.filters;
    g = conv_out(g, st);
  }
  std::size_t width = g.channels * g.height * g.width;
  for (std::size_t h : hidden) {
    total += width * h + h;
    width = h;
  }
  return total + width * num_classes + num_classes;
}

// ---- Model -----------------------------------------------------------------

Model::Model(ArchSpec arch, std::vector<NamedTensor> params, std::uint64_t seed)
    : arch_(std::move(arch)), params_(std::move(params)), seed_(seed) {
  arch_.validate();
  const std::size_t expected = 2 * (arch_.conv.size() + arch_.hidden.size() + 1);
  require(params_.size() == expected, Errc::invalid_arch,
          "architecture expects " + std::to_string(expected) + " tensors, got " + std::to_string(params_.size()));
  std::size_t count = 0;
  for (const auto& p : params_) count += p.value.size();
  require(count == arch_.param_count(), Errc::invalid_arch, "parameter count does not match architecture");
  require(params_[head_begin()].name == "head.weight" && params_.back().name == "head.bias", Errc::invalid_arch,
          "last layer must be the linear head");
  require(params_[head_begin()].value.shape() == Shape({arch_.feature_width(), arch_.num_classes}),
          Errc::invalid_arch, "head weight shape does not match backbone output width");
}

std::vector<Var> Model::bind(Graph& graph, Trainable trainable) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const bool grad = trainable == Trainable::all || (trainable == Trainable::head && i >= head_begin());
    out.push_back(grad ? graph.variable(params_[i].value) : graph.constant(params_[i].value));
  }
  return out;
}

Var Model::features(Graph& graph, Var batch, std::span<const Var> bound) const {
  require(bound.size() == params_.size(), Errc::shape_mismatch, "bound parameter list has the wrong length");
  require(batch.graph() == &graph, Errc::disconnected_tensor, "batch belongs to another graph");
  const Shape& s = batch.shape();
  require(s.size() == 4 && Shape(s.begin() + 1, s.end()) == arch_.input_shape, Errc::shape_mismatch,
          "batch " + shape_string(s) + " does not match input " + shape_string(arch_.input_shape));
  const std::size_t b = s[0];
  Var x = batch;
  std::size_t p = 0;
  for (const auto& st : arch_.conv) {
    x = relu(add_channel_bias(conv2d(x, bound[p], st.stride, st.pad), bound[p + 1]));
    if (st.pool > 1) x = max_pool2d(x, st.pool);
    p += 2;
  }
  x = reshape(x, {b, x.value().size() / b});
  for (std::size_t i = 0; i < arch_.hidden.size(); ++i, p += 2) x = relu(linear(x, bound[p], bound[p + 1]));
  return x;
}

Var Model::head(Var features, std::span<const Var> bound) const {
  return linear(features, bound[head_begin()], bound[head_begin() + 1]);
}

Var Model::forward(Graph& graph, Var batch, std::span<const Var> bound) const {
  return head(features(graph, batch, bound), bound);
}

Var Model::logits(Graph& graph, Var batch) const {
  const auto bound = bind(graph, Trainable::none);
  return forward(graph, batch, bound);
}

namespace {
void hash_params(Fnv1a& h, std::span<const NamedTensor> params) {
  for (const auto& p : params) {
    h.update(p.name);
    for (std::size_t d : p.value.shape()) h.update_u32(static_cast<std::uint32_t>(d));
    for (float v : p.value.data()) h.update_f32(v);
  }
}
}  // namespace

std::uint64_t Model::fingerprint() const {
  Fnv1a h;
  h.update(arch_.to_string());
  hash_params(h, params_);
  return h.digest();
}

std::uint64_t Model::backbone_fingerprint() const {
  Fnv1a h;
  h.update(arch_.to_string());
  hash_params(h, split_head(*this).backbone);
  return h.digest();
}

Model build_classifier(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(derive_seed(seed, 0x1417));
  std::vector<NamedTensor> params;
  Geometry g{arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]};
  for (std::size_t i = 0; i < arch.conv.size(); ++i) {
    const auto& st = arch.conv[i];
    Tensor w({st.filters, g.channels, st.kernel, st.kernel});
    kaiming_fill(w, g.channels * st.kernel * st.kernel, rng);
    params.push_back({"conv" + std::to_string(i) + ".weight", std::move(w)});
    params.push_back({"conv" + std::to_string(i) + ".bias", Tensor({st.filters})});
    g = conv_out(g, st);
  }
  std::size_t width = g.channels * g.height * g.width;
  auto dense = [&](const std::string& name, std::size_t out) {
    Tensor w({width, out});
    kaiming_fill(w, width, rng);
    params.push_back({name + ".weight", std::move(w)});
    params.push_back({name + ".bias", Tensor({out})});
    width = out;
  };
  for (std::size_t i = 0; i < arch.hidden.size(); ++i) dense("fc" + std::to_string(i), arch.hidden[i]);
  dense("head", arch.num_classes);
  return Model(arch, std::move(params), seed);
}

HeadSplit split_head(const Model& model) {
  auto all = model.params();
  return {all.first(model.head_begin()), all.subspan(model.head_begin())};
}

}  // namespace more
