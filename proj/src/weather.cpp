#include "more/weather.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "more/error.hpp"
#include "more/rng.hpp"

namespace more {

namespace {

struct ImageDims {
  std::size_t count, channels, height, width;
};

ImageDims image_dims(const Tensor& t) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  require(t.rank() == 4, Errc::shape_mismatch, "expected C×H×W or B×C×H×W, got " + shape_string(t.shape()));
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

float flake_value(float darkness) { return std::clamp(0.4f * darkness, 0.0f, 1.0f); }

}  // namespace

std::string weather_name(WeatherKind k) { return k == WeatherKind::fog ? "fog" : "snow"; }

WeatherKind parse_weather(const std::string& s) {
  if (s == "fog") return WeatherKind::fog;
  if (s == "snow") return WeatherKind::snow;
  fail(Errc::invalid_params, "unknown weather kind '" + s + "'");
}

PerturbSpec PerturbSpec::fog(float t, float light) {
  PerturbSpec s;
  s.kind = WeatherKind::fog;
  s.t = t;
  s.light = light;
  return s;
}

PerturbSpec PerturbSpec::snow(float darkness, std::uint64_t seed, float density) {
  PerturbSpec s;
  s.kind = WeatherKind::snow;
  s.darkness = darkness;
  s.seed = seed;
  s.density = density;
  return s;
}

PerturbSpec PerturbSpec::preset(const std::string& name) {
  if (name == "fog") return fog(0.15f, 0.6f);
  if (name == "fog2") return fog(0.12f, 0.8f);
  if (name == "fog2-alt") return fog(0.13f, 0.8f);
  if (name == "snow") return snow(2.5f);
  if (name == "snow2") return snow(2.0f);
  fail(Errc::invalid_params, "unknown weather preset '" + name + "'");
}

void PerturbSpec::validate() const {
  require(t >= 0.0f && std::isfinite(t), Errc::invalid_params, "fog t must be >= 0");
  require(light >= 0.0f && light <= 1.0f, Errc::invalid_params, "fog light must lie in [0, 1]");
  require(darkness >= 0.0f && std::isfinite(darkness), Errc::invalid_params, "snow darkness must be >= 0");
  require(density >= 0.0f && density <= 1.0f, Errc::invalid_params, "snow density must lie in [0, 1]");
}

std::string PerturbSpec::describe() const {
  std::ostringstream os;
  os.precision(9);
  if (kind == WeatherKind::fog)
    os << "fog:t=" << t << ":light=" << light;
  else
    os << "snow:darkness=" << darkness << ":density=" << density << ":seed=" << seed;
  return os.str();
}

Tensor fog(const Tensor& images, float t, float light) {
  const ImageDims dims = image_dims(images);
  const std::size_t span = dims.height + dims.width - 2;
  std::vector<float> haze(dims.height * dims.width);
  for (std::size_t r = 0; r < dims.height; ++r) {
    for (std::size_t c = 0; c < dims.width; ++c) {
      const float d = span == 0 ? 0.0f : static_cast<float>(r + c) / static_cast<float>(span);
      haze[r * dims.width + c] = 1.0f - std::exp(-3.0f * t * (1.0f + d));
    }
  }
  Tensor out(images.shape());
  const std::size_t plane = haze.size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const float x = images[i];
    const float f = haze[i % plane];
    const float v = x + f * (light - x);
    out[i] = std::clamp(std::clamp(v, std::min(x, light), std::max(x, light)), 0.0f, 1.0f);
  }
  return out;
}

Tensor snow(const Tensor& image, float darkness, std::uint64_t seed, float density) {
  const ImageDims dims = image_dims(image);
  require(dims.count == 1 && image.rank() == 3, Errc::shape_mismatch, "snow expects a single C×H×W image");
  const std::size_t h = dims.height, w = dims.width;
  std::vector<char> mask(h * w, 0);
  Rng rng(seed);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (!rng.bernoulli(density)) continue;
      for (std::size_t k = r; k < std::min(h, r + 3); ++k) mask[k * w + c] = 1;
    }
  }
  const float v = flake_value(darkness);
  Tensor out = image;
  for (std::size_t ch = 0; ch < dims.channels; ++ch)
    for (std::size_t p = 0; p < h * w; ++p)
      if (mask[p]) out[ch * h * w + p] = v;
  return out;
}

Tensor apply_weather(const Tensor& batch, const PerturbSpec& spec, std::span<const std::size_t> indices) {
  spec.validate();
  require(batch.rank() == 4 && batch.dim(0) == indices.size(), Errc::shape_mismatch,
          "apply_weather needs one index per batch row");
  if (spec.kind == WeatherKind::fog) return fog(batch, spec.t, spec.light);
  const Shape one(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t d = shape_size(one);
  Tensor out(batch.shape());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    Tensor img(one, std::vector<float>(batch.ptr() + b * d, batch.ptr() + (b + 1) * d));
    Tensor s = snow(img, spec.darkness, derive_seed(spec.seed, indices[b]), spec.density);
    std::copy_n(s.ptr(), d, out.ptr() + b * d);
  }
  return out;
}

Dataset weatherize_dataset(const Dataset& data, const PerturbSpec& spec) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Tensor images = apply_weather(data.images, spec, idx);
  return Dataset::make(std::move(images), data.labels, data.name + "+" + weather_name(spec.kind), data.num_classes);
}

}  // namespace more
