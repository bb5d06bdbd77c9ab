#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "more/dataset.hpp"
#include "more/tensor.hpp"

namespace more {

enum class WeatherKind { fog, snow };

struct PerturbSpec {
  WeatherKind kind = WeatherKind::fog;
  float t = 0.15f;
  float light = 0.6f;
  float darkness = 2.5f;
  std::uint64_t seed = 0;
  float density = 0.02f;

  static PerturbSpec fog(float t, float light);
  static PerturbSpec snow(float darkness, std::uint64_t seed = 0, float density = 0.02f);

  // Named settings: fog (0.15, 0.6), fog2 (0.12, 0.8), the alternative fog
  // reading (0.13, 0.8), snow darkness 2.5 and 2.0.
  static PerturbSpec preset(const std::string& name);

  void validate() const;
  std::string describe() const;
};

std::string weather_name(WeatherKind k);
WeatherKind parse_weather(const std::string& s);

/// Fog on a C×H×W image or a B×C×H×W batch.
Tensor fog(const Tensor& images, float t, float light);

/// Snow on a single C×H×W image.
Tensor snow(const Tensor& image, float darkness, std::uint64_t seed, float density);

/// Applies spec to each row of a batch; row b uses seed derive_seed(spec.seed, indices[b]).
Tensor apply_weather(const Tensor& batch, const PerturbSpec& spec, std::span<const std::size_t> indices);

Dataset weatherize_dataset(const Dataset& data, const PerturbSpec& spec);

}  // namespace more
