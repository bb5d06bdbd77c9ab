#pragma once

#include <cmath>
#include <vector>

#include "more/model.hpp"
#include "more/rng.hpp"
#include "more/tensor.hpp"

namespace more::test {

inline Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Reference implementations in double, written directly from the definitions.

inline std::vector<double> ref_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += double(a[i * k + p]) * b[p * n + j];
  return out;
}

inline std::vector<double> ref_conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(B * F * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = long(oy * stride + i) - long(pad), ix = long(ox * stride + j) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                s += double(x[((b * C + c) * H + iy) * W + ix]) * w[((f * C + c) * kh + i) * kw + j];
              }
          out[((b * F + f) * Ho + oy) * Wo + ox] = s;
        }
  return out;
}

inline double ref_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double m = -1e300;
    for (std::size_t k = 0; k < K; ++k) m = std::max(m, double(logits[b * K + k]));
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(double(logits[b * K + k]) - m);
    total += m + std::log(s) - double(logits[b * K + labels[b]]);
  }
  return total / double(B);
}

// Double-precision forward of a Model, written from the layer definitions.
// `margin` receives the smallest |relu input| and the smallest gap between the
// top two entries of any pooling window, i.e. the distance to a kink.
inline std::vector<double> ref_model_logits(const Model& model, const Tensor& x, double* margin = nullptr) {
  const ArchSpec& arch = model.arch();
  const auto params = model.params();
  const std::size_t B = x.dim(0);
  double kink = 1e300;
  std::size_t C = arch.input_shape[0], H = arch.input_shape[1], W = arch.input_shape[2];
  std::vector<double> act(x.data().begin(), x.data().end());
  std::size_t p = 0;
  for (const auto& st : arch.conv) {
    const Tensor& w = params[p].value;
    const Tensor& bias = params[p + 1].value;
    const std::size_t F = st.filters, k = st.kernel;
    const std::size_t Ho = (H + 2 * st.pad - k) / st.stride + 1, Wo = (W + 2 * st.pad - k) / st.stride + 1;
    std::vector<double> out(B * F * Ho * Wo);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            double a = bias[f];
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < k; ++j) {
                  const long iy = long(oy * st.stride + i) - long(st.pad), ix = long(ox * st.stride + j) - long(st.pad);
                  if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                  a += act[((b * C + c) * H + iy) * W + ix] * w[((f * C + c) * k + i) * k + j];
                }
            kink = std::min(kink, std::fabs(a));
            out[((b * F + f) * Ho + oy) * Wo + ox] = a > 0 ? a : 0.0;
          }
    C = F, H = Ho, W = Wo;
    act = std::move(out);
    if (st.pool > 1) {
      const std::size_t q = st.pool, Hp = H / q, Wp = W / q;
      std::vector<double> pooled(B * C * Hp * Wp);
      for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t oy = 0; oy < Hp; ++oy)
          for (std::size_t ox = 0; ox < Wp; ++ox) {
            double best = -1e300, second = -1e300;
            for (std::size_t i = 0; i < q; ++i)
              for (std::size_t j = 0; j < q; ++j) {
                const double v = act[(bc * H + oy * q + i) * W + ox * q + j];
                if (v > best) {
                  second = best;
                  best = v;
                } else if (v > second) {
                  second = v;
                }
              }
            // Ties among zeros (dead units) carry no gradient either way.
            if (best > 0) kink = std::min(kink, best - second);
            pooled[(bc * Hp + oy) * Wp + ox] = best;
          }
      H = Hp, W = Wp;
      act = std::move(pooled);
    }
    p += 2;
  }
  std::size_t width = C * H * W;
  auto dense = [&](const Tensor& w, const Tensor& bias, bool rectify) {
    const std::size_t out_w = bias.size();
    std::vector<double> out(B * out_w);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < out_w; ++o) {
        double a = bias[o];
        for (std::size_t i = 0; i < width; ++i) a += act[b * width + i] * w[i * out_w + o];
        if (rectify) kink = std::min(kink, std::fabs(a));
        out[b * out_w + o] = rectify && a < 0 ? 0.0 : a;
      }
    act = std::move(out);
    width = out_w;
  };
  for (std::size_t i = 0; i < arch.hidden.size(); ++i, p += 2) dense(params[p].value, params[p + 1].value, true);
  dense(params[p].value, params[p + 1].value, false);
  if (margin) *margin = kink;
  return act;
}

inline double ref_cross_entropy(const std::vector<double>& logits, std::size_t K, const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    double m = -1e300;
    for (std::size_t k = 0; k < K; ++k) m = std::max(m, logits[b * K + k]);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(logits[b * K + k] - m);
    total += m + std::log(s) - logits[b * K + static_cast<std::size_t>(labels[b])];
  }
  return total / double(labels.size());
}

// A head-only network over a 1×1×dim input: logits = x·W + b.
inline Model linear_model(std::size_t dim, const std::vector<float>& weight, const std::vector<float>& bias) {
  const std::size_t k = bias.size();
  ArchSpec arch = ArchSpec::mlp({1, 1, dim}, {}, k);
  std::vector<NamedTensor> params = {{"head.weight", Tensor({dim, k}, weight)}, {"head.bias", Tensor({k}, bias)}};
  return Model(arch, std::move(params), 0);
}

}  // namespace more::test
