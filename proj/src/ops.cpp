#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>

#include "more/error.hpp"
#include "more/graph.hpp"

namespace more {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Graph& graph_of(Var a) {
  require(a.graph() != nullptr, Errc::disconnected_tensor, "Var not bound to a graph");
  return *a.graph();
}

Graph& graph_of(Var a, Var b) {
  Graph& g = graph_of(a);
  require(b.graph() == &g, Errc::disconnected_tensor, "operands live in different graphs");
  return g;
}

bool any_requires_grad(Graph& g, std::initializer_list<Var> vars) {
  return std::any_of(vars.begin(), vars.end(), [&](Var v) { return g.requires_grad(v); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), Errc::shape_mismatch,
          std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  require(a.rank() == rank, Errc::shape_mismatch,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(a.shape()));
}

// Patches up to this size use the direct kernel instead of im2col + GEMM.
constexpr std::size_t kDirectConvMaxPatch = 32;

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_plane() const { return out_h * out_w; }
};

void im2col(const float* img, const ConvGeometry& g, float* col) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        float* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ki) - std::ptrdiff_t(g.pad);
          float* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= std::ptrdiff_t(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0f);
            continue;
          }
          const float* src = img + (c * g.height + std::size_t(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kj) - std::ptrdiff_t(g.pad);
            dst[ox] = (ix < 0 || ix >= std::ptrdiff_t(g.width)) ? 0.0f : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeometry& g, float* img) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const float* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ki) - std::ptrdiff_t(g.pad);
          if (iy < 0 || iy >= std::ptrdiff_t(g.height)) continue;
          float* dst = img + (c * g.height + std::size_t(iy)) * g.width;
          const float* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kj) - std::ptrdiff_t(g.pad);
            if (ix >= 0 && ix < std::ptrdiff_t(g.width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  Tensor out = av;
  out.add_(bv);
  return g.record("add", std::move(out), {a, b}, [](const BackwardContext& ctx) {
    for (Tensor* gi : ctx.grad_inputs)
      if (gi) gi->add_(ctx.grad_output);
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.record("sub", std::move(out), {a, b}, [](const BackwardContext& ctx) {
    if (ctx.grad_inputs[0]) ctx.grad_inputs[0]->add_(ctx.grad_output);
    if (Tensor* gb = ctx.grad_inputs[1]) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] -= ctx.grad_output[i];
    }
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.record("mul", std::move(out), {a, b}, [](const BackwardContext& ctx) {
    const Tensor& go = ctx.grad_output;
    if (Tensor* ga = ctx.grad_inputs[0]) {
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * (*ctx.inputs[1])[i];
    }
    if (Tensor* gb = ctx.grad_inputs[1]) {
      for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * (*ctx.inputs[0])[i];
    }
  });
}

Var scale(Var a, float s) {
  Graph& g = graph_of(a);
  Tensor out = a.value();
  for (float& v : out.data()) v *= s;
  return g.record("scale", std::move(out), {a}, [s](const BackwardContext& ctx) {
    Tensor& ga = *ctx.grad_inputs[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * ctx.grad_output[i];
  });
}

Var sum(Var a) {
  Graph& g = graph_of(a);
  float total = 0.0f;
  for (float v : a.value().data()) total += v;
  return g.record("sum", Tensor::scalar(total), {a}, [](const BackwardContext& ctx) {
    Tensor& ga = *ctx.grad_inputs[0];
    const float go = ctx.grad_output[0];
    for (float& v : ga.data()) v += go;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  require(n > 0, Errc::shape_mismatch, "mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(n));
}

Var relu(Var a) {
  Graph& g = graph_of(a);
  Tensor out = a.value();
  float* p = out.ptr();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) p[i] = p[i] > 0.0f ? p[i] : 0.0f;
  return g.record("relu", std::move(out), {a}, [](const BackwardContext& ctx) {
    float* __restrict ga = ctx.grad_inputs[0]->ptr();
    const float* __restrict y = ctx.output.ptr();
    const float* __restrict go = ctx.grad_output.ptr();
    for (std::size_t i = 0, n = ctx.output.size(); i < n; ++i) ga[i] += y[i] > 0.0f ? go[i] : 0.0f;
  });
}

Var reshape(Var a, Shape shape) {
  Graph& g = graph_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  return g.record("reshape", std::move(out), {a}, [](const BackwardContext& ctx) {
    Tensor& ga = *ctx.grad_inputs[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ctx.grad_output[i];
  });
}

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  require(bv.dim(0) == k, Errc::shape_mismatch,
          "matmul inner dims: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  Tensor out({m, n});
  MatMap(out.ptr(), m, n).noalias() = ConstMatMap(av.ptr(), m, k) * ConstMatMap(bv.ptr(), k, n);
  return g.record("matmul", std::move(out), {a, b}, [m, k, n](const BackwardContext& ctx) {
    ConstMatMap go(ctx.grad_output.ptr(), m, n);
    if (Tensor* ga = ctx.grad_inputs[0]) {
      MatMap(ga->ptr(), m, k).noalias() += go * ConstMatMap(ctx.inputs[1]->ptr(), k, n).transpose();
    }
    if (Tensor* gb = ctx.grad_inputs[1]) {
      MatMap(gb->ptr(), k, n).noalias() += ConstMatMap(ctx.inputs[0]->ptr(), m, k).transpose() * go;
    }
  });
}

Var add_bias(Var x, Var bias) {
  Graph& g = graph_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_rank(xv, 2, "add_bias");
  require(bv.size() == xv.dim(1), Errc::shape_mismatch,
          "add_bias: bias " + shape_string(bv.shape()) + " for " + shape_string(xv.shape()));
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return g.record("add_bias", std::move(out), {x, bias}, [rows, cols](const BackwardContext& ctx) {
    if (ctx.grad_inputs[0]) ctx.grad_inputs[0]->add_(ctx.grad_output);
    if (Tensor* gb = ctx.grad_inputs[1]) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += ctx.grad_output[r * cols + c];
    }
  });
}

Var linear(Var x, Var weight, Var bias) { return add_bias(matmul(x, weight), bias); }

namespace {

// Valid output columns [lo, hi) for kernel column kj at stride 1.
std::pair<std::size_t, std::size_t> valid_cols(const ConvGeometry& g, std::size_t kj) {
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, std::ptrdiff_t(g.pad) - std::ptrdiff_t(kj));
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(std::ptrdiff_t(g.out_w),
                                                     std::ptrdiff_t(g.width + g.pad) - std::ptrdiff_t(kj));
  return {std::size_t(lo), std::size_t(std::max(lo, hi))};
}

// Direct stride-1 convolution; inner loops run along output rows.
void conv_direct_forward(const float* x, const float* k, const ConvGeometry& g, float* out) {
  const std::size_t in_plane = g.height * g.width, plane = g.out_plane();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      float* __restrict o = out + (b * g.filters + f) * plane;
      std::fill(o, o + plane, 0.0f);
      for (std::size_t c = 0; c < g.channels; ++c) {
        const float* in = x + (b * g.channels + c) * in_plane;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          for (std::size_t kj = 0; kj < g.kw; ++kj) {
            const float w = k[((f * g.channels + c) * g.kh + ki) * g.kw + kj];
            const auto [lo, hi] = valid_cols(g, kj);
            for (std::size_t oy = 0; oy < g.out_h; ++oy) {
              const std::ptrdiff_t iy = std::ptrdiff_t(oy + ki) - std::ptrdiff_t(g.pad);
              if (iy < 0 || iy >= std::ptrdiff_t(g.height)) continue;
              float* __restrict orow = o + oy * g.out_w;
              const float* __restrict irow = in + std::size_t(iy) * g.width + kj - g.pad;
              for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += w * irow[ox];
            }
          }
        }
      }
    }
  }
}

void conv_direct_backward(const float* x, const float* k, const float* go, const ConvGeometry& g, float* gx,
                          float* gk) {
  const std::size_t in_plane = g.height * g.width, plane = g.out_plane();
  std::vector<float> acc(g.out_w);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      const float* gof = go + (b * g.filters + f) * plane;
      for (std::size_t c = 0; c < g.channels; ++c) {
        const float* in = x + (b * g.channels + c) * in_plane;
        float* gin = gx ? gx + (b * g.channels + c) * in_plane : nullptr;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          for (std::size_t kj = 0; kj < g.kw; ++kj) {
            const std::size_t widx = ((f * g.channels + c) * g.kh + ki) * g.kw + kj;
            const float w = k[widx];
            const auto [lo, hi] = valid_cols(g, kj);
            if (gk) std::fill(acc.begin(), acc.end(), 0.0f);
            for (std::size_t oy = 0; oy < g.out_h; ++oy) {
              const std::ptrdiff_t iy = std::ptrdiff_t(oy + ki) - std::ptrdiff_t(g.pad);
              if (iy < 0 || iy >= std::ptrdiff_t(g.height)) continue;
              const float* __restrict grow = gof + oy * g.out_w;
              const std::size_t off = std::size_t(iy) * g.width + kj - g.pad;
              if (gin) {
                float* __restrict girow = gin + off;
                for (std::size_t ox = lo; ox < hi; ++ox) girow[ox] += w * grow[ox];
              }
              if (gk) {
                const float* __restrict irow = in + off;
                float* __restrict a = acc.data();
                for (std::size_t ox = lo; ox < hi; ++ox) a[ox] += grow[ox] * irow[ox];
              }
            }
            if (gk) {
              float total = 0.0f;
              for (float v : acc) total += v;
              gk[widx] += total;
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var kernels, std::size_t stride, std::size_t pad) {
  Graph& g = graph_of(x, kernels);
  const Tensor& xv = x.value();
  const Tensor& kv = kernels.value();
  require_rank(xv, 4, "conv2d");
  require_rank(kv, 4, "conv2d");
  require(stride >= 1, Errc::invalid_params, "conv2d stride must be >= 1");
  ConvGeometry geo{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), kv.dim(2), kv.dim(3), stride, pad, 0, 0};
  require(kv.dim(1) == geo.channels, Errc::shape_mismatch,
          "conv2d channels: input " + shape_string(xv.shape()) + ", kernels " + shape_string(kv.shape()));
  require(geo.kh <= geo.height + 2 * pad && geo.kw <= geo.width + 2 * pad, Errc::shape_mismatch,
          "conv2d kernel larger than padded input");
  require(pad < geo.kh && pad < geo.kw, Errc::invalid_params, "conv2d padding must be smaller than the kernel");
  geo.out_h = (geo.height + 2 * pad - geo.kh) / stride + 1;
  geo.out_w = (geo.width + 2 * pad - geo.kw) / stride + 1;
  Tensor out({geo.batch, geo.filters, geo.out_h, geo.out_w});

  if (stride == 1 && geo.channels * geo.kh * geo.kw <= kDirectConvMaxPatch) {
    conv_direct_forward(xv.ptr(), kv.ptr(), geo, out.ptr());
    return g.record("conv2d", std::move(out), {x, kernels}, [geo](const BackwardContext& ctx) {
      Tensor* gx = ctx.grad_inputs[0];
      Tensor* gk = ctx.grad_inputs[1];
      conv_direct_backward(ctx.inputs[0]->ptr(), ctx.inputs[1]->ptr(), ctx.grad_output.ptr(), geo,
                           gx ? gx->ptr() : nullptr, gk ? gk->ptr() : nullptr);
    });
  }

  const std::size_t patch = geo.patch(), plane = geo.out_plane();
  const std::size_t in_stride = geo.channels * geo.height * geo.width;
  const bool keep_cols = any_requires_grad(g, {x, kernels});
  auto cols = std::make_shared<std::vector<float>>(keep_cols ? geo.batch * patch * plane : patch * plane);
  ConstMatMap kmat(kv.ptr(), geo.filters, patch);
  for (std::size_t b = 0; b < geo.batch; ++b) {
    float* col = cols->data() + (keep_cols ? b * patch * plane : 0);
    im2col(xv.ptr() + b * in_stride, geo, col);
    MatMap(out.ptr() + b * geo.filters * plane, geo.filters, plane).noalias() = kmat * ConstMatMap(col, patch, plane);
  }
  if (!keep_cols) cols.reset();

  return g.record("conv2d", std::move(out), {x, kernels}, [geo, cols, in_stride](const BackwardContext& ctx) {
    const std::size_t patch = geo.patch(), plane = geo.out_plane();
    ConstMatMap kmat(ctx.inputs[1]->ptr(), geo.filters, patch);
    Tensor* gx = ctx.grad_inputs[0];
    Tensor* gk = ctx.grad_inputs[1];
    std::vector<float> gcol(gx ? patch * plane : 0);
    for (std::size_t b = 0; b < geo.batch; ++b) {
      ConstMatMap go(ctx.grad_output.ptr() + b * geo.filters * plane, geo.filters, plane);
      ConstMatMap col(cols->data() + b * patch * plane, patch, plane);
      if (gk) MatMap(gk->ptr(), geo.filters, patch).noalias() += go * col.transpose();
      if (gx) {
        MatMap(gcol.data(), patch, plane).noalias() = kmat.transpose() * go;
        col2im_add(gcol.data(), geo, gx->ptr() + b * in_stride);
      }
    }
  });
}

Var add_channel_bias(Var x, Var bias) {
  Graph& g = graph_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_rank(xv, 4, "add_channel_bias");
  const std::size_t batch = xv.dim(0), ch = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  require(bv.size() == ch, Errc::shape_mismatch, "add_channel_bias: bias size differs from channel count");
  Tensor out = xv;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      float* p = out.ptr() + (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += bv[c];
    }
  return g.record("add_channel_bias", std::move(out), {x, bias}, [batch, ch, plane](const BackwardContext& ctx) {
    if (ctx.grad_inputs[0]) ctx.grad_inputs[0]->add_(ctx.grad_output);
    if (Tensor* gb = ctx.grad_inputs[1]) {
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < ch; ++c) {
          const float* p = ctx.grad_output.ptr() + (b * ch + c) * plane;
          float acc = 0.0f;
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          (*gb)[c] += acc;
        }
    }
  });
}

Var max_pool2d(Var x, std::size_t size) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 4, "max_pool2d");
  require(size >= 1 && size <= xv.dim(2) && size <= xv.dim(3), Errc::shape_mismatch, "max_pool2d window too large");
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h / size, ow = w / size;
  Tensor out({xv.dim(0), xv.dim(1), oh, ow});
  auto arg = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = xv.ptr() + p * h * w;
    if (size == 2) {
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::size_t i0 = (2 * oy) * w + 2 * ox;
          const std::size_t cand[4] = {i0, i0 + 1, i0 + w, i0 + w + 1};
          std::size_t best = cand[0];
          for (int c = 1; c < 4; ++c) best = src[cand[c]] > src[best] ? cand[c] : best;
          const std::size_t o = (p * oh + oy) * ow + ox;
          out[o] = src[best];
          (*arg)[o] = static_cast<std::uint32_t>(p * h * w + best);
        }
      continue;
    }
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * size) * w + ox * size;
        for (std::size_t dy = 0; dy < size; ++dy)
          for (std::size_t dx = 0; dx < size; ++dx) {
            const std::size_t idx = (oy * size + dy) * w + ox * size + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = src[best];
        (*arg)[o] = static_cast<std::uint32_t>(p * h * w + best);
      }
  }
  return g.record("max_pool2d", std::move(out), {x}, [arg](const BackwardContext& ctx) {
    Tensor& gx = *ctx.grad_inputs[0];
    for (std::size_t o = 0; o < arg->size(); ++o) gx[(*arg)[o]] += ctx.grad_output[o];
  });
}

Tensor softmax(const Tensor& z) {
  require(z.rank() == 1 || z.rank() == 2, Errc::shape_mismatch, "softmax expects rank 1 or 2");
  const std::size_t cols = z.shape().back();
  const std::size_t rows = cols ? z.size() / cols : 0;
  Tensor out(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = z.ptr() + r * cols;
    float* o = out.ptr() + r * cols;
    const float mx = *std::max_element(in, in + cols);
    float total = 0.0f;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  return out;
}

Var softmax(Var z) {
  Graph& g = graph_of(z);
  Tensor out = softmax(z.value());
  return g.record("softmax", std::move(out), {z}, [](const BackwardContext& ctx) {
    const Tensor& y = ctx.output;
    const std::size_t cols = y.shape().back();
    const std::size_t rows = y.size() / cols;
    Tensor& gz = *ctx.grad_inputs[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const float* yr = y.ptr() + r * cols;
      const float* gr = ctx.grad_output.ptr() + r * cols;
      float dot = 0.0f;
      for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
      for (std::size_t c = 0; c < cols; ++c) gz[r * cols + c] += yr[c] * (gr[c] - dot);
    }
  });
}

namespace {

void check_labels(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2, Errc::shape_mismatch, "cross_entropy expects B×K logits");
  require(labels.size() == logits.dim(0), Errc::shape_mismatch, "cross_entropy: label count differs from batch");
  const int k = static_cast<int>(logits.dim(1));
  for (int y : labels) {
    if (y < 0 || y >= k) fail(Errc::label_out_of_range, "label " + std::to_string(y) + " not in [0, " + std::to_string(k) + ")");
  }
}

// log Σ exp(row) with max shift.
float log_sum_exp(const float* row, std::size_t n) {
  const float mx = *std::max_element(row, row + n);
  float total = 0.0f;
  for (std::size_t c = 0; c < n; ++c) total += std::exp(row[c] - mx);
  return mx + std::log(total);
}

}  // namespace

std::vector<float> cross_entropy_per_example(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  const std::size_t k = logits.dim(1);
  std::vector<float> out(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const float* row = logits.ptr() + b * k;
    out[b] = log_sum_exp(row, k) - row[labels[b]];
  }
  return out;
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Graph& g = graph_of(logits);
  const Tensor& z = logits.value();
  std::vector<float> per = cross_entropy_per_example(z, labels);
  float total = 0.0f;
  for (float v : per) total += v;
  const std::size_t batch = per.size();
  require(batch > 0, Errc::shape_mismatch, "cross_entropy on empty batch");
  std::vector<int> ys(labels.begin(), labels.end());
  return g.record("cross_entropy", Tensor::scalar(total / static_cast<float>(batch)), {logits},
                  [ys = std::move(ys)](const BackwardContext& ctx) {
                    const Tensor& z = *ctx.inputs[0];
                    const std::size_t b = z.dim(0), k = z.dim(1);
                    const float coef = ctx.grad_output[0] / static_cast<float>(b);
                    Tensor p = softmax(z);
                    Tensor& gz = *ctx.grad_inputs[0];
                    for (std::size_t r = 0; r < b; ++r) {
                      for (std::size_t c = 0; c < k; ++c) {
                        const float onehot = (static_cast<int>(c) == ys[r]) ? 1.0f : 0.0f;
                        gz[r * k + c] += coef * (p[r * k + c] - onehot);
                      }
                    }
                  });
}

Var weighted_sum(std::span<const Var> experts, Var weights) {
  require(!experts.empty(), Errc::shape_mismatch, "weighted_sum needs at least one input");
  Graph& g = graph_of(weights);
  const Tensor& w = weights.value();
  require_rank(w, 2, "weighted_sum");
  const std::size_t m = experts.size();
  require(w.dim(1) == m, Errc::shape_mismatch, "weighted_sum: weight width differs from expert count");
  const Shape& s = experts[0].value().shape();
  require(s.size() == 2 && s[0] == w.dim(0), Errc::shape_mismatch, "weighted_sum: expert output must be B×K");
  const std::size_t batch = s[0], k = s[1];
  std::vector<Var> inputs;
  for (Var e : experts) {
    graph_of(e, weights);
    require(e.value().shape() == s, Errc::shape_mismatch, "weighted_sum: expert outputs differ in shape");
    inputs.push_back(e);
  }
  inputs.push_back(weights);

  Tensor out(s);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      const float wi = w[b * m + i];
      const float* e = experts[i].value().ptr() + b * k;
      float* o = out.ptr() + b * k;
      if (i == 0) {
        for (std::size_t c = 0; c < k; ++c) o[c] = wi * e[c];
      } else {
        for (std::size_t c = 0; c < k; ++c) o[c] = o[c] + wi * e[c];
      }
    }
  }
  return g.record("weighted_sum", std::move(out), std::move(inputs), [m, batch, k](const BackwardContext& ctx) {
    const Tensor& w = *ctx.inputs[m];
    const Tensor& go = ctx.grad_output;
    for (std::size_t i = 0; i < m; ++i) {
      if (Tensor* ge = ctx.grad_inputs[i]) {
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < k; ++c) (*ge)[b * k + c] += w[b * m + i] * go[b * k + c];
      }
    }
    if (Tensor* gw = ctx.grad_inputs[m]) {
      for (std::size_t i = 0; i < m; ++i) {
        const Tensor& e = *ctx.inputs[i];
        for (std::size_t b = 0; b < batch; ++b) {
          float acc = 0.0f;
          for (std::size_t c = 0; c < k; ++c) acc += go[b * k + c] * e[b * k + c];
          (*gw)[b * m + i] += acc;
        }
      }
    }
  });
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require(logits.rank() == 2, Errc::shape_mismatch, "argmax_rows expects B×K");
  const std::size_t k = logits.dim(1);
  std::vector<int> out(logits.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b) {
    const float* row = logits.ptr() + b * k;
    out[b] = static_cast<int>(std::max_element(row, row + k) - row);  // first max wins ties
  }
  return out;
}

}  // namespace more
