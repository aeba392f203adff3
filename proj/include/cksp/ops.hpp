#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cksp/tape.hpp"
#include "cksp/tensor.hpp"

// Differentiable operators over Tape values. Temporal tensors use the
// layout [c,1,w] for one sample or [b,c,1,w] for a batch.
namespace cksp::ops {

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

struct TemporalDims {
  std::size_t batch;
  std::size_t channels;
  std::size_t width;
  bool batched;
};

inline TemporalDims temporal_dims(const Shape& s, const char* op) {
  if (s.size() == 3 && s[1] == 1) return {1, s[0], s[2], false};
  if (s.size() == 4 && s[2] == 1) return {s[0], s[1], s[3], true};
  throw ShapeError(std::string(op) + ": expected [c,1,w] or [b,c,1,w], got " + shape_str(s));
}

inline Shape temporal_shape(const TemporalDims& d, std::size_t channels, std::size_t width) {
  return d.batched ? Shape{d.batch, channels, 1, width} : Shape{channels, 1, width};
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.tape().record("add", std::move(out), {a, b}, [](BackwardContext& ctx) {
    for (auto g : ctx.in_grads) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += ctx.out_grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.tape().record("mul", std::move(out), {a, b}, [](BackwardContext& ctx) {
    auto av = ctx.in_values[0]->data();
    auto bv = ctx.in_values[1]->data();
    if (!ctx.in_grads[0].empty()) {
      for (std::size_t i = 0; i < av.size(); ++i) ctx.in_grads[0][i] += ctx.out_grad[i] * bv[i];
    }
    if (!ctx.in_grads[1].empty()) {
      for (std::size_t i = 0; i < av.size(); ++i) ctx.in_grads[1][i] += ctx.out_grad[i] * av[i];
    }
  });
}

/// alpha * x + beta, elementwise.
inline Var affine(const Var& x, double alpha, double beta = 0.0) {
  Tensor out = x.value();
  for (double& v : out.values()) v = alpha * v + beta;
  return x.tape().record("affine", std::move(out), {x}, [alpha](BackwardContext& ctx) {
    auto g = ctx.in_grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * ctx.out_grad[i];
  });
}

inline Var scale(const Var& x, double alpha) { return affine(x, alpha, 0.0); }

inline Var exp(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::exp(v);
  return x.tape().record("exp", std::move(out), {x}, [](BackwardContext& ctx) {
    auto y = ctx.out_value->data();
    auto g = ctx.in_grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += ctx.out_grad[i] * y[i];
  });
}

/// x^p for a scalar exponent. The derivative is taken as 0 when p == 0.
inline Var pow(const Var& x, double p) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::pow(v, p);
  return x.tape().record("pow", std::move(out), {x}, [p](BackwardContext& ctx) {
    if (p == 0.0) return;
    auto xv = ctx.in_values[0]->data();
    auto g = ctx.in_grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += ctx.out_grad[i] * p * (p == 1.0 ? 1.0 : std::pow(xv[i], p - 1.0));
    }
  });
}

inline Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return x.tape().record("relu", std::move(out), {x}, [](BackwardContext& ctx) {
    auto xv = ctx.in_values[0]->data();
    auto g = ctx.in_grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) g[i] += ctx.out_grad[i];
    }
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record("sum", Tensor::scalar(s), {x}, [](BackwardContext& ctx) {
    const double go = ctx.out_grad[0];
    for (double& g : ctx.in_grads[0]) g += go;
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

// ---------------------------------------------------------------- reshaping

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x}, [](BackwardContext& ctx) {
    auto g = ctx.in_grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += ctx.out_grad[i];
  });
}

/// Rows [begin, end) along the leading dimension.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  detail::require(begin < end && end <= s[0], "slice_rows: invalid range [" + std::to_string(begin) + "," +
                                                    std::to_string(end) + ") for " + shape_str(s));
  const std::size_t row = x.value().numel() / s[0];
  Shape os = s;
  os[0] = end - begin;
  auto src = x.value().data();
  std::vector<double> data(src.begin() + static_cast<std::ptrdiff_t>(begin * row),
                           src.begin() + static_cast<std::ptrdiff_t>(end * row));
  return x.tape().record("slice_rows", Tensor(std::move(os), std::move(data)), {x},
                         [offset = begin * row](BackwardContext& ctx) {
                           auto g = ctx.in_grads[0];
                           for (std::size_t i = 0; i < ctx.out_grad.size(); ++i) g[offset + i] += ctx.out_grad[i];
                         });
}

/// Concatenate along the leading dimension.
inline Var concat_rows(const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  Shape os = parts.front().shape();
  os[0] = 0;
  std::vector<double> data;
  for (const Var& p : parts) {
    Shape s = p.shape();
    Shape tail(s.begin() + 1, s.end());
    Shape want(os.begin() + 1, os.end());
    detail::require(tail == want, "concat_rows: trailing shape mismatch " + shape_str(s));
    os[0] += s[0];
    auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  return parts.front().tape().record("concat_rows", Tensor(std::move(os), std::move(data)), parts,
                                     [](BackwardContext& ctx) {
                                       std::size_t offset = 0;
                                       for (std::size_t k = 0; k < ctx.in_values.size(); ++k) {
                                         const std::size_t n = ctx.in_values[k]->numel();
                                         auto g = ctx.in_grads[k];
                                         if (!g.empty()) {
                                           for (std::size_t i = 0; i < n; ++i) g[i] += ctx.out_grad[offset + i];
                                         }
                                         offset += n;
                                       }
                                     });
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  detail::require(as.size() == 2 && bs.size() == 2,
                  "matmul: expected 2-D operands, got " + shape_str(as) + " and " + shape_str(bs));
  detail::require(as[1] == bs[0], "matmul: inner dimensions differ (" + shape_str(as) + " x " + shape_str(bs) + ")");
  const std::size_t m = as[0], k = as[1], n = bs[1];
  Tensor out(Shape{m, n});
  auto A = a.value().data();
  auto B = b.value().data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
    }
  }
  return a.tape().record("matmul", std::move(out), {a, b}, [m, k, n](BackwardContext& ctx) {
    auto A = ctx.in_values[0]->data();
    auto B = ctx.in_values[1]->data();
    auto G = ctx.out_grad;
    if (auto gA = ctx.in_grads[0]; !gA.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          gA[i * k + p] += acc;
        }
    }
    if (auto gB = ctx.in_grads[1]; !gB.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gB[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

/// y = W x + b for x of shape [n] or [b,n]; W is [m,n], bias [m].
inline Var fully_connected(const Var& x, const Var& weight, const Var& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  detail::require(ws.size() == 2, "fully_connected: weight must be [m,n], got " + shape_str(ws));
  detail::require(xs.size() == 1 || xs.size() == 2, "fully_connected: input must be [n] or [b,n], got " + shape_str(xs));
  const std::size_t n = xs.back(), m = ws[0];
  const std::size_t rows = xs.size() == 2 ? xs[0] : 1;
  detail::require(ws[1] == n, "fully_connected: weight " + shape_str(ws) + " does not accept input " + shape_str(xs));
  detail::require(bias.shape() == Shape{m}, "fully_connected: bias must be [" + std::to_string(m) + "], got " +
                                                shape_str(bias.shape()));
  Tensor out(xs.size() == 2 ? Shape{rows, m} : Shape{m});
  auto X = x.value().data();
  auto W = weight.value().data();
  auto Bv = bias.value().data();
  auto Y = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < m; ++i) {
      double acc = Bv[i];
      for (std::size_t j = 0; j < n; ++j) acc += W[i * n + j] * X[r * n + j];
      Y[r * m + i] = acc;
    }
  return x.tape().record("fully_connected", std::move(out), {x, weight, bias}, [rows, m, n](BackwardContext& ctx) {
    auto X = ctx.in_values[0]->data();
    auto W = ctx.in_values[1]->data();
    auto G = ctx.out_grad;
    auto gx = ctx.in_grads[0];
    auto gw = ctx.in_grads[1];
    auto gb = ctx.in_grads[2];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < m; ++i) {
        const double go = G[r * m + i];
        if (!gb.empty()) gb[i] += go;
        if (!gw.empty())
          for (std::size_t j = 0; j < n; ++j) gw[i * n + j] += go * X[r * n + j];
        if (!gx.empty())
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += go * W[i * n + j];
      }
  });
}

// ---------------------------------------------------------------- temporal ops

/// 1x3 cross-correlation along time. weight is [c_out,3,1,c_in]; element
/// (o,k,0,i) multiplies input channel i at offset k. bias may be omitted.
inline Var conv1x3(const Var& x, const Var& weight, const std::optional<Var>& bias, std::size_t stride,
                   std::size_t padding) {
  const auto d = detail::temporal_dims(x.shape(), "conv1x3");
  const Shape& ws = weight.shape();
  detail::require(stride >= 1, "conv1x3: stride must be positive");
  detail::require(ws.size() == 4 && ws[1] == 3 && ws[2] == 1,
                  "conv1x3: weight must be [c_out,3,1,c_in], got " + shape_str(ws));
  detail::require(ws[3] == d.channels, "conv1x3: weight expects " + std::to_string(ws[3]) +
                                           " input channels, input has " + std::to_string(d.channels));
  detail::require(d.width + 2 * padding >= 3, "conv1x3: padded width " + std::to_string(d.width + 2 * padding) +
                                                  " is smaller than the kernel");
  const std::size_t cout = ws[0], cin = d.channels, w = d.width, nb = d.batch;
  if (bias) {
    detail::require(bias->shape() == Shape{cout}, "conv1x3: bias must be [" + std::to_string(cout) + "], got " +
                                                      shape_str(bias->shape()));
  }
  const std::size_t wout = (w + 2 * padding - 3) / stride + 1;
  Tensor out(detail::temporal_shape(d, cout, wout));
  auto X = x.value().data();
  auto W = weight.value().data();
  auto Y = out.data();
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t o = 0; o < cout; ++o) {
      double* y = &Y[(b * cout + o) * wout];
      if (bias) std::fill(y, y + wout, bias->value()[o]);
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < cin; ++i) {
          const double wk = W[(o * 3 + k) * cin + i];
          const double* xi = &X[(b * cin + i) * w];
          for (std::size_t t = 0; t < wout; ++t) {
            const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * stride + k) - pad;
            if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(w)) y[t] += wk * xi[pos];
          }
        }
    }
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return x.tape().record(
      "conv1x3", std::move(out), std::move(inputs), [=](BackwardContext& ctx) {
        auto X = ctx.in_values[0]->data();
        auto W = ctx.in_values[1]->data();
        auto G = ctx.out_grad;
        auto gx = ctx.in_grads[0];
        auto gw = ctx.in_grads[1];
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t o = 0; o < cout; ++o) {
            const double* go = &G[(b * cout + o) * wout];
            if (ctx.in_grads.size() > 2 && !ctx.in_grads[2].empty()) {
              double s = 0.0;
              for (std::size_t t = 0; t < wout; ++t) s += go[t];
              ctx.in_grads[2][o] += s;
            }
            for (std::size_t k = 0; k < 3; ++k)
              for (std::size_t i = 0; i < cin; ++i) {
                const std::size_t widx = (o * 3 + k) * cin + i;
                const double wk = W[widx];
                const double* xi = &X[(b * cin + i) * w];
                double acc = 0.0;
                for (std::size_t t = 0; t < wout; ++t) {
                  const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * stride + k) - pad;
                  if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(w)) {
                    acc += go[t] * xi[pos];
                    if (!gx.empty()) gx[(b * cin + i) * w + static_cast<std::size_t>(pos)] += wk * go[t];
                  }
                }
                if (!gw.empty()) gw[widx] += acc;
              }
          }
      });
}

/// Max over sliding windows along time. Ties resolve to the lowest index,
/// which is also where the gradient is routed.
inline Var maxpool1d(const Var& x, std::size_t window, std::size_t stride) {
  const auto d = detail::temporal_dims(x.shape(), "maxpool1d");
  detail::require(window >= 1 && stride >= 1, "maxpool1d: window and stride must be positive");
  detail::require(d.width >= window, "maxpool1d: window " + std::to_string(window) + " exceeds width " +
                                         std::to_string(d.width));
  const std::size_t wout = (d.width - window) / stride + 1;
  const std::size_t planes = d.batch * d.channels;
  Tensor out(detail::temporal_shape(d, d.channels, wout));
  std::vector<std::size_t> argmax(planes * wout);
  auto X = x.value().data();
  auto Y = out.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t t = 0; t < wout; ++t) {
      std::size_t best = p * d.width + t * stride;
      for (std::size_t j = 1; j < window; ++j) {
        const std::size_t idx = p * d.width + t * stride + j;
        if (X[idx] > X[best]) best = idx;
      }
      argmax[p * wout + t] = best;
      Y[p * wout + t] = X[best];
    }
  return x.tape().record("maxpool1d", std::move(out), {x}, [argmax = std::move(argmax)](BackwardContext& ctx) {
    auto g = ctx.in_grads[0];
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += ctx.out_grad[i];
  });
}

/// Per-channel mean over time: [c,1,w] -> [c], [b,c,1,w] -> [b,c].
inline Var global_avg_pool(const Var& x) {
  const auto d = detail::temporal_dims(x.shape(), "global_avg_pool");
  const std::size_t planes = d.batch * d.channels, w = d.width;
  Tensor out(d.batched ? Shape{d.batch, d.channels} : Shape{d.channels});
  auto X = x.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (std::size_t t = 0; t < w; ++t) s += X[p * w + t];
    out[p] = s / static_cast<double>(w);
  }
  return x.tape().record("global_avg_pool", std::move(out), {x}, [planes, w](BackwardContext& ctx) {
    auto g = ctx.in_grads[0];
    const double inv = 1.0 / static_cast<double>(w);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t t = 0; t < w; ++t) g[p * w + t] += ctx.out_grad[p] * inv;
  });
}

// ---------------------------------------------------------------- classification

/// Numerically stable log-softmax over the last dimension of [k] or [b,k].
inline Var log_softmax(const Var& x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 1 || s.size() == 2, "log_softmax: expected [k] or [b,k], got " + shape_str(s));
  const std::size_t k = s.back(), rows = x.value().numel() / k;
  Tensor out = x.value();
  auto Y = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* y = &Y[r * k];
    const double mx = *std::max_element(y, y + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(y[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) y[j] -= lse;
  }
  return x.tape().record("log_softmax", std::move(out), {x}, [rows, k](BackwardContext& ctx) {
    auto Y = ctx.out_value->data();
    auto g = ctx.in_grads[0];
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < k; ++j) gs += ctx.out_grad[r * k + j];
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += ctx.out_grad[r * k + j] - std::exp(Y[r * k + j]) * gs;
    }
  });
}

/// out[r] = x[r, index[r]] for x of shape [b,k].
inline Var gather_rows(const Var& x, const std::vector<std::size_t>& index) {
  const Shape& s = x.shape();
  detail::require(s.size() == 2, "gather_rows: expected [b,k], got " + shape_str(s));
  detail::require(index.size() == s[0], "gather_rows: need one index per row");
  const std::size_t k = s[1];
  Tensor out(Shape{s[0]});
  for (std::size_t r = 0; r < s[0]; ++r) {
    detail::require(index[r] < k, "gather_rows: index " + std::to_string(index[r]) + " out of range [0," +
                                      std::to_string(k) + ")");
    out[r] = x.value()[r * k + index[r]];
  }
  return x.tape().record("gather_rows", std::move(out), {x}, [index, k](BackwardContext& ctx) {
    auto g = ctx.in_grads[0];
    for (std::size_t r = 0; r < index.size(); ++r) g[r * k + index[r]] += ctx.out_grad[r];
  });
}

// ---------------------------------------------------------------- normalization

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> variance;  // population (biased) variance
  std::size_t count = 0;         // elements per channel
};

struct BatchNormResult {
  Var output;
  BatchStats stats;
};

namespace detail {

struct ChannelLayout {
  std::size_t batch;
  std::size_t channels;
  std::size_t inner;
};

inline ChannelLayout channel_layout(const Shape& s, const char* op) {
  require(s.size() >= 2, std::string(op) + ": expected [b,c,...], got " + shape_str(s));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

}  // namespace detail

/// Training-mode batch normalization over every axis except the channel
/// axis (axis 1), followed by the per-channel affine gamma * x_hat + beta.
inline BatchNormResult batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const auto L = detail::channel_layout(x.shape(), "batch_norm_train");
  detail::require(L.batch >= 2, "batch_norm_train: training mode needs a batch of at least 2, got " +
                                    std::to_string(L.batch));
  detail::require(gamma.shape() == Shape{L.channels} && beta.shape() == Shape{L.channels},
                  "batch_norm_train: affine parameters must be [" + std::to_string(L.channels) + "]");
  const std::size_t n = L.batch * L.inner;
  BatchStats stats{std::vector<double>(L.channels, 0.0), std::vector<double>(L.channels, 0.0), n};
  auto X = x.value().data();
  auto at = [&](std::size_t b, std::size_t c, std::size_t j) { return (b * L.channels + c) * L.inner + j; };
  for (std::size_t c = 0; c < L.channels; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < L.batch; ++b)
      for (std::size_t j = 0; j < L.inner; ++j) s += X[at(b, c, j)];
    const double mu = s / static_cast<double>(n);
    double v = 0.0;
    for (std::size_t b = 0; b < L.batch; ++b)
      for (std::size_t j = 0; j < L.inner; ++j) {
        const double dlt = X[at(b, c, j)] - mu;
        v += dlt * dlt;
      }
    stats.mean[c] = mu;
    stats.variance[c] = v / static_cast<double>(n);
  }
  std::vector<double> inv_std(L.channels);
  for (std::size_t c = 0; c < L.channels; ++c) inv_std[c] = 1.0 / std::sqrt(stats.variance[c] + eps);
  Tensor xhat(x.shape());
  Tensor out(x.shape());
  auto G = gamma.value().data();
  auto Bt = beta.value().data();
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t c = 0; c < L.channels; ++c)
      for (std::size_t j = 0; j < L.inner; ++j) {
        const std::size_t i = at(b, c, j);
        xhat[i] = (X[i] - stats.mean[c]) * inv_std[c];
        out[i] = G[c] * xhat[i] + Bt[c];
      }
  Var y = x.tape().record(
      "batch_norm_train", std::move(out), {x, gamma, beta},
      [L, n, inv_std, xhat = std::move(xhat)](BackwardContext& ctx) {
        auto G = ctx.in_values[1]->data();
        auto dy = ctx.out_grad;
        auto at = [&](std::size_t b, std::size_t c, std::size_t j) { return (b * L.channels + c) * L.inner + j; };
        for (std::size_t c = 0; c < L.channels; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < L.batch; ++b)
            for (std::size_t j = 0; j < L.inner; ++j) {
              const std::size_t i = at(b, c, j);
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * xhat[i];
            }
          if (!ctx.in_grads[1].empty()) ctx.in_grads[1][c] += sum_dy_xhat;
          if (!ctx.in_grads[2].empty()) ctx.in_grads[2][c] += sum_dy;
          if (auto gx = ctx.in_grads[0]; !gx.empty()) {
            const double k = G[c] * inv_std[c];
            const double mdy = sum_dy / static_cast<double>(n);
            const double mdx = sum_dy_xhat / static_cast<double>(n);
            for (std::size_t b = 0; b < L.batch; ++b)
              for (std::size_t j = 0; j < L.inner; ++j) {
                const std::size_t i = at(b, c, j);
                gx[i] += k * (dy[i] - mdy - xhat[i] * mdx);
              }
          }
        }
      });
  return {y, std::move(stats)};
}

/// Inference-mode batch normalization with fixed per-channel statistics.
inline Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, std::span<const double> running_mean,
                           std::span<const double> running_var, double eps) {
  const auto L = detail::channel_layout(x.shape(), "batch_norm_eval");
  detail::require(gamma.shape() == Shape{L.channels} && beta.shape() == Shape{L.channels} &&
                      running_mean.size() == L.channels && running_var.size() == L.channels,
                  "batch_norm_eval: per-channel parameters must have length " + std::to_string(L.channels));
  std::vector<double> inv_std(L.channels), mu(running_mean.begin(), running_mean.end());
  for (std::size_t c = 0; c < L.channels; ++c) inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
  Tensor out(x.shape());
  auto X = x.value().data();
  auto G = gamma.value().data();
  auto Bt = beta.value().data();
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t c = 0; c < L.channels; ++c)
      for (std::size_t j = 0; j < L.inner; ++j) {
        const std::size_t i = (b * L.channels + c) * L.inner + j;
        out[i] = G[c] * (X[i] - mu[c]) * inv_std[c] + Bt[c];
      }
  return x.tape().record("batch_norm_eval", std::move(out), {x, gamma, beta},
                         [L, mu, inv_std](BackwardContext& ctx) {
                           auto X = ctx.in_values[0]->data();
                           auto G = ctx.in_values[1]->data();
                           for (std::size_t b = 0; b < L.batch; ++b)
                             for (std::size_t c = 0; c < L.channels; ++c)
                               for (std::size_t j = 0; j < L.inner; ++j) {
                                 const std::size_t i = (b * L.channels + c) * L.inner + j;
                                 const double go = ctx.out_grad[i];
                                 const double xh = (X[i] - mu[c]) * inv_std[c];
                                 if (!ctx.in_grads[0].empty()) ctx.in_grads[0][i] += go * G[c] * inv_std[c];
                                 if (!ctx.in_grads[1].empty()) ctx.in_grads[1][c] += go * xh;
                                 if (!ctx.in_grads[2].empty()) ctx.in_grads[2][c] += go;
                               }
                         });
}

}  // namespace cksp::ops
