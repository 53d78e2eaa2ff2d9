#pragma once

// Forward and backward passes for every layer of the model:
// convolution, the inner-ensemble-average (IEA) convolution, batch norm,
// ReLU, max pooling, average pooling, the linear head and softmax
// cross-entropy. Each forward optionally fills a cache; the matching
// backward consumes it and returns gradients shaped like the parameters.

#include <cmath>
#include <cstddef>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "iea/tensor.hpp"

namespace iea {

// ===========================================================================
// Convolution

struct ConvParams {
  Tensor weight;  // Cout x Cin x kh x kw
  Tensor bias;    // Cout
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel_h() const { return weight.dim(2); }
  std::size_t kernel_w() const { return weight.dim(3); }
  std::size_t param_count() const { return weight.size() + bias.size(); }

  bool same_hyperparams(const ConvParams& o) const {
    return weight.shape() == o.weight.shape() && bias.shape() == o.bias.shape() && stride == o.stride &&
           padding == o.padding;
  }

  void validate() const {
    if (weight.rank() != 4) throw ConfigError("conv weight must be Cout x Cin x kh x kw, got " + shape_str(weight.shape()));
    if (bias.rank() != 1 || bias.dim(0) != weight.dim(0))
      throw ConfigError("conv bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(weight.dim(0)) +
                        " output channels");
    if (stride == 0) throw ConfigError("conv stride must be positive");
  }

  // Kaiming-uniform weights, zero bias.
  static ConvParams create(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                           std::size_t padding, SeededRng& rng) {
    ConvParams p;
    p.weight = fill_random({out_channels, in_channels, kernel, kernel}, InitScheme::kKaimingUniform, rng);
    p.bias = Tensor::zeros({out_channels});
    p.stride = stride;
    p.padding = padding;
    return p;
  }
};

struct ConvCache {
  Shape input_shape;
  Tensor columns;  // N x (Cin*kh*kw) x (Ho*Wo)
  bool valid() const { return !input_shape.empty() && !columns.empty(); }
};

struct ConvGrads {
  Tensor input;   // empty when not requested
  Tensor weight;
  Tensor bias;
};

namespace detail {

inline ConvGeometry conv_geometry(const Shape& input_shape, const ConvParams& p) {
  p.validate();
  if (input_shape.size() != 4) throw DimensionError("conv expects N x C x H x W input, got " + shape_str(input_shape));
  if (input_shape[1] != p.in_channels())
    throw DimensionError("conv channel mismatch: input has " + std::to_string(input_shape[1]) + " channels, weight expects " +
                         std::to_string(p.in_channels()));
  ConvGeometry g{input_shape[1], input_shape[2], input_shape[3], p.kernel_h(), p.kernel_w(), p.stride, p.padding};
  g.validate();
  return g;
}

inline Tensor lower_batch(const Tensor& x, const ConvGeometry& g) {
  const std::size_t n = x.dim(0);
  Tensor cols = Tensor::uninitialized({n, g.patch_size(), g.positions()});
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t col_stride = g.patch_size() * g.positions();
  for (std::size_t b = 0; b < n; ++b) kernel::im2col(g, x.raw() + b * in_stride, cols.raw() + b * col_stride);
  return cols;
}

// One sample: dst[Cout x P] = W * col + bias.
inline void conv_sample(const ConvParams& p, const double* col, std::size_t cout, std::size_t K, std::size_t P,
                        double* dst) {
  kernel::gemm_nn(cout, P, K, p.weight.raw(), col, dst, false);
  for (std::size_t o = 0; o < cout; ++o) {
    const double bo = p.bias[o];
    for (std::size_t j = 0; j < P; ++j) dst[o * P + j] += bo;
  }
}

inline Tensor conv_from_columns(const Tensor& cols, const ConvParams& p, const ConvGeometry& g) {
  const std::size_t n = cols.dim(0), cout = p.out_channels(), K = g.patch_size(), P = g.positions();
  Tensor out = Tensor::uninitialized({n, cout, g.out_h(), g.out_w()});
  for (std::size_t b = 0; b < n; ++b) conv_sample(p, cols.raw() + b * K * P, cout, K, P, out.raw() + b * cout * P);
  return out;
}

inline Tensor conv_input_grad(const Tensor& grad_out, const ConvParams& p, const ConvGeometry& g,
                              const Shape& input_shape) {
  const std::size_t n = input_shape[0], cout = p.out_channels(), K = g.patch_size(), P = g.positions();
  Tensor input = Tensor::uninitialized(input_shape);
  std::vector<double> grad_col(K * P);
  const std::size_t in_stride = g.channels * g.height * g.width;
  for (std::size_t b = 0; b < n; ++b) {
    kernel::gemm_tn(K, P, cout, p.weight.raw(), grad_out.raw() + b * cout * P, grad_col.data(), false);
    kernel::col2im(g, grad_col.data(), input.raw() + b * in_stride);
  }
  return input;
}

inline ConvGrads conv_backward_columns(const Tensor& grad_out, const ConvParams& p, const ConvGeometry& g,
                                       const Shape& input_shape, const Tensor& cols, bool need_input_grad) {
  const std::size_t n = input_shape[0], cout = p.out_channels(), K = g.patch_size(), P = g.positions();
  const Shape expected{n, cout, g.out_h(), g.out_w()};
  if (grad_out.shape() != expected)
    throw DimensionError("conv backward: grad_out shape " + shape_str(grad_out.shape()) + " does not match forward output " +
                         shape_str(expected));
  ConvGrads grads;
  grads.weight = Tensor::zeros(p.weight.shape());
  grads.bias = Tensor::zeros(p.bias.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const double* go = grad_out.raw() + b * cout * P;
    kernel::gemm_nt(cout, K, P, go, cols.raw() + b * K * P, grads.weight.raw(), true);
    for (std::size_t o = 0; o < cout; ++o) grads.bias[o] += kernel::lane_sum(go + o * P, P);
  }
  if (need_input_grad) grads.input = conv_input_grad(grad_out, p, g, input_shape);
  return grads;
}

}  // namespace detail

// out[n,o,i,j] = bias[o] + sum_{c,u,v} w[o,c,u,v] * x_padded[n,c,i*s+u,j*s+v]
inline Tensor conv_forward(const Tensor& x, const ConvParams& p, ConvCache* cache = nullptr) {
  const ConvGeometry g = detail::conv_geometry(x.shape(), p);
  Tensor cols = detail::lower_batch(x, g);
  Tensor out = detail::conv_from_columns(cols, p, g);
  if (cache) {
    cache->input_shape = x.shape();
    cache->columns = std::move(cols);
  }
  return out;
}

inline ConvGrads conv_backward(const Tensor& grad_out, const ConvParams& p, const ConvCache& cache,
                               bool need_input_grad = true) {
  if (!cache.valid()) throw UsageError("conv_backward called without a forward cache");
  const ConvGeometry g = detail::conv_geometry(cache.input_shape, p);
  return detail::conv_backward_columns(grad_out, p, g, cache.input_shape, cache.columns, need_input_grad);
}

// ===========================================================================
// Inner ensemble average: the mean of m independently weighted convolutions
// that share every hyper-parameter.

struct IeaParams {
  std::vector<ConvParams> members;

  std::size_t m() const { return members.size(); }

  void validate() const {
    if (members.empty()) throw ConfigError("IEA layer needs at least one member");
    for (const auto& mem : members) {
      mem.validate();
      if (!mem.same_hyperparams(members.front()))
        throw ConfigError("IEA members must share kernel, channel, stride and padding settings");
    }
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& mem : members) n += mem.param_count();
    return n;
  }

  // Each member draws its own weights from the stream, in member order.
  static IeaParams create(std::size_t m, std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                          std::size_t stride, std::size_t padding, SeededRng& rng) {
    if (m == 0) throw ConfigError("m must be at least 1");
    IeaParams p;
    p.members.reserve(m);
    for (std::size_t i = 0; i < m; ++i)
      p.members.push_back(ConvParams::create(in_channels, out_channels, kernel, stride, padding, rng));
    return p;
  }
};

// All members see the same input, so the lowered columns are shared.
struct IeaCache {
  ConvCache conv;
  bool valid() const { return conv.valid(); }
};

struct IeaGrads {
  Tensor input;                    // empty when not requested
  std::vector<ConvGrads> members;  // weight/bias gradients per member
};

inline Tensor iea_forward(const Tensor& x, const IeaParams& p, IeaCache* cache = nullptr) {
  p.validate();
  const ConvGeometry g = detail::conv_geometry(x.shape(), p.members.front());
  Tensor cols = detail::lower_batch(x, g);
  const std::size_t n = x.dim(0), cout = p.members.front().out_channels(), K = g.patch_size(), P = g.positions();
  Tensor out = Tensor::uninitialized({n, cout, g.out_h(), g.out_w()});
  std::vector<double> member_out(p.m() > 1 ? cout * P : 0);
  const double inv_m = 1.0 / static_cast<double>(p.m());
  // One sample at a time so the member outputs being summed stay in cache.
  for (std::size_t b = 0; b < n; ++b) {
    const double* col = cols.raw() + b * K * P;
    double* dst = out.raw() + b * cout * P;
    detail::conv_sample(p.members.front(), col, cout, K, P, dst);
    for (std::size_t i = 1; i < p.m(); ++i) {
      detail::conv_sample(p.members[i], col, cout, K, P, member_out.data());
      for (std::size_t j = 0; j < cout * P; ++j) dst[j] += member_out[j];
    }
    if (p.m() > 1)
      for (std::size_t j = 0; j < cout * P; ++j) dst[j] *= inv_m;
  }
  if (cache) {
    cache->conv.input_shape = x.shape();
    cache->conv.columns = std::move(cols);
  }
  return out;
}

// Every member receives grad_out / m; the input gradient is the sum of the
// member input gradients in member order. Members share their input and their
// upstream gradient, so their weight and bias gradients are the same numbers
// and are computed once.
inline IeaGrads iea_backward(const Tensor& grad_out, const IeaParams& p, const IeaCache& cache,
                             bool need_input_grad = true) {
  if (!cache.valid()) throw UsageError("iea_backward called without a forward cache");
  p.validate();
  const ConvGeometry g = detail::conv_geometry(cache.conv.input_shape, p.members.front());
  const Tensor member_grad = p.m() > 1 ? scaled(grad_out, 1.0 / static_cast<double>(p.m())) : grad_out;
  ConvGrads shared = detail::conv_backward_columns(member_grad, p.members.front(), g, cache.conv.input_shape,
                                                   cache.conv.columns, need_input_grad);
  IeaGrads grads;
  grads.input = std::move(shared.input);
  for (std::size_t i = 1; need_input_grad && i < p.m(); ++i)
    add_inplace(grads.input, detail::conv_input_grad(member_grad, p.members[i], g, cache.conv.input_shape));
  grads.members.assign(p.m(), ConvGrads{Tensor(), std::move(shared.weight), std::move(shared.bias)});
  return grads;
}

// ===========================================================================
// Batch normalization over N and the spatial axes (one statistic per channel).

enum class Mode { kTrain, kEval };

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;
  Mode mode = Mode::kTrain;

  std::size_t channels() const { return gamma.size(); }
  std::size_t param_count() const { return gamma.size() + beta.size(); }

  static BatchNormState create(std::size_t channels) {
    BatchNormState s;
    s.gamma = Tensor::ones({channels});
    s.beta = Tensor::zeros({channels});
    s.running_mean = Tensor::zeros({channels});
    s.running_var = Tensor::ones({channels});
    return s;
  }
};

struct BatchNormCache {
  Tensor x_hat;
  std::vector<double> inv_std;
  Mode mode = Mode::kTrain;
  bool valid() const { return !x_hat.empty(); }
};

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

namespace detail {

// (batch, channels, spatial) view of an N x C [x H x W] tensor.
inline std::tuple<std::size_t, std::size_t, std::size_t> bn_layout(const Tensor& x, std::size_t channels) {
  if (x.rank() != 2 && x.rank() != 4) throw DimensionError("batchnorm expects N x C or N x C x H x W, got " + shape_str(x.shape()));
  if (x.dim(1) != channels)
    throw DimensionError("batchnorm channel mismatch: input has " + std::to_string(x.dim(1)) + ", state has " +
                         std::to_string(channels));
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  return {x.dim(0), channels, spatial};
}

}  // namespace detail

// Train mode normalizes with biased batch statistics and folds them into the
// running estimates (running variance uses the unbiased batch variance).
inline Tensor batchnorm_forward(const Tensor& x, BatchNormState& s, BatchNormCache* cache = nullptr) {
  const auto [n, C, S] = detail::bn_layout(x, s.channels());
  Tensor out = Tensor::uninitialized(x.shape());
  Tensor x_hat = Tensor::uninitialized(x.shape());
  std::vector<double> inv_std(C);
  const std::size_t count = n * S;
  if (s.mode == Mode::kTrain && count < 2)
    throw ConfigError("batchnorm in train mode needs at least 2 values per channel, got " + std::to_string(count));
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (s.mode == Mode::kTrain) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b) acc += kernel::lane_sum(x.raw() + (b * C + c) * S, S);
      mean = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) sq += kernel::lane_sq_dev(x.raw() + (b * C + c) * S, mean, S);
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      s.running_mean[c] = (1.0 - s.momentum) * s.running_mean[c] + s.momentum * mean;
      s.running_var[c] = (1.0 - s.momentum) * s.running_var[c] + s.momentum * unbiased;
    } else {
      mean = s.running_mean[c];
      var = s.running_var[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + s.eps);
    const double g = s.gamma[c], be = s.beta[c], is = inv_std[c];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * C + c) * S;
      const double* src = x.raw() + base;
      double* xh = x_hat.raw() + base;
      double* dst = out.raw() + base;
      for (std::size_t k = 0; k < S; ++k) {
        xh[k] = (src[k] - mean) * is;
        dst[k] = g * xh[k] + be;
      }
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->mode = s.mode;
  }
  return out;
}

inline BatchNormGrads batchnorm_backward(const Tensor& grad_out, const BatchNormState& s, const BatchNormCache& cache) {
  if (!cache.valid()) throw UsageError("batchnorm_backward called without a forward cache");
  require_same_shape(grad_out, cache.x_hat, "batchnorm backward");
  const auto [n, C, S] = detail::bn_layout(grad_out, s.channels());
  const double count = static_cast<double>(n * S);
  BatchNormGrads grads{Tensor::uninitialized(grad_out.shape()), Tensor::zeros({C}), Tensor::zeros({C})};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * C + c) * S;
      sum_dy += kernel::lane_sum(grad_out.raw() + base, S);
      sum_dy_xhat += kernel::lane_dot(grad_out.raw() + base, cache.x_hat.raw() + base, S);
    }
    grads.beta[c] = sum_dy;
    grads.gamma[c] = sum_dy_xhat;
    const double scale = s.gamma[c] * cache.inv_std[c];
    const bool train = cache.mode == Mode::kTrain;
    const double mean_dy = sum_dy / count, mean_dy_xhat = sum_dy_xhat / count;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * C + c) * S;
      const double* dy = grad_out.raw() + base;
      const double* xh = cache.x_hat.raw() + base;
      double* dx = grads.input.raw() + base;
      if (train)
        for (std::size_t k = 0; k < S; ++k) dx[k] = scale * (dy[k] - mean_dy - xh[k] * mean_dy_xhat);
      else
        for (std::size_t k = 0; k < S; ++k) dx[k] = scale * dy[k];
    }
  }
  return grads;
}

// ===========================================================================
// ReLU

inline Tensor relu_forward(const Tensor& x) {
  Tensor out = Tensor::uninitialized(x.shape());
  const double* src = x.raw();
  double* dst = out.raw();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = src[i] > 0.0 ? src[i] : 0.0;
  return out;
}

// Subgradient at 0 is 0.
inline Tensor relu_backward(const Tensor& grad_out, const Tensor& input) {
  require_same_shape(grad_out, input, "relu backward");
  Tensor g = Tensor::uninitialized(grad_out.shape());
  const double* go = grad_out.raw();
  const double* in = input.raw();
  double* dst = g.raw();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double v = go[i];
    dst[i] = in[i] > 0.0 ? v : 0.0;
  }
  return g;
}

// ===========================================================================
// Max pooling. Trailing rows/columns that do not fill a window are dropped;
// ties resolve to the first element in row-major scan order.

struct MaxPoolCache {
  Shape input_shape;
  std::vector<std::size_t> argmax;  // flat input index per output element
  bool valid() const { return !input_shape.empty(); }
};

inline Tensor maxpool_forward(const Tensor& x, std::size_t window = 2, std::size_t stride = 2,
                              MaxPoolCache* cache = nullptr) {
  if (x.rank() != 4) throw DimensionError("maxpool expects N x C x H x W, got " + shape_str(x.shape()));
  if (window == 0 || stride == 0) throw ConfigError("maxpool window and stride must be positive");
  const std::size_t n = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window > H || window > W)
    throw DimensionError("maxpool window " + std::to_string(window) + " larger than input " + std::to_string(H) + "x" +
                         std::to_string(W));
  const std::size_t ho = (H - window) / stride + 1, wo = (W - window) / stride + 1;
  Tensor out = Tensor::uninitialized({n, C, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t plane = 0; plane < n * C; ++plane) {
    const std::size_t base = plane * H * W;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = base + (i * stride) * W + j * stride;
        for (std::size_t u = 0; u < window; ++u)
          for (std::size_t v = 0; v < window; ++v) {
            const std::size_t idx = base + (i * stride + u) * W + (j * stride + v);
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (plane * ho + i) * wo + j;
        out[o] = x[best];
        argmax[o] = best;
      }
  }
  if (cache) {
    cache->input_shape = x.shape();
    cache->argmax = std::move(argmax);
  }
  return out;
}

inline Tensor maxpool_backward(const Tensor& grad_out, const MaxPoolCache& cache) {
  if (!cache.valid()) throw UsageError("maxpool_backward called without a forward cache");
  if (grad_out.size() != cache.argmax.size())
    throw DimensionError("maxpool backward: grad_out shape " + shape_str(grad_out.shape()) + " does not match forward output");
  Tensor g = Tensor::zeros(cache.input_shape);
  for (std::size_t o = 0; o < grad_out.size(); ++o) g[cache.argmax[o]] += grad_out[o];
  return g;
}

// ===========================================================================
// Global average pooling: N x C x H x W -> N x C

inline Tensor global_avgpool_forward(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global avgpool expects N x C x H x W, got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), S = x.dim(2) * x.dim(3);
  Tensor out = Tensor::uninitialized({x.dim(0), x.dim(1)});
  for (std::size_t p = 0; p < planes; ++p) {
    double acc = 0.0;
    for (std::size_t k = 0; k < S; ++k) acc += x[p * S + k];
    out[p] = acc / static_cast<double>(S);
  }
  return out;
}

inline Tensor global_avgpool_backward(const Tensor& grad_out, const Shape& input_shape) {
  if (input_shape.size() != 4 || grad_out.shape() != Shape{input_shape[0], input_shape[1]})
    throw DimensionError("global avgpool backward: grad_out " + shape_str(grad_out.shape()) + " does not match input " +
                         shape_str(input_shape));
  const std::size_t S = input_shape[2] * input_shape[3];
  const double inv = 1.0 / static_cast<double>(S);
  Tensor g = Tensor::uninitialized(input_shape);
  for (std::size_t p = 0; p < grad_out.size(); ++p)
    for (std::size_t k = 0; k < S; ++k) g[p * S + k] = grad_out[p] * inv;
  return g;
}

// ===========================================================================
// Adaptive average pooling onto a grid x grid output. Bin i along an axis of
// length L covers [floor(i*L/grid), ceil((i+1)*L/grid)). grid == 1 is global
// average pooling.

namespace detail {
inline std::pair<std::size_t, std::size_t> adaptive_bin(std::size_t i, std::size_t length, std::size_t grid) {
  return {(i * length) / grid, ((i + 1) * length + grid - 1) / grid};
}
}  // namespace detail

inline Tensor adaptive_avgpool_forward(const Tensor& x, std::size_t grid) {
  if (x.rank() != 4) throw DimensionError("avgpool expects N x C x H x W, got " + shape_str(x.shape()));
  if (grid == 0) throw ConfigError("avgpool grid must be positive");
  const std::size_t H = x.dim(2), W = x.dim(3);
  if (grid > H || grid > W)
    throw DimensionError("avgpool grid " + std::to_string(grid) + " larger than input " + std::to_string(H) + "x" +
                         std::to_string(W));
  if (grid == 1) return global_avgpool_forward(x).reshaped({x.dim(0), x.dim(1), 1, 1});
  const std::size_t planes = x.dim(0) * x.dim(1);
  Tensor out = Tensor::uninitialized({x.dim(0), x.dim(1), grid, grid});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < grid; ++i) {
      const auto [y0, y1] = detail::adaptive_bin(i, H, grid);
      for (std::size_t j = 0; j < grid; ++j) {
        const auto [x0, x1] = detail::adaptive_bin(j, W, grid);
        double acc = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += x[(p * H + y) * W + xx];
        out[(p * grid + i) * grid + j] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  return out;
}

inline Tensor adaptive_avgpool_backward(const Tensor& grad_out, const Shape& input_shape, std::size_t grid) {
  if (input_shape.size() != 4 || grad_out.shape() != Shape{input_shape[0], input_shape[1], grid, grid})
    throw DimensionError("avgpool backward: grad_out " + shape_str(grad_out.shape()) + " does not match input " +
                         shape_str(input_shape));
  if (grid == 1) return global_avgpool_backward(grad_out.reshaped({input_shape[0], input_shape[1]}), input_shape);
  const std::size_t H = input_shape[2], W = input_shape[3], planes = input_shape[0] * input_shape[1];
  Tensor g = Tensor::zeros(input_shape);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < grid; ++i) {
      const auto [y0, y1] = detail::adaptive_bin(i, H, grid);
      for (std::size_t j = 0; j < grid; ++j) {
        const auto [x0, x1] = detail::adaptive_bin(j, W, grid);
        const double share = grad_out[(p * grid + i) * grid + j] / static_cast<double>((y1 - y0) * (x1 - x0));
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) g[(p * H + y) * W + xx] += share;
      }
    }
  return g;
}

// ===========================================================================
// Linear head: y = x W + b with W stored D x K.

struct LinearParams {
  Tensor weight;  // D x K
  Tensor bias;    // K
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  std::size_t param_count() const { return weight.size() + bias.size(); }

  static LinearParams create(std::size_t in_features, std::size_t out_features, SeededRng& rng) {
    return {fill_random({in_features, out_features}, InitScheme::kKaimingUniform, rng, in_features),
            Tensor::zeros({out_features})};
  }
};

struct LinearGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

inline Tensor linear_forward(const Tensor& x, const LinearParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.in_features() || p.bias.size() != p.out_features())
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(p.weight.shape()) + " and bias " + shape_str(p.bias.shape()));
  const std::size_t n = x.dim(0), D = p.in_features(), K = p.out_features();
  Tensor out = Tensor::uninitialized({n, K});
  kernel::gemm_nn(n, K, D, x.raw(), p.weight.raw(), out.raw(), false);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < K; ++k) out[b * K + k] += p.bias[k];
  return out;
}

inline LinearGrads linear_backward(const Tensor& grad_out, const Tensor& input, const LinearParams& p) {
  const std::size_t n = input.dim(0), D = p.in_features(), K = p.out_features();
  if (grad_out.shape() != Shape{n, K})
    throw DimensionError("linear backward: grad_out " + shape_str(grad_out.shape()) + " does not match output [" +
                         std::to_string(n) + "," + std::to_string(K) + "]");
  LinearGrads g{Tensor({n, D}), Tensor({D, K}), Tensor::zeros({K})};
  kernel::gemm_tn(D, K, n, input.raw(), grad_out.raw(), g.weight.raw(), false);
  kernel::gemm_nt(n, D, K, grad_out.raw(), p.weight.raw(), g.input.raw(), false);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < K; ++k) g.bias[k] += grad_out[b * K + k];
  return g;
}

// ===========================================================================
// Softmax and cross-entropy

inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects N x K logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), K = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const double* row = logits.raw() + b * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (std::size_t k = 0; k < K; ++k) p[b * K + k] = std::exp(row[k] - mx) / z;
  }
  return p;
}

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

// Mean over the batch of -log softmax(logits)[label]; grad = (softmax - onehot) / N.
inline LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross-entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  const std::size_t n = logits.dim(0), K = logits.dim(1);
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw ConfigError("label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
  LossResult r{0.0, Tensor(logits.shape())};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t b = 0; b < n; ++b) {
    const double* row = logits.raw() + b * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    const double log_z = std::log(z) + mx;
    const auto y = static_cast<std::size_t>(labels[b]);
    r.loss += log_z - row[y];
    for (std::size_t k = 0; k < K; ++k) {
      const double pk = std::exp(row[k] - log_z);
      r.grad_logits[b * K + k] = (pk - (k == y ? 1.0 : 0.0)) * inv_n;
    }
  }
  r.loss *= inv_n;
  return r;
}

}  // namespace iea
