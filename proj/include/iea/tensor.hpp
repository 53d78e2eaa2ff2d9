#pragma once

// Dense row-major f64 tensors, the seeded RNG, and the low-level kernels
// (matmul, im2col/col2im) the layers are built on.
//
// Every reduction accumulates in a fixed ascending index order so results are
// bit-reproducible for a given input.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "iea/errors.hpp"

namespace iea {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {
// Leaves doubles uninitialized on resize, so buffers that are about to be
// overwritten are not zero-filled first.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};
}  // namespace detail

class Tensor {
 public:
  // A default-constructed tensor is "unset": rank 0 and no storage.
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<double>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  // Contents are indeterminate; for outputs that are written in full.
  static Tensor uninitialized(Shape shape) {
    Tensor t;
    check_shape(shape);
    t.data_.resize(shape_numel(shape));
    t.shape_ = std::move(shape);
    return t;
  }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  // 2-D literal, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size())
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    return shape_[axis];
  }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  double& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  double at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size())
      throw DimensionError("index rank " + std::to_string(idx.size()) + " does not match shape " +
                           shape_str(shape_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i >= shape_[axis]) throw DimensionError("index out of range for shape " + shape_str(shape_));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<double, detail::DefaultInitAllocator<double>> data_;
};

// ---------------------------------------------------------------------------
// Element-wise helpers

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor scaled(const Tensor& a, double k) {
  Tensor out = a;
  for (double& v : out.data()) v *= k;
  return out;
}

inline void add_inplace(Tensor& acc, const Tensor& b) {
  require_same_shape(acc, b, "add");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
}

// ---------------------------------------------------------------------------
// Seeded RNG
//
// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. Distributions are implemented here because the std:: ones are
// implementation-defined.

class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw UsageError("uniform_index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (one value per call, no caching).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
};

// Deterministic seed derivation for independent sub-streams (splitmix64 mix).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum class InitScheme { kKaimingUniform, kZeros, kOnes };

// fan_in == 0 means "product of all extents after the first", which is the
// convolution layout Cout x Cin x kh x kw.
inline Tensor fill_random(const Shape& shape, InitScheme scheme, SeededRng& rng, std::size_t fan_in = 0) {
  Tensor t(shape);
  switch (scheme) {
    case InitScheme::kZeros:
      break;
    case InitScheme::kOnes:
      t.fill(1.0);
      break;
    case InitScheme::kKaimingUniform: {
      if (fan_in == 0) fan_in = shape.size() > 1 ? t.size() / shape[0] : t.size();
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
      break;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// GEMM kernels on raw row-major buffers. Each output element accumulates over
// the inner index in ascending order.

namespace kernel {

// c[M x N] (+)= a[M x K] * b[K x N]
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* a, const double* b, double* c,
                    bool accumulate) {
  // Blocks of kBlock output columns stay in registers while k runs; each
  // element still sums its terms in ascending k starting from c (or 0).
  constexpr std::size_t kBlock = 16;
  const std::size_t NB = N - N % kBlock;
  for (std::size_t i = 0; i < M; ++i) {
    double* crow = c + i * N;
    const double* arow = a + i * K;
    for (std::size_t j0 = 0; j0 < NB; j0 += kBlock) {
      double acc[kBlock];
      for (std::size_t l = 0; l < kBlock; ++l) acc[l] = accumulate ? crow[j0 + l] : 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double av = arow[k];
        const double* brow = b + k * N + j0;
        for (std::size_t l = 0; l < kBlock; ++l) acc[l] += av * brow[l];
      }
      for (std::size_t l = 0; l < kBlock; ++l) crow[j0 + l] = acc[l];
    }
    for (std::size_t j = NB; j < N; ++j) {
      double acc = accumulate ? crow[j] : 0.0;
      for (std::size_t k = 0; k < K; ++k) acc += arow[k] * b[k * N + j];
      crow[j] = acc;
    }
  }
}

// Sums over a contiguous run use four interleaved lanes (lane l takes
// i = l, l+4, ...), combined as (l0 + l1) + (l2 + l3), then the n % 4 tail
// in ascending order. The order is fixed, so results are reproducible, and the
// lanes vectorize.
inline double lane_dot(const double* a, const double* b, std::size_t n) {
  const std::size_t n4 = n - n % 4;
  double lane[4] = {0.0, 0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < n4; i += 4)
    for (std::size_t l = 0; l < 4; ++l) lane[l] += a[i + l] * b[i + l];
  double s = (lane[0] + lane[1]) + (lane[2] + lane[3]);
  for (std::size_t i = n4; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double lane_sum(const double* a, std::size_t n) {
  const std::size_t n4 = n - n % 4;
  double lane[4] = {0.0, 0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < n4; i += 4)
    for (std::size_t l = 0; l < 4; ++l) lane[l] += a[i + l];
  double s = (lane[0] + lane[1]) + (lane[2] + lane[3]);
  for (std::size_t i = n4; i < n; ++i) s += a[i];
  return s;
}

// Sum of (a[i] - shift)^2 in the lane order above.
inline double lane_sq_dev(const double* a, double shift, std::size_t n) {
  const std::size_t n4 = n - n % 4;
  double lane[4] = {0.0, 0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < n4; i += 4)
    for (std::size_t l = 0; l < 4; ++l) {
      const double d = a[i + l] - shift;
      lane[l] += d * d;
    }
  double s = (lane[0] + lane[1]) + (lane[2] + lane[3]);
  for (std::size_t i = n4; i < n; ++i) s += (a[i] - shift) * (a[i] - shift);
  return s;
}

// c[M x N] (+)= a[M x K] * b[N x K]^T, each entry a lane_dot over k.
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* a, const double* b, double* c,
                    bool accumulate) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      const double s = lane_dot(a + i * K, b + j * K, K);
      c[i * N + j] = accumulate ? c[i * N + j] + s : s;
    }
}

// c[M x N] (+)= a[K x M]^T * b[K x N]
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* a, const double* b, double* c,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + M * N, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const double* arow = a + k * M;
    const double* brow = b + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const double av = arow[i];
      double* crow = c + i * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernel

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor c({M, N});
  kernel::gemm_nn(M, N, K, a.raw(), b.raw(), c.raw(), false);
  return c;
}

// ---------------------------------------------------------------------------
// im2col / col2im

struct ConvGeometry {
  std::size_t channels = 1, height = 1, width = 1;
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride = 1, padding = 0;

  std::size_t out_h() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  std::size_t patch_size() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h() * out_w(); }

  void validate() const {
    if (stride == 0) throw ConfigError("conv stride must be positive");
    if (kernel_h == 0 || kernel_w == 0) throw ConfigError("conv kernel extents must be positive");
    const std::size_t ph = height + 2 * padding, pw = width + 2 * padding;
    if (ph < kernel_h || pw < kernel_w)
      throw ConfigError("conv kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w) +
                        " larger than padded input " + std::to_string(ph) + "x" + std::to_string(pw));
    if ((ph - kernel_h) % stride != 0 || (pw - kernel_w) % stride != 0)
      throw ConfigError("conv output size is not integral for input " + std::to_string(height) + "x" +
                        std::to_string(width) + ", kernel " + std::to_string(kernel_h) + "x" +
                        std::to_string(kernel_w) + ", stride " + std::to_string(stride) + ", padding " +
                        std::to_string(padding));
  }
};

namespace kernel {

// image[C x H x W] -> col[(C*kh*kw) x (Ho*Wo)]
inline void im2col(const ConvGeometry& g, const double* image, double* col) {
  const std::size_t ho = g.out_h(), wo = g.out_w();
  const auto H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t u = 0; u < g.kernel_h; ++u)
      for (std::size_t v = 0; v < g.kernel_w; ++v) {
        double* dst = col + ((c * g.kernel_h + u) * g.kernel_w + v) * ho * wo;
        const double* src = image + c * g.height * g.width;
        for (std::size_t i = 0; i < ho; ++i) {
          const auto y = static_cast<std::ptrdiff_t>(i * g.stride + u) - pad;
          for (std::size_t j = 0; j < wo; ++j) {
            const auto x = static_cast<std::ptrdiff_t>(j * g.stride + v) - pad;
            dst[i * wo + j] = (y >= 0 && y < H && x >= 0 && x < W) ? src[y * W + x] : 0.0;
          }
        }
      }
}

// col[(C*kh*kw) x (Ho*Wo)] scattered and summed into image[C x H x W].
inline void col2im(const ConvGeometry& g, const double* col, double* image) {
  const std::size_t ho = g.out_h(), wo = g.out_w();
  const auto H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  std::fill(image, image + g.channels * g.height * g.width, 0.0);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t u = 0; u < g.kernel_h; ++u)
      for (std::size_t v = 0; v < g.kernel_w; ++v) {
        const double* src = col + ((c * g.kernel_h + u) * g.kernel_w + v) * ho * wo;
        double* dst = image + c * g.height * g.width;
        for (std::size_t i = 0; i < ho; ++i) {
          const auto y = static_cast<std::ptrdiff_t>(i * g.stride + u) - pad;
          if (y < 0 || y >= H) continue;
          for (std::size_t j = 0; j < wo; ++j) {
            const auto x = static_cast<std::ptrdiff_t>(j * g.stride + v) - pad;
            if (x >= 0 && x < W) dst[y * W + x] += src[i * wo + j];
          }
        }
      }
}

}  // namespace kernel

inline Tensor im2col(const Tensor& input, std::size_t kernel_h, std::size_t kernel_w, std::size_t stride,
                     std::size_t padding) {
  if (input.rank() != 3) throw DimensionError("im2col expects C x H x W input, got " + shape_str(input.shape()));
  const ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernel_h, kernel_w, stride, padding};
  g.validate();
  Tensor col({g.patch_size(), g.positions()});
  kernel::im2col(g, input.raw(), col.raw());
  return col;
}

inline Tensor col2im(const Tensor& col, const Shape& image_shape, std::size_t kernel_h, std::size_t kernel_w,
                     std::size_t stride, std::size_t padding) {
  if (image_shape.size() != 3) throw DimensionError("col2im expects a C x H x W image shape");
  const ConvGeometry g{image_shape[0], image_shape[1], image_shape[2], kernel_h, kernel_w, stride, padding};
  g.validate();
  if (col.rank() != 2 || col.dim(0) != g.patch_size() || col.dim(1) != g.positions())
    throw DimensionError("col2im: column shape " + shape_str(col.shape()) + " does not match image " +
                         shape_str(image_shape));
  Tensor image(image_shape);
  kernel::col2im(g, col.raw(), image.raw());
  return image;
}

}  // namespace iea
