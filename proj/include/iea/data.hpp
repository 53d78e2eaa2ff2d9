#pragma once

// Datasets: IDX (optionally gzipped) and amat parsers/writers, global
// standardization, a seeded synthetic toy set, and the epoch batcher.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "iea/tensor.hpp"

namespace iea {

enum class Split { kTrain, kTest };

struct Normalization {
  double mean = 0.0;
  double std = 1.0;
};

struct Dataset {
  Tensor images;  // N x C x H x W
  std::vector<int> labels;
  std::size_t num_classes = 10;
  Split split = Split::kTrain;
  bool standardized = false;
  Normalization norm;  // constants applied when standardized

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (images.rank() != 4) throw DimensionError("dataset images must be N x C x H x W, got " + shape_str(images.shape()));
    if (images.dim(0) != labels.size())
      throw CountMismatchError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                               std::to_string(labels.size()) + " labels");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
        throw ConfigError("label " + std::to_string(y) + " outside [0," + std::to_string(num_classes) + ")");
  }

  // Samples [0, n) (or all when n == 0 or n >= size()).
  Dataset head(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    return subset_range(0, n);
  }

  Dataset subset_range(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > size()) throw ConfigError("invalid dataset range");
    const std::size_t per = images.size() / images.dim(0);
    Shape shape = images.shape();
    shape[0] = end - begin;
    std::vector<double> data(images.data().begin() + static_cast<std::ptrdiff_t>(begin * per),
                             images.data().begin() + static_cast<std::ptrdiff_t>(end * per));
    Dataset d = *this;
    d.images = Tensor(shape, std::move(data));
    d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
    return d;
  }

  // Images and labels for the given sample indices, in order.
  std::pair<Tensor, std::vector<int>> gather(const std::vector<std::size_t>& idx) const {
    const std::size_t per = images.size() / images.dim(0);
    Shape shape = images.shape();
    shape[0] = idx.size();
    Tensor x(shape);
    std::vector<int> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.raw() + idx[i] * per, per, x.raw() + i * per);
      y[i] = labels[idx[i]];
    }
    return {std::move(x), std::move(y)};
  }
};

// ---------------------------------------------------------------------------
// IDX

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

// Whole-file read; gzip streams are inflated, plain files pass through.
inline std::vector<unsigned char> read_maybe_gzip(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) {
      int errnum = 0;
      const std::string msg = gzerror(f, &errnum);
      gzclose(f);
      throw TruncatedDataError("read error in " + path + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

inline void write_maybe_gzip(const std::string& path, const std::vector<unsigned char>& bytes, bool gzip) {
  if (gzip) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot write " + path);
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (n != static_cast<int>(bytes.size())) throw IoError("short write to " + path);
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write to " + path);
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw TruncatedDataError(path + ": header truncated at byte " + std::to_string(b.size()));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

inline void expect_magic(std::uint32_t actual, std::uint32_t expected, const std::string& path) {
  if (actual != expected)
    throw BadMagicError(path + ": bad IDX magic, expected " + hex32(expected) + " got " + hex32(actual));
}

}  // namespace detail

// Pixels are scaled u8 / 255 into [0, 1].
inline Dataset parse_idx(const std::string& images_path, const std::string& labels_path, Split split = Split::kTrain) {
  const auto ib = detail::read_maybe_gzip(images_path);
  const auto lb = detail::read_maybe_gzip(labels_path);
  detail::expect_magic(detail::read_be32(ib, 0, images_path), kIdxImageMagic, images_path);
  detail::expect_magic(detail::read_be32(lb, 0, labels_path), kIdxLabelMagic, labels_path);
  const std::size_t n = detail::read_be32(ib, 4, images_path);
  const std::size_t rows = detail::read_be32(ib, 8, images_path);
  const std::size_t cols = detail::read_be32(ib, 12, images_path);
  const std::size_t nl = detail::read_be32(lb, 4, labels_path);
  if (n != nl)
    throw CountMismatchError("image count " + std::to_string(n) + " in " + images_path + " does not match label count " +
                             std::to_string(nl) + " in " + labels_path);
  if (n == 0 || rows == 0 || cols == 0) throw CountMismatchError(images_path + ": empty IDX image set");
  const std::size_t pixels = n * rows * cols;
  if (ib.size() < 16 + pixels)
    throw TruncatedDataError(images_path + ": expected " + std::to_string(pixels) + " pixel bytes, found " +
                             std::to_string(ib.size() - 16));
  if (lb.size() < 8 + n)
    throw TruncatedDataError(labels_path + ": expected " + std::to_string(n) + " label bytes, found " +
                             std::to_string(lb.size() - 8));
  Dataset d;
  d.split = split;
  d.images = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < pixels; ++i) d.images[i] = static_cast<double>(ib[16 + i]) / 255.0;
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lb[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  d.validate();
  return d;
}

// Inverse of parse_idx for unstandardized data; pixels are rounded to u8.
inline void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path, bool gzip) {
  if (d.standardized) throw UsageError("write_idx needs unstandardized pixels in [0,1]");
  if (d.images.dim(1) != 1) throw DimensionError("IDX images must be single-channel");
  const std::size_t n = d.size(), rows = d.images.dim(2), cols = d.images.dim(3);
  std::vector<unsigned char> ib, lb;
  ib.reserve(16 + d.images.size());
  detail::put_be32(ib, kIdxImageMagic);
  detail::put_be32(ib, static_cast<std::uint32_t>(n));
  detail::put_be32(ib, static_cast<std::uint32_t>(rows));
  detail::put_be32(ib, static_cast<std::uint32_t>(cols));
  for (double v : d.images.data()) {
    const double px = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
    ib.push_back(static_cast<unsigned char>(px));
  }
  detail::put_be32(lb, kIdxLabelMagic);
  detail::put_be32(lb, static_cast<std::uint32_t>(n));
  for (int y : d.labels) lb.push_back(static_cast<unsigned char>(y));
  detail::write_maybe_gzip(images_path, ib, gzip);
  detail::write_maybe_gzip(labels_path, lb, gzip);
}

// ---------------------------------------------------------------------------
// amat: one sample per line, 784 pixel values in [0,1] then the label.

inline constexpr std::size_t kAmatSide = 28;
inline constexpr std::size_t kAmatColumns = kAmatSide * kAmatSide + 1;

// Every row of the file as one dataset. With transpose, each 28x28 block is
// read column-major.
inline Dataset parse_amat_file(const std::string& path, bool transpose = false, Split split = Split::kTrain) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::vector<double> pixels;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  std::vector<double> row;
  row.reserve(kAmatColumns);
  while (std::getline(is, line)) {
    ++line_no;
    row.clear();
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || !std::isfinite(v))
        throw TokenError(path + ":" + std::to_string(line_no) + ": non-numeric token '" + tok + "'");
      row.push_back(v);
    }
    if (row.empty()) continue;
    if (row.size() != kAmatColumns)
      throw ColumnCountError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(kAmatColumns) +
                             " columns, got " + std::to_string(row.size()));
    for (std::size_t k = 0; k + 1 < kAmatColumns; ++k)
      if (row[k] < 0.0 || row[k] > 1.0)
        throw TokenError(path + ":" + std::to_string(line_no) + ": pixel " + std::to_string(row[k]) + " outside [0,1]");
    for (std::size_t y = 0; y < kAmatSide; ++y)
      for (std::size_t x = 0; x < kAmatSide; ++x)
        pixels.push_back(transpose ? row[x * kAmatSide + y] : row[y * kAmatSide + x]);
    const double label = row.back();
    if (label != std::floor(label) || label < 0)
      throw TokenError(path + ":" + std::to_string(line_no) + ": label " + std::to_string(label) + " is not a class index");
    labels.push_back(static_cast<int>(label));
  }
  if (labels.empty()) throw CountMismatchError(path + ": no samples");
  Dataset d;
  d.split = split;
  d.images = Tensor({labels.size(), 1, kAmatSide, kAmatSide}, std::move(pixels));
  d.labels = std::move(labels);
  d.num_classes = std::max<std::size_t>(10, static_cast<std::size_t>(*std::max_element(d.labels.begin(), d.labels.end())) + 1);
  d.validate();
  return d;
}

// First `train` rows become the train split, the next `test` rows the test
// split. The file must hold at least train + test rows.
inline std::pair<Dataset, Dataset> parse_amat(const std::string& path, std::pair<std::size_t, std::size_t> split_sizes = {50000, 12000},
                                              bool transpose = false) {
  const auto [ntrain, ntest] = split_sizes;
  if (ntrain == 0 || ntest == 0) throw ConfigError("amat split sizes must be positive");
  Dataset all = parse_amat_file(path, transpose);
  if (all.size() < ntrain + ntest)
    throw CountMismatchError(path + ": " + std::to_string(all.size()) + " rows cannot fill splits of " +
                             std::to_string(ntrain) + " and " + std::to_string(ntest));
  Dataset train = all.subset_range(0, ntrain);
  Dataset test = all.subset_range(ntrain, ntrain + ntest);
  train.split = Split::kTrain;
  test.split = Split::kTest;
  return {std::move(train), std::move(test)};
}

inline void write_amat(const Dataset& d, const std::string& path) {
  if (d.images.dim(1) != 1 || d.images.dim(2) != kAmatSide || d.images.dim(3) != kAmatSide)
    throw DimensionError("amat rows hold 1x28x28 images, got " + shape_str(d.images.shape()));
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  char buf[32];
  const std::size_t per = kAmatSide * kAmatSide;
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t k = 0; k < per; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g ", d.images[i * per + k]);
      os << buf;
    }
    os << d.labels[i] << '\n';
  }
  if (!os) throw IoError("short write to " + path);
}

// ---------------------------------------------------------------------------
// Standardization: (x - mean) / std with one global mean/std per dataset.

inline Normalization fit_normalization(const Dataset& d) {
  const double n = static_cast<double>(d.images.size());
  double acc = 0.0;
  for (double v : d.images.data()) acc += v;
  const double mean = acc / n;
  double sq = 0.0;
  for (double v : d.images.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / n);
  if (!(sd > 0.0)) throw ConfigError("cannot standardize: pixel standard deviation is zero");
  return {mean, sd};
}

inline Dataset standardize(const Dataset& d, const Normalization& norm) {
  if (d.standardized) throw UsageError("dataset is already standardized");
  if (!(norm.std > 0.0)) throw ConfigError("cannot standardize with zero standard deviation");
  Dataset out = d;
  const double inv = 1.0 / norm.std;
  for (double& v : out.images.data()) v = (v - norm.mean) * inv;
  out.standardized = true;
  out.norm = norm;
  return out;
}

// Fits the constants on `d` itself; use the two-argument form for test splits.
inline Dataset standardize(const Dataset& d) { return standardize(d, fit_normalization(d)); }

// ---------------------------------------------------------------------------
// Synthetic toy set. Class c draws a sinusoidal grating with orientation
// pi*c/num_classes inside quadrant c % 4 of an otherwise dark image, plus
// seeded Gaussian noise; pixel values are clipped to [0, 1]. Orientation
// keeps classes apart even after global pooling.

inline Dataset synth_blobs(std::size_t n, std::size_t num_classes, std::uint64_t seed, std::size_t side = 28) {
  if (num_classes < 2) throw ConfigError("synth_blobs needs at least 2 classes");
  if (n < num_classes) throw ConfigError("synth_blobs needs n >= num_classes");
  if (side < 4 || side % 2) throw ConfigError("synth_blobs side must be even and >= 4");
  SeededRng rng(seed);
  Dataset d;
  d.num_classes = num_classes;
  d.images = Tensor({n, 1, side, side});
  d.labels.resize(n);
  const std::size_t half = side / 2;
  constexpr double kPeriod = 4.0;
  constexpr double kNoise = 0.05;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<int>(i % num_classes);
    d.labels[i] = c;
    const double theta = std::numbers::pi * c / static_cast<double>(num_classes);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const std::size_t qy = (c % 4) / 2 * half, qx = (c % 4) % 2 * half;
    double* img = d.images.raw() + i * side * side;
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        double v = 0.0;
        if (y >= qy && y < qy + half && x >= qx && x < qx + half) {
          const double t = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) / kPeriod;
          v = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * t + phase);
        }
        img[y * side + x] = std::clamp(v + kNoise * rng.normal(), 0.0, 1.0);
      }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Epoch batching. The visiting order is a permutation of 0..n-1 that depends
// only on (seed, epoch). A trailing batch of one sample is merged into the
// previous batch so batchnorm always sees at least two samples.

class BatchIterator {
 public:
  BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::size_t epoch) {
    if (n == 0) throw ConfigError("cannot batch an empty dataset");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    SeededRng rng(derive_seed(seed, epoch));
    rng.shuffle(order_);
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t end = std::min(n, start + batch_size);
      if (end - start == 1 && !batches_.empty())
        batches_.back().push_back(order_[start]);
      else
        batches_.emplace_back(order_.begin() + static_cast<std::ptrdiff_t>(start),
                              order_.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }

  const std::vector<std::size_t>& order() const { return order_; }
  const std::vector<std::vector<std::size_t>>& batches() const { return batches_; }
  auto begin() const { return batches_.begin(); }
  auto end() const { return batches_.end(); }

 private:
  std::vector<std::size_t> order_;
  std::vector<std::vector<std::size_t>> batches_;
};

}  // namespace iea
