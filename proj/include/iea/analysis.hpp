#pragma once

// Outer ensembles of trained models, the pairwise feature dissimilarity
// lambda, the mean-sum-of-similarity (mss) diversity score, and feature-map
// extraction / PGM export.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "iea/train.hpp"

namespace iea {

// ---------------------------------------------------------------------------
// Ensemble averaging of class probabilities

struct EnsemblePrediction {
  std::vector<Tensor> members;  // k x (N x K)
  Tensor mean;                  // N x K
  std::vector<std::size_t> labels;
};

inline constexpr double kProbabilityRowTolerance = 1e-6;

inline EnsemblePrediction ensemble_average(const std::vector<Tensor>& prob_sets) {
  if (prob_sets.empty()) throw ConfigError("ensemble needs at least one member");
  const Tensor& first = prob_sets.front();
  if (first.rank() != 2) throw DimensionError("ensemble members must be N x K, got " + shape_str(first.shape()));
  const std::size_t n = first.dim(0), K = first.dim(1);
  for (std::size_t m = 0; m < prob_sets.size(); ++m) {
    const Tensor& p = prob_sets[m];
    require_same_shape(p, first, "ensemble member");
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += p[i * K + k];
      if (std::abs(s - 1.0) > kProbabilityRowTolerance)
        throw ConfigError("ensemble member " + std::to_string(m) + " row " + std::to_string(i) +
                          " is not a probability vector (sum " + std::to_string(s) + ")");
    }
  }
  EnsemblePrediction out;
  out.members = prob_sets;
  out.mean = Tensor({n, K});
  for (const Tensor& p : prob_sets) add_inplace(out.mean, p);
  const double inv = 1.0 / static_cast<double>(prob_sets.size());
  for (double& v : out.mean.data()) v *= inv;
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.labels[i] = argmax_row(out.mean, i);
  return out;
}

inline double ensemble_error_pct(const EnsemblePrediction& e, const std::vector<int>& truth) {
  return error_pct(e.mean, truth);
}

// ---------------------------------------------------------------------------
// Dissimilarity: lambda = (1 - rho) / 2 with rho the Pearson correlation of
// the flattened maps. Two constant maps score 0 when equal and 1 otherwise;
// exactly one constant map scores 0.5.

inline double lambda_score(const Tensor& f, const Tensor& g) {
  require_same_shape(f, g, "lambda_score");
  const std::size_t n = f.size();
  const auto [fmin, fmax] = std::minmax_element(f.data().begin(), f.data().end());
  const auto [gmin, gmax] = std::minmax_element(g.data().begin(), g.data().end());
  const bool f_const = *fmin == *fmax, g_const = *gmin == *gmax;
  if (f_const && g_const) return f == g ? 0.0 : 1.0;
  if (f_const || g_const) return 0.5;
  double mf = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mf += f[i];
    mg += g[i];
  }
  mf /= static_cast<double>(n);
  mg /= static_cast<double>(n);
  double sfg = 0.0, sff = 0.0, sgg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = f[i] - mf, b = g[i] - mg;
    sfg += a * b;
    sff += a * a;
    sgg += b * b;
  }
  if (sff == 0.0 || sgg == 0.0) return 0.5;
  const double rho = std::clamp(sfg / std::sqrt(sff * sgg), -1.0, 1.0);
  return (1.0 - rho) / 2.0;
}

// ---------------------------------------------------------------------------
// Feature banks and the mss score

struct FeatureBank {
  std::size_t layer = 0;
  Tensor features;  // n x H x W

  std::size_t count() const { return features.dim(0); }
  Tensor feature(std::size_t i) const {
    const std::size_t h = features.dim(1), w = features.dim(2);
    std::vector<double> data(features.raw() + i * h * w, features.raw() + (i + 1) * h * w);
    return Tensor({h, w}, std::move(data));
  }
};

// (1/n) * sum_i sum_{j != i} lambda(f_i, f_j). Ranges over [0, n-1]; every
// unordered pair is counted twice.
inline double mss_score(const FeatureBank& bank) {
  if (bank.features.rank() != 3) throw DimensionError("feature bank must be n x H x W, got " + shape_str(bank.features.shape()));
  const std::size_t n = bank.count();
  if (n < 2) throw ConfigError("mss_score needs at least 2 features, got " + std::to_string(n));
  std::vector<Tensor> maps;
  maps.reserve(n);
  for (std::size_t i = 0; i < n; ++i) maps.push_back(bank.feature(i));
  std::vector<double> pair(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) pair[i * n + j] = pair[j * n + i] = lambda_score(maps[i], maps[j]);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) total += pair[i * n + j];
  return total / static_cast<double>(n);
}

enum class FeatureMode { kPerSample, kBatchAveraged };

// Post-ReLU maps of `layer` for every sample of `batch` (N x C x H x W), or
// one bank of their batch mean. The model must be in eval mode.
inline std::vector<FeatureBank> extract_features(Model& model, std::size_t layer, const Tensor& batch,
                                                 FeatureMode mode = FeatureMode::kPerSample) {
  const Tensor act = model.activations(batch, layer);
  const std::size_t N = act.dim(0), C = act.dim(1), H = act.dim(2), W = act.dim(3), per = C * H * W;
  std::vector<FeatureBank> banks;
  if (mode == FeatureMode::kPerSample) {
    for (std::size_t b = 0; b < N; ++b) {
      std::vector<double> data(act.raw() + b * per, act.raw() + (b + 1) * per);
      banks.push_back({layer, Tensor({C, H, W}, std::move(data))});
    }
  } else {
    Tensor mean({C, H, W});
    for (std::size_t b = 0; b < N; ++b)
      for (std::size_t k = 0; k < per; ++k) mean[k] += act[b * per + k];
    for (double& v : mean.data()) v /= static_cast<double>(N);
    banks.push_back({layer, std::move(mean)});
  }
  return banks;
}

// Mean over samples of the per-sample mss score.
inline double mean_mss_score(Model& model, std::size_t layer, const Tensor& batch) {
  const auto banks = extract_features(model, layer, batch, FeatureMode::kPerSample);
  double acc = 0.0;
  for (const auto& b : banks) acc += mss_score(b);
  return acc / static_cast<double>(banks.size());
}

// ---------------------------------------------------------------------------
// PGM export: one binary 8-bit P5 image per channel, named layer{L}_ch{C}.pgm.
// Each map is scaled min -> 0, max -> 255; constant maps become 128.

inline std::vector<unsigned char> feature_to_gray(const Tensor& map) {
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  std::vector<unsigned char> px(map.size());
  if (*lo == *hi) {
    std::fill(px.begin(), px.end(), static_cast<unsigned char>(128));
    return px;
  }
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < map.size(); ++i)
    px[i] = static_cast<unsigned char>(std::lround((map[i] - *lo) / range * 255.0));
  return px;
}

inline std::string feature_filename(std::size_t layer, std::size_t channel) {
  return "layer" + std::to_string(layer) + "_ch" + std::to_string(channel) + ".pgm";
}

inline std::vector<std::filesystem::path> export_feature_maps(const FeatureBank& bank, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  const std::size_t h = bank.features.dim(1), w = bank.features.dim(2);
  for (std::size_t c = 0; c < bank.count(); ++c) {
    const auto px = feature_to_gray(bank.feature(c));
    const auto path = dir / feature_filename(bank.layer, c);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << "P5\n" << w << ' ' << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (!os) throw IoError("short write to " + path.string());
    written.push_back(path);
  }
  return written;
}

}  // namespace iea
