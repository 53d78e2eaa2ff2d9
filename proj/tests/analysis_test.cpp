#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "iea/analysis.hpp"
#include "test_support.hpp"

namespace iea {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path dir = fs::temp_directory_path() / "iea_analysis_test" / (std::string(info->test_suite_name()) + "." + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p(logits.shape());
  const std::size_t n = logits.dim(0), K = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits[i * K], s = 0.0;
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits[i * K + k]);
    for (std::size_t k = 0; k < K; ++k) s += (p[i * K + k] = std::exp(logits[i * K + k] - mx));
    for (std::size_t k = 0; k < K; ++k) p[i * K + k] /= s;
  }
  return p;
}

TEST(Ensemble, SingleMemberKeepsPredictions) {
  SeededRng rng(1);
  const Tensor p = softmax_rows(testing::random_tensor({20, 5}, rng));
  const EnsemblePrediction e = ensemble_average({p});
  EXPECT_EQ(e.mean, p);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(e.labels[i], argmax_row(p, i));
}

TEST(Ensemble, TwoRowArithmetic) {
  const EnsemblePrediction e = ensemble_average({Tensor({1, 2}, {0.6, 0.4}), Tensor({1, 2}, {0.2, 0.8})});
  EXPECT_NEAR(e.mean[0], 0.4, 1e-15);
  EXPECT_NEAR(e.mean[1], 0.6, 1e-15);
  EXPECT_EQ(e.labels[0], 1u);
}

TEST(Ensemble, TieGoesToLowestIndex) {
  const EnsemblePrediction e = ensemble_average({Tensor({1, 2}, {0.75, 0.25}), Tensor({1, 2}, {0.25, 0.75})});
  EXPECT_EQ(e.labels[0], 0u);
}

TEST(Ensemble, IdenticalMembersGiveMemberError) {
  SeededRng rng(2);
  const Tensor p = softmax_rows(testing::random_tensor({50, 10}, rng));
  std::vector<int> truth(50);
  for (std::size_t i = 0; i < 50; ++i) truth[i] = static_cast<int>(i % 10);
  const EnsemblePrediction e = ensemble_average({p, p, p});
  EXPECT_EQ(ensemble_error_pct(e, truth), error_pct(p, truth));
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(e.labels[i], argmax_row(p, i));
}

TEST(Ensemble, MemberOrderDoesNotChangeLabels) {
  SeededRng rng(3);
  std::vector<Tensor> members;
  for (int k = 0; k < 4; ++k) members.push_back(softmax_rows(testing::random_tensor({30, 6}, rng)));
  const EnsemblePrediction a = ensemble_average(members);
  std::vector<std::size_t> idx{0, 1, 2, 3};
  std::mt19937_64 g(5);
  for (int t = 0; t < 10; ++t) {
    std::shuffle(idx.begin(), idx.end(), g);
    std::vector<Tensor> perm;
    for (std::size_t i : idx) perm.push_back(members[i]);
    const EnsemblePrediction b = ensemble_average(perm);
    EXPECT_LT(max_abs_diff(a.mean, b.mean), 1e-15);
    EXPECT_EQ(a.labels, b.labels);
  }
  for (std::size_t i = 0; i < 30; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 6; ++k) s += a.mean[i * 6 + k];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Ensemble, ShapeAndNormalizationErrors) {
  EXPECT_THROW(ensemble_average({}), ConfigError);
  EXPECT_THROW(ensemble_average({Tensor({1, 2}, {0.5, 0.5}), Tensor({1, 3}, {0.2, 0.3, 0.5})}), DimensionError);
  EXPECT_THROW(ensemble_average({Tensor({1, 2}, {0.5, 0.6})}), ConfigError);
  EXPECT_NO_THROW(ensemble_average({Tensor({1, 2}, {0.5, 0.5 + 1e-7})}));
}

TEST(Lambda, SelfIsZeroAndNegationIsOne) {
  SeededRng rng(4);
  for (int t = 0; t < 10; ++t) {
    const Tensor f = testing::random_tensor({7, 9}, rng);
    EXPECT_NEAR(lambda_score(f, f), 0.0, 1e-15);
    Tensor g = f;
    for (double& v : g.data()) v = 3.5 - v;
    EXPECT_NEAR(lambda_score(f, g), 1.0, 1e-15);
  }
}

TEST(Lambda, ConstantMapRules) {
  const Tensor a({2, 2}, {1, 1, 1, 1}), b({2, 2}, {2, 2, 2, 2}), c({2, 2}, {0, 1, 2, 3});
  EXPECT_EQ(lambda_score(a, a), 0.0);
  EXPECT_EQ(lambda_score(a, b), 1.0);
  EXPECT_EQ(lambda_score(a, c), 0.5);
  EXPECT_EQ(lambda_score(c, b), 0.5);
}

TEST(Lambda, MatchesIndependentPearson) {
  SeededRng rng(5);
  for (int t = 0; t < 50; ++t) {
    const Tensor f = testing::random_tensor({6, 6}, rng), g = testing::random_tensor({6, 6}, rng);
    const double want = (1.0 - testing::pearson_oracle(f, g)) / 2.0;
    EXPECT_NEAR(lambda_score(f, g), want, 1e-12);
    EXPECT_EQ(lambda_score(f, g), lambda_score(g, f));
    EXPECT_GE(lambda_score(f, g), 0.0);
    EXPECT_LE(lambda_score(f, g), 1.0);
  }
}

TEST(Lambda, ScaleAndShiftInvariant) {
  SeededRng rng(6);
  for (int t = 0; t < 20; ++t) {
    const Tensor f = testing::random_tensor({5, 8}, rng), g = testing::random_tensor({5, 8}, rng);
    Tensor h = f;
    const double a = 0.1 + 10.0 * std::abs(f[0]), b = 7.0 * g[1];
    for (double& v : h.data()) v = a * v + b;
    EXPECT_NEAR(lambda_score(h, g), lambda_score(f, g), 1e-12);
  }
}

TEST(Lambda, ShapeMismatch) {
  EXPECT_THROW(lambda_score(Tensor({2, 3}), Tensor({3, 2})), DimensionError);
}

FeatureBank random_bank(std::size_t n, SeededRng& rng) {
  return {0, testing::random_tensor({n, 6, 5}, rng)};
}

TEST(Mss, IdenticalFeaturesScoreZero) {
  SeededRng rng(7);
  const Tensor f = testing::random_tensor({6, 5}, rng);
  FeatureBank bank{0, Tensor({4, 6, 5})};
  for (std::size_t i = 0; i < 4; ++i) std::copy(f.raw(), f.raw() + 30, bank.features.raw() + i * 30);
  EXPECT_EQ(mss_score(bank), 0.0);
}

TEST(Mss, AllPairsMaximallyDifferent) {
  // Three distinct constant maps: every pair has lambda = 1.
  FeatureBank bank{0, Tensor({3, 2, 2})};
  for (std::size_t i = 0; i < 12; ++i) bank.features[i] = static_cast<double>(i / 4);
  EXPECT_EQ(mss_score(bank), 2.0);
}

TEST(Mss, MatchesDoubleLoopOracle) {
  SeededRng rng(8);
  for (std::size_t n : {2u, 3u, 8u, 16u}) {
    const FeatureBank bank = random_bank(n, rng);
    const double got = mss_score(bank);
    EXPECT_NEAR(got, testing::mss_oracle(bank.features), 1e-12);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, static_cast<double>(n - 1));
  }
}

TEST(Mss, PermutationInvariant) {
  SeededRng rng(9);
  const FeatureBank bank = random_bank(10, rng);
  const double base = mss_score(bank);
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 g(11);
  for (int t = 0; t < 100; ++t) {
    std::shuffle(idx.begin(), idx.end(), g);
    FeatureBank perm{0, Tensor({10, 6, 5})};
    for (std::size_t i = 0; i < 10; ++i) std::copy(bank.features.raw() + idx[i] * 30, bank.features.raw() + (idx[i] + 1) * 30, perm.features.raw() + i * 30);
    EXPECT_NEAR(mss_score(perm), base, 1e-12);
  }
}

TEST(Mss, NeedsTwoFeatures) {
  SeededRng rng(10);
  EXPECT_THROW(mss_score(random_bank(1, rng)), ConfigError);
  EXPECT_THROW(mss_score(FeatureBank{0, Tensor({2, 4})}), DimensionError);
}

TEST(Features, ShapeAndDeterminism) {
  Model net(ModelConfig::standard(1, 2, 3));
  net.set_mode(Mode::kEval);
  SeededRng rng(12);
  const Tensor x = testing::random_tensor({1, 1, 28, 28}, rng);
  const auto a = extract_features(net, 0, x), b = extract_features(net, 0, x);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].features.shape(), (Shape{32, 28, 28}));
  EXPECT_EQ(a[0].features, b[0].features);
  EXPECT_THROW(extract_features(net, 1, x), ConfigError);
}

TEST(Features, BatchAveragedMode) {
  Model net(ModelConfig::standard(1, 1, 3));
  net.set_mode(Mode::kEval);
  SeededRng rng(13);
  const Tensor x = testing::random_tensor({3, 1, 28, 28}, rng);
  const auto per = extract_features(net, 0, x);
  const auto avg = extract_features(net, 0, x, FeatureMode::kBatchAveraged);
  ASSERT_EQ(per.size(), 3u);
  ASSERT_EQ(avg.size(), 1u);
  for (std::size_t k : {0u, 500u, 20000u})
    EXPECT_NEAR(avg[0].features[k], (per[0].features[k] + per[1].features[k] + per[2].features[k]) / 3.0, 1e-15);
}

TEST(Features, ZeroInputIntoZeroBiasModelIsZero) {
  Model net(ModelConfig::standard(2, 3, 4));
  net.set_mode(Mode::kEval);
  for (std::size_t layer : {0u, 1u}) {
    const auto banks = extract_features(net, layer, Tensor({1, 1, 28, 28}));
    for (double v : banks[0].features.data()) EXPECT_EQ(v, 0.0);
  }
}

std::vector<unsigned char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

TEST(Pgm, ConstantMapIsMidGray) {
  const fs::path dir = scratch_dir();
  FeatureBank bank{2, Tensor({2, 3, 4})};
  for (std::size_t i = 12; i < 24; ++i) bank.features[i] = static_cast<double>(i);
  const auto files = export_feature_maps(bank, dir);
  ASSERT_EQ(files.size(), 2u);
  EXPECT_EQ(files[0].filename(), "layer2_ch0.pgm");
  EXPECT_EQ(files[1].filename(), "layer2_ch1.pgm");
  const auto bytes = slurp(files[0]);
  const std::string header = "P5\n4 3\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 12);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
  for (std::size_t i = header.size(); i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 128);
}

TEST(Pgm, UnitRangeMapsLinearly) {
  const fs::path dir = scratch_dir();
  FeatureBank bank{0, Tensor({2, 1, 256})};
  for (std::size_t i = 0; i < 256; ++i) bank.features[i] = static_cast<double>(i) / 255.0;
  for (std::size_t i = 0; i < 256; ++i) bank.features[256 + i] = -3.0;
  const auto bytes = slurp(export_feature_maps(bank, dir)[0]);
  const std::size_t off = std::string("P5\n256 1\n255\n").size();
  ASSERT_EQ(bytes.size(), off + 256);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(bytes[off + i], i);
}

TEST(Pgm, ReExportIsByteIdentical) {
  const fs::path dir = scratch_dir();
  SeededRng rng(14);
  const FeatureBank bank = random_bank(3, rng);
  const auto first = export_feature_maps(bank, dir / "a");
  const auto second = export_feature_maps(bank, dir / "b");
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(slurp(first[c]), slurp(second[c]));
}

}  // namespace
}  // namespace iea
