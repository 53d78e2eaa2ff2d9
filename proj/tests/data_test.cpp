#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "iea/data.hpp"

namespace iea {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path dir = fs::temp_directory_path() / "iea_data_test" / (std::string(info->test_suite_name()) + "." + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v >> 24));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v));
}

// Two 28x28 images: the first all 0 except pixel (3,5) = 255, the second a
// ramp (y*28+x) % 256. Labels 7 and 2.
struct IdxFixture {
  std::vector<unsigned char> images, labels;
  IdxFixture() {
    be32(images, 0x00000803);
    be32(images, 2);
    be32(images, 28);
    be32(images, 28);
    for (int i = 0; i < 784; ++i) images.push_back(i == 3 * 28 + 5 ? 255 : 0);
    for (int i = 0; i < 784; ++i) images.push_back(static_cast<unsigned char>(i % 256));
    be32(labels, 0x00000801);
    be32(labels, 2);
    labels.push_back(7);
    labels.push_back(2);
  }
};

TEST(Idx, HandBuiltFixture) {
  const fs::path dir = scratch_dir();
  IdxFixture fx;
  write_bytes(dir / "img", fx.images);
  write_bytes(dir / "lbl", fx.labels);
  const Dataset d = parse_idx((dir / "img").string(), (dir / "lbl").string());
  EXPECT_EQ(d.images.shape(), (Shape{2, 1, 28, 28}));
  EXPECT_EQ(d.labels, (std::vector<int>{7, 2}));
  EXPECT_EQ(d.images.at(0, 0, 3, 5), 1.0);
  EXPECT_EQ(d.images.at(0, 0, 5, 3), 0.0);
  EXPECT_EQ(d.images.at(1, 0, 1, 2), 30.0 / 255.0);
  for (double v : d.images.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Idx, RoundTripPlainAndGzip) {
  const fs::path dir = scratch_dir();
  IdxFixture fx;
  write_bytes(dir / "img", fx.images);
  write_bytes(dir / "lbl", fx.labels);
  const Dataset d = parse_idx((dir / "img").string(), (dir / "lbl").string());
  for (bool gz : {false, true}) {
    const std::string img = (dir / (gz ? "img2.gz" : "img2")).string(), lbl = (dir / (gz ? "lbl2.gz" : "lbl2")).string();
    write_idx(d, img, lbl, gz);
    const Dataset back = parse_idx(img, lbl);
    EXPECT_EQ(back.images, d.images);
    EXPECT_EQ(back.labels, d.labels);
  }
  // The plain re-serialization is byte-identical to the fixture.
  std::ifstream is(dir / "img2", std::ios::binary);
  const std::vector<unsigned char> again{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  EXPECT_EQ(again, fx.images);
}

TEST(Idx, BadMagicNamesBothValues) {
  const fs::path dir = scratch_dir();
  IdxFixture fx;
  fx.images[3] = 0x01;
  write_bytes(dir / "img", fx.images);
  write_bytes(dir / "lbl", fx.labels);
  try {
    parse_idx((dir / "img").string(), (dir / "lbl").string());
    FAIL();
  } catch (const BadMagicError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("0x00000803"), std::string::npos);
    EXPECT_NE(msg.find("0x00000801"), std::string::npos);
  }
}

TEST(Idx, TruncatedPayload) {
  const fs::path dir = scratch_dir();
  IdxFixture fx;
  write_bytes(dir / "img", {fx.images.begin(), fx.images.end() - 10});
  write_bytes(dir / "lbl", fx.labels);
  EXPECT_THROW(parse_idx((dir / "img").string(), (dir / "lbl").string()), TruncatedDataError);
  write_bytes(dir / "img", {fx.images.begin(), fx.images.begin() + 9});
  EXPECT_THROW(parse_idx((dir / "img").string(), (dir / "lbl").string()), TruncatedDataError);
}

TEST(Idx, CountMismatch) {
  const fs::path dir = scratch_dir();
  IdxFixture fx;
  fx.labels[7] = 3;
  fx.labels.push_back(1);
  write_bytes(dir / "img", fx.images);
  write_bytes(dir / "lbl", fx.labels);
  EXPECT_THROW(parse_idx((dir / "img").string(), (dir / "lbl").string()), CountMismatchError);
}

TEST(Idx, MissingFileIsIoError) {
  const fs::path dir = scratch_dir();
  EXPECT_THROW(parse_idx((dir / "nope").string(), (dir / "nope2").string()), IoError);
}

TEST(Idx, BundledSubsetSizes) {
  const std::string d = IEA_TEST_DATA_DIR;
  const Dataset train = parse_idx(d + "/train-images-idx3-ubyte.gz", d + "/train-labels-idx1-ubyte.gz");
  const Dataset test = parse_idx(d + "/t10k-images-idx3-ubyte.gz", d + "/t10k-labels-idx1-ubyte.gz", Split::kTest);
  EXPECT_EQ(train.images.shape(), (Shape{5000, 1, 28, 28}));
  EXPECT_EQ(test.size(), 1000u);
  std::vector<int> seen(10, 0);
  for (int y : train.labels) ++seen[static_cast<std::size_t>(y)];
  for (int c : seen) EXPECT_GT(c, 300);
}

std::string amat_row(std::size_t seed, int label, std::size_t columns = kAmatColumns - 1) {
  std::string row;
  char buf[32];
  for (std::size_t k = 0; k < columns; ++k) {
    std::snprintf(buf, sizeof buf, "%.17g ", static_cast<double>((k * 7 + seed * 13) % 97) / 96.0);
    row += buf;
  }
  return row + std::to_string(label) + "\n";
}

TEST(Amat, ThreeRowFixture) {
  const fs::path dir = scratch_dir();
  std::ofstream(dir / "f.amat") << amat_row(0, 4) << amat_row(1, 0) << "\n" << amat_row(2, 9);
  const Dataset d = parse_amat_file((dir / "f.amat").string());
  EXPECT_EQ(d.images.shape(), (Shape{3, 1, 28, 28}));
  EXPECT_EQ(d.labels, (std::vector<int>{4, 0, 9}));
  // Row-major: column k lands at (k / 28, k % 28).
  const std::size_t k = 30;
  EXPECT_EQ(d.images.at(1, 0, k / 28, k % 28), static_cast<double>((k * 7 + 13) % 97) / 96.0);
  const Dataset t = parse_amat_file((dir / "f.amat").string(), true);
  EXPECT_EQ(t.images.at(1, 0, k % 28, k / 28), d.images.at(1, 0, k / 28, k % 28));
}

TEST(Amat, RoundTripIsLossless) {
  const fs::path dir = scratch_dir();
  std::ofstream(dir / "f.amat") << amat_row(3, 1) << amat_row(4, 2);
  const Dataset d = parse_amat_file((dir / "f.amat").string());
  write_amat(d, (dir / "g.amat").string());
  const Dataset back = parse_amat_file((dir / "g.amat").string());
  EXPECT_EQ(back.images, d.images);
  EXPECT_EQ(back.labels, d.labels);
}

TEST(Amat, SplitSizes) {
  const fs::path dir = scratch_dir();
  {
    std::ofstream os(dir / "f.amat");
    for (int i = 0; i < 7; ++i) os << amat_row(static_cast<std::size_t>(i), i);
  }
  const auto [train, test] = parse_amat((dir / "f.amat").string(), {5, 2});
  EXPECT_EQ(train.size(), 5u);
  EXPECT_EQ(test.size(), 2u);
  EXPECT_EQ(test.labels, (std::vector<int>{5, 6}));
  EXPECT_EQ(test.split, Split::kTest);
  EXPECT_THROW(parse_amat((dir / "f.amat").string(), {5, 3}), CountMismatchError);
}

TEST(Amat, ColumnCountError) {
  const fs::path dir = scratch_dir();
  std::ofstream(dir / "f.amat") << amat_row(0, 1) << amat_row(1, 1, kAmatColumns - 2);
  try {
    parse_amat_file((dir / "f.amat").string());
    FAIL();
  } catch (const ColumnCountError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
}

TEST(Amat, NonNumericToken) {
  const fs::path dir = scratch_dir();
  std::string row = amat_row(0, 1);
  row.replace(0, 1, "x");
  std::ofstream(dir / "f.amat") << row;
  EXPECT_THROW(parse_amat_file((dir / "f.amat").string()), TokenError);
}

TEST(Amat, ErrorsAreDistinctTypes) {
  // Each malformed-input case maps to its own exception type.
  EXPECT_FALSE((std::is_base_of_v<ColumnCountError, TokenError>));
  EXPECT_FALSE((std::is_base_of_v<TokenError, ColumnCountError>));
  EXPECT_FALSE((std::is_base_of_v<BadMagicError, TruncatedDataError>));
  EXPECT_FALSE((std::is_base_of_v<TruncatedDataError, CountMismatchError>));
}

Dataset tiny(std::vector<double> pixels) {
  Dataset d;
  const std::size_t n = pixels.size() / 4;
  d.images = Tensor({n, 1, 2, 2}, std::move(pixels));
  d.labels.assign(n, 0);
  return d;
}

TEST(Standardize, ConstantImagesAreRejected) {
  EXPECT_THROW(standardize(tiny(std::vector<double>(8, 0.5))), ConfigError);
}

TEST(Standardize, TrainMeanZeroAndTestUsesTrainConstants) {
  const Dataset train = tiny({0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 0.1, 0.3});
  const Dataset test = tiny({1.0, 1.0, 1.0, 0.0});
  const Normalization norm = fit_normalization(train);
  const Dataset st = standardize(train, norm), se = standardize(test, norm);
  EXPECT_LT(std::abs(std::accumulate(st.images.data().begin(), st.images.data().end(), 0.0)) / 8.0, 1e-10);
  EXPECT_DOUBLE_EQ(se.images[0], (1.0 - norm.mean) / norm.std);
  EXPECT_EQ(se.norm.mean, norm.mean);
  EXPECT_THROW(standardize(st), UsageError);
}

TEST(Synth, ClassesUseDifferentQuadrants) {
  const Dataset d = synth_blobs(10, 2, 1);
  EXPECT_EQ(d.images.shape(), (Shape{10, 1, 28, 28}));
  auto quadrant_energy = [&](std::size_t i, std::size_t q) {
    double s = 0.0;
    for (std::size_t y = 0; y < 14; ++y)
      for (std::size_t x = 0; x < 14; ++x) s += d.images.at(i, 0, y + q / 2 * 14, x + q % 2 * 14);
    return s;
  };
  for (std::size_t i = 0; i < 10; ++i) {
    const std::size_t own = static_cast<std::size_t>(d.labels[i]);
    const std::size_t other = 1 - own;
    EXPECT_GT(quadrant_energy(i, own), 5.0 * quadrant_energy(i, other)) << i;
  }
  for (double v : d.images.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Synth, SeedDeterminesTheSet) {
  EXPECT_EQ(synth_blobs(20, 4, 3).images, synth_blobs(20, 4, 3).images);
  EXPECT_NE(synth_blobs(20, 4, 3).images, synth_blobs(20, 4, 4).images);
}

TEST(BatchIterator, EpochIsAPermutation) {
  for (std::size_t n : {1u, 7u, 128u, 129u, 300u}) {
    const BatchIterator it(n, 128, 42, 3);
    std::vector<std::size_t> seen;
    for (const auto& b : it) {
      EXPECT_GE(b.size(), n == 1 ? 1u : 2u);
      seen.insert(seen.end(), b.begin(), b.end());
    }
    EXPECT_EQ(seen, it.order());
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(seen[i], i);
  }
}

TEST(BatchIterator, SingletonTailIsMerged) {
  const BatchIterator it(129, 128, 0, 0);
  ASSERT_EQ(it.batches().size(), 1u);
  EXPECT_EQ(it.batches()[0].size(), 129u);
}

TEST(BatchIterator, OrderDependsOnlyOnSeedAndEpoch) {
  EXPECT_EQ(BatchIterator(50, 8, 1, 2).order(), BatchIterator(50, 8, 1, 2).order());
  EXPECT_NE(BatchIterator(50, 8, 1, 2).order(), BatchIterator(50, 8, 1, 3).order());
  EXPECT_NE(BatchIterator(50, 8, 1, 2).order(), BatchIterator(50, 8, 2, 2).order());
}

}  // namespace
}  // namespace iea
