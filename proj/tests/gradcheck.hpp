#pragma once

// Finite-difference checks of each backward pass, shared by the unit tests
// and the acceptance binary. Every check reduces the layer output to
// L = <r, out> for a fixed random r and compares the analytic gradient of L
// with central differences, reporting the norm-wise relative error.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "iea/layers.hpp"
#include "iea/model.hpp"
#include "test_support.hpp"

namespace iea::gradcheck {

struct Result {
  std::string name;
  double error = 0.0;
};

namespace detail {

// Values in [0.1, 1] with a random sign, away from the ReLU kink.
inline Tensor signed_away_from_zero(const Shape& shape, SeededRng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return t;
}

// A shuffled ladder with steps of 0.05, so no pooling window has a near tie.
inline Tensor distinct_values(const Shape& shape, SeededRng& rng) {
  Tensor t(shape);
  std::vector<std::size_t> order(t.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size(); ++i) t[i] = 0.05 * static_cast<double>(order[i]) - 1.0;
  return t;
}

// A conv bias feeding train-mode batchnorm has an exactly zero gradient, and
// relative error between two round-off residues is meaningless; below a norm
// of 1e-8 the absolute difference is reported instead.
inline Result compare(std::string name, const Tensor& analytic, const Tensor& numeric) {
  const double scale = std::sqrt(std::max(dot(analytic, analytic), dot(numeric, numeric)));
  if (scale < 1e-8) {
    Tensor diff = numeric;
    add_inplace(diff, scaled(analytic, -1.0));
    return {std::move(name), std::sqrt(dot(diff, diff))};
  }
  return {std::move(name), testing::relative_error(analytic, numeric)};
}

}  // namespace detail

inline std::vector<Result> conv(std::uint64_t seed) {
  SeededRng rng(seed);
  ConvParams p = ConvParams::create(2, 3, 3, 1 + seed % 2, 1, rng);
  p.bias = testing::random_tensor(p.bias.shape(), rng);
  Tensor x = testing::random_tensor({2, 2, 5, 5}, rng);
  ConvCache cache;
  const Tensor r = testing::random_tensor(conv_forward(x, p, &cache).shape(), rng);
  const ConvGrads g = conv_backward(r, p, cache);
  auto loss = [&] { return dot(r, conv_forward(x, p)); };
  return {detail::compare("conv.input", g.input, testing::numeric_gradient(x, loss)),
          detail::compare("conv.weight", g.weight, testing::numeric_gradient(p.weight, loss)),
          detail::compare("conv.bias", g.bias, testing::numeric_gradient(p.bias, loss))};
}

inline std::vector<Result> iea(std::uint64_t seed, std::size_t m) {
  SeededRng rng(seed);
  IeaParams p = IeaParams::create(m, 2, 3, 3, 1, 1, rng);
  for (auto& mem : p.members) mem.bias = testing::random_tensor(mem.bias.shape(), rng);
  Tensor x = testing::random_tensor({2, 2, 4, 4}, rng);
  IeaCache cache;
  const Tensor r = testing::random_tensor(iea_forward(x, p, &cache).shape(), rng);
  const IeaGrads g = iea_backward(r, p, cache);
  auto loss = [&] { return dot(r, iea_forward(x, p)); };
  const std::string tag = "iea(m=" + std::to_string(m) + ")";
  std::vector<Result> out{detail::compare(tag + ".input", g.input, testing::numeric_gradient(x, loss))};
  for (std::size_t k = 0; k < m; ++k) {
    const std::string mt = tag + ".member" + std::to_string(k);
    out.push_back(detail::compare(mt + ".weight", g.members[k].weight,
                                  testing::numeric_gradient(p.members[k].weight, loss)));
    out.push_back(detail::compare(mt + ".bias", g.members[k].bias, testing::numeric_gradient(p.members[k].bias, loss)));
  }
  return out;
}

inline std::vector<Result> batchnorm(std::uint64_t seed) {
  SeededRng rng(seed);
  std::vector<Result> out;
  for (const Mode mode : {Mode::kTrain, Mode::kEval}) {
    BatchNormState s = BatchNormState::create(3);
    s.gamma = testing::random_tensor({3}, rng, 0.5, 1.5);
    s.beta = testing::random_tensor({3}, rng);
    s.running_mean = testing::random_tensor({3}, rng);
    s.running_var = testing::random_tensor({3}, rng, 0.5, 2.0);
    s.mode = mode;
    Tensor x = testing::random_tensor({3, 3, 2, 2}, rng);
    BatchNormCache cache;
    BatchNormState fwd = s;
    const Tensor r = testing::random_tensor(x.shape(), rng);
    batchnorm_forward(x, fwd, &cache);
    const BatchNormGrads g = batchnorm_backward(r, s, cache);
    // Forward on a copy so running statistics never feed back into the loss.
    auto loss = [&] {
      BatchNormState t = s;
      return dot(r, batchnorm_forward(x, t));
    };
    const std::string tag = mode == Mode::kTrain ? "batchnorm(train)" : "batchnorm(eval)";
    out.push_back(detail::compare(tag + ".input", g.input, testing::numeric_gradient(x, loss)));
    out.push_back(detail::compare(tag + ".gamma", g.gamma, testing::numeric_gradient(s.gamma, loss)));
    out.push_back(detail::compare(tag + ".beta", g.beta, testing::numeric_gradient(s.beta, loss)));
  }
  return out;
}

inline std::vector<Result> relu(std::uint64_t seed) {
  SeededRng rng(seed);
  Tensor x = detail::signed_away_from_zero({2, 3, 3, 3}, rng);
  const Tensor r = testing::random_tensor(x.shape(), rng);
  const Tensor g = relu_backward(r, x);
  auto loss = [&] { return dot(r, relu_forward(x)); };
  return {detail::compare("relu.input", g, testing::numeric_gradient(x, loss))};
}

inline std::vector<Result> maxpool(std::uint64_t seed) {
  SeededRng rng(seed);
  Tensor x = detail::distinct_values({2, 2, 5, 4}, rng);
  MaxPoolCache cache;
  const Tensor r = testing::random_tensor(maxpool_forward(x, 2, 2, &cache).shape(), rng);
  const Tensor g = maxpool_backward(r, cache);
  auto loss = [&] { return dot(r, maxpool_forward(x, 2, 2)); };
  return {detail::compare("maxpool.input", g, testing::numeric_gradient(x, loss))};
}

inline std::vector<Result> global_avgpool(std::uint64_t seed) {
  SeededRng rng(seed);
  Tensor x = testing::random_tensor({2, 3, 3, 4}, rng);
  const Tensor r = testing::random_tensor({2, 3}, rng);
  const Tensor g = global_avgpool_backward(r, x.shape());
  auto loss = [&] { return dot(r, global_avgpool_forward(x)); };
  return {detail::compare("global_avgpool.input", g, testing::numeric_gradient(x, loss))};
}

inline std::vector<Result> adaptive_avgpool(std::uint64_t seed) {
  SeededRng rng(seed);
  std::vector<Result> out;
  for (const std::size_t grid : {2u, 3u}) {
    Tensor x = testing::random_tensor({2, 2, 7, 5}, rng);
    const Tensor r = testing::random_tensor({2, 2, grid, grid}, rng);
    const Tensor g = adaptive_avgpool_backward(r, x.shape(), grid);
    auto loss = [&] { return dot(r, adaptive_avgpool_forward(x, grid)); };
    out.push_back(detail::compare("avgpool(grid=" + std::to_string(grid) + ").input", g,
                                  testing::numeric_gradient(x, loss)));
  }
  return out;
}

inline std::vector<Result> linear(std::uint64_t seed) {
  SeededRng rng(seed);
  LinearParams p = LinearParams::create(6, 4, rng);
  p.bias = testing::random_tensor({4}, rng);
  Tensor x = testing::random_tensor({3, 6}, rng);
  const Tensor r = testing::random_tensor({3, 4}, rng);
  const LinearGrads g = linear_backward(r, x, p);
  auto loss = [&] { return dot(r, linear_forward(x, p)); };
  return {detail::compare("linear.input", g.input, testing::numeric_gradient(x, loss)),
          detail::compare("linear.weight", g.weight, testing::numeric_gradient(p.weight, loss)),
          detail::compare("linear.bias", g.bias, testing::numeric_gradient(p.bias, loss))};
}

inline std::vector<Result> softmax_ce(std::uint64_t seed) {
  SeededRng rng(seed);
  Tensor logits = testing::random_tensor({4, 5}, rng, -3.0, 3.0);
  std::vector<int> labels;
  for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(rng.uniform_index(5)));
  const Tensor g = softmax_cross_entropy(logits, labels).grad_logits;
  auto loss = [&] { return softmax_cross_entropy(logits, labels).loss; };
  return {detail::compare("softmax_ce.logits", g, testing::numeric_gradient(logits, loss))};
}

// Full model (depth 2, m = 2, 2x2 head grid) under cross-entropy, every
// parameter tensor.
inline std::vector<Result> model(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.layers = {{3, 3, 1, 1, 2}, {4, 3, 1, 1, 2}};
  cfg.in_height = cfg.in_width = 8;
  cfg.num_classes = 4;
  cfg.head_grid = 2;
  cfg.seed = seed;
  Model net(cfg);
  SeededRng rng(derive_seed(seed, 1));
  for (auto& p : net.parameters())
    if (!p.weight_decay) *p.value = testing::random_tensor(p.value->shape(), rng, 0.5, 1.5);
  const Tensor x = testing::random_tensor({3, 1, 8, 8}, rng);
  const std::vector<int> labels{0, 3, 1};
  net.backward(softmax_cross_entropy(net.forward(x), labels).grad_logits);
  std::vector<Result> out;
  auto loss = [&] { return softmax_cross_entropy(net.forward(x), labels).loss; };
  for (auto& p : net.parameters()) {
    const Tensor analytic = *p.grad;
    out.push_back(detail::compare("model." + p.name, analytic, testing::numeric_gradient(*p.value, loss)));
  }
  return out;
}

}  // namespace iea::gradcheck
