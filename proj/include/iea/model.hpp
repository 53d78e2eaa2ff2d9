#pragma once

// N-layer CNN built from a declarative config:
//   depth x [conv-or-IEA -> batchnorm -> relu -> maxpool 2x2/2]
//   -> average pool -> linear head
// A layer with m == 1 is a plain convolution; m >= 2 is an IEA layer.

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "iea/layers.hpp"

namespace iea {

struct LayerSpec {
  std::size_t out_channels = 32;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t m = 1;
};

inline constexpr std::size_t kPoolWindow = 2;
inline constexpr std::size_t kPoolStride = 2;

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& field) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
      throw ConfigError(field + ": '" + item + "' is not an integer");
    }
    if (used != item.size() || v < 0) throw ConfigError(field + ": '" + item + "' is not a non-negative integer");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError(field + ": empty list");
  return out;
}

}  // namespace detail

inline constexpr std::size_t kDefaultHeadGrid = 4;

struct ModelConfig {
  std::vector<LayerSpec> layers;
  std::size_t in_channels = 1;
  std::size_t in_height = 28;
  std::size_t in_width = 28;
  std::size_t num_classes = 10;
  // Output grid of the average pool in front of the head; 1 = global.
  std::size_t head_grid = kDefaultHeadGrid;
  std::uint64_t seed = 0;

  std::size_t depth() const { return layers.size(); }

  // Default widths 32 / 32,64 / 32,64,128 ...; 3x3 kernels, stride 1, pad 1.
  static ModelConfig standard(std::size_t depth, std::size_t m, std::uint64_t seed = 0) {
    ModelConfig cfg;
    std::size_t width = 32;
    for (std::size_t i = 0; i < depth; ++i, width *= 2) cfg.layers.push_back({width, 3, 1, 1, m});
    cfg.seed = seed;
    cfg.clamp_head_grid();
    return cfg;
  }

  // Shrinks head_grid to fit the final feature map when the stack is deep.
  void clamp_head_grid() {
    const auto last = spatial_trace().back();
    head_grid = std::min({head_grid, last.first, last.second});
  }

  void set_m(std::size_t m) {
    for (auto& l : layers) l.m = m;
  }

  // Spatial extent entering each block, plus the one left for the head.
  std::vector<std::pair<std::size_t, std::size_t>> spatial_trace() const {
    std::vector<std::pair<std::size_t, std::size_t>> trace{{in_height, in_width}};
    std::size_t h = in_height, w = in_width;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (h + 2 * l.padding < l.kernel || w + 2 * l.padding < l.kernel)
        throw ConfigError("layer " + std::to_string(i) + ": kernel larger than the " + std::to_string(h) + "x" +
                          std::to_string(w) + " input");
      ConvGeometry g{1, h, w, l.kernel, l.kernel, l.stride, l.padding};
      g.validate();
      h = g.out_h();
      w = g.out_w();
      if (h < kPoolWindow || w < kPoolWindow)
        throw ConfigError("spatial dims exhausted at layer " + std::to_string(i) + ": " + std::to_string(h) + "x" +
                          std::to_string(w) + " cannot be max-pooled");
      h = (h - kPoolWindow) / kPoolStride + 1;
      w = (w - kPoolWindow) / kPoolStride + 1;
      trace.emplace_back(h, w);
    }
    return trace;
  }

  void validate() const {
    if (layers.empty()) throw ConfigError("depth must be at least 1");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string at = " (layer " + std::to_string(i) + ")";
      if (l.m == 0) throw ConfigError("m must be a positive integer" + at);
      if (l.out_channels == 0) throw ConfigError("channels must be positive" + at);
      if (l.kernel == 0) throw ConfigError("kernel must be positive" + at);
      if (l.stride == 0) throw ConfigError("stride must be positive" + at);
    }
    if (in_channels == 0 || in_height == 0 || in_width == 0) throw ConfigError("input shape must be positive");
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (head_grid == 0) throw ConfigError("head_grid must be positive");
    const auto last = spatial_trace().back();
    if (head_grid > last.first || head_grid > last.second)
      throw ConfigError("head_grid " + std::to_string(head_grid) + " exceeds the final " + std::to_string(last.first) + "x" +
                        std::to_string(last.second) + " feature map");
  }

  // key=value lines; round-trips through from_text.
  std::string to_text() const {
    std::vector<std::size_t> ch, k, s, p, m;
    for (const auto& l : layers) {
      ch.push_back(l.out_channels);
      k.push_back(l.kernel);
      s.push_back(l.stride);
      p.push_back(l.padding);
      m.push_back(l.m);
    }
    std::ostringstream os;
    os << "depth=" << layers.size() << '\n'
       << "channels=" << detail::join_sizes(ch) << '\n'
       << "kernels=" << detail::join_sizes(k) << '\n'
       << "strides=" << detail::join_sizes(s) << '\n'
       << "paddings=" << detail::join_sizes(p) << '\n'
       << "m=" << detail::join_sizes(m) << '\n'
       << "input=" << in_channels << ',' << in_height << ',' << in_width << '\n'
       << "num_classes=" << num_classes << '\n'
       << "head_grid=" << head_grid << '\n'
       << "seed=" << seed << '\n';
    return os.str();
  }

  static ModelConfig from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("model config line without '=': " + line);
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& key) -> const std::string& {
      auto it = kv.find(key);
      if (it == kv.end()) throw ConfigError("model config is missing '" + key + "'");
      return it->second;
    };
    auto one = [&](const std::string& key) { return detail::parse_sizes(get(key), key).at(0); };
    ModelConfig cfg;
    const std::size_t depth = one("depth");
    const auto ch = detail::parse_sizes(get("channels"), "channels");
    const auto k = detail::parse_sizes(get("kernels"), "kernels");
    const auto s = detail::parse_sizes(get("strides"), "strides");
    const auto p = detail::parse_sizes(get("paddings"), "paddings");
    const auto m = detail::parse_sizes(get("m"), "m");
    for (const auto* v : {&ch, &k, &s, &p, &m})
      if (v->size() != depth) throw ConfigError("model config lists do not match depth " + std::to_string(depth));
    for (std::size_t i = 0; i < depth; ++i) cfg.layers.push_back({ch[i], k[i], s[i], p[i], m[i]});
    const auto in = detail::parse_sizes(get("input"), "input");
    if (in.size() != 3) throw ConfigError("input must be C,H,W");
    cfg.in_channels = in[0];
    cfg.in_height = in[1];
    cfg.in_width = in[2];
    cfg.num_classes = one("num_classes");
    cfg.head_grid = one("head_grid");
    try {
      cfg.seed = std::stoull(get("seed"));
    } catch (const std::exception&) {
      throw ConfigError("seed is not an unsigned integer");
    }
    cfg.validate();
    return cfg;
  }

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) { return a.to_text() == b.to_text(); }
};

// A trainable tensor with its gradient slot.
struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
  bool weight_decay;  // false for biases and batchnorm affine params
};

// Any tensor that belongs in a checkpoint (parameters and running stats).
struct StateRef {
  std::string name;
  Tensor* value;
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    SeededRng rng(cfg_.seed);
    std::size_t cin = cfg_.in_channels;
    for (const auto& l : cfg_.layers) {
      Block b;
      b.conv = IeaParams::create(l.m, cin, l.out_channels, l.kernel, l.stride, l.padding, rng);
      b.bn = BatchNormState::create(l.out_channels);
      for (const auto& mem : b.conv.members)
        b.conv_grads.push_back({Tensor(), Tensor::zeros(mem.weight.shape()), Tensor::zeros(mem.bias.shape())});
      b.bn_grads = {Tensor(), Tensor::zeros({l.out_channels}), Tensor::zeros({l.out_channels})};
      blocks_.push_back(std::move(b));
      cin = l.out_channels;
    }
    head_ = LinearParams::create(cin * cfg_.head_grid * cfg_.head_grid, cfg_.num_classes, rng);
    head_grads_ = {Tensor(), Tensor::zeros(head_.weight.shape()), Tensor::zeros(head_.bias.shape())};
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t depth() const { return blocks_.size(); }

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) {
    mode_ = mode;
    for (auto& b : blocks_) b.bn.mode = mode;
  }

  const IeaParams& conv(std::size_t layer) const { return blocks_.at(layer).conv; }
  IeaParams& conv(std::size_t layer) { return blocks_.at(layer).conv; }
  const BatchNormState& batchnorm(std::size_t layer) const { return blocks_.at(layer).bn; }
  BatchNormState& batchnorm(std::size_t layer) { return blocks_.at(layer).bn; }
  const LinearParams& head() const { return head_; }
  LinearParams& head() { return head_; }

  // Logits N x num_classes. In train mode the caches needed by backward()
  // are kept and batchnorm running statistics advance.
  Tensor forward(const Tensor& x) {
    check_input(x);
    const bool keep = mode_ == Mode::kTrain;
    Tensor h = x;
    for (auto& b : blocks_) {
      Tensor z = iea_forward(h, b.conv, keep ? &b.conv_cache : nullptr);
      Tensor y = batchnorm_forward(z, b.bn, keep ? &b.bn_cache : nullptr);
      Tensor r = relu_forward(y);
      h = maxpool_forward(r, kPoolWindow, kPoolStride, keep ? &b.pool_cache : nullptr);
      if (keep) b.relu_input = std::move(y);
    }
    Tensor pooled = adaptive_avgpool_forward(h, cfg_.head_grid);
    Tensor flat = pooled.reshaped({pooled.dim(0), pooled.size() / pooled.dim(0)});
    Tensor logits = linear_forward(flat, head_);
    if (keep) {
      head_input_shape_ = h.shape();
      head_features_ = std::move(flat);
    }
    return logits;
  }

  // Fills every gradient slot from dLoss/dlogits of the last train forward.
  void backward(const Tensor& grad_logits) {
    if (head_features_.empty()) throw UsageError("Model::backward requires a train-mode forward first");
    LinearGrads lg = linear_backward(grad_logits, head_features_, head_);
    head_grads_.weight = std::move(lg.weight);
    head_grads_.bias = std::move(lg.bias);
    const std::size_t g = cfg_.head_grid;
    Tensor grad = adaptive_avgpool_backward(
        lg.input.reshaped({head_input_shape_[0], head_input_shape_[1], g, g}), head_input_shape_, g);
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      Block& b = blocks_[i];
      grad = maxpool_backward(grad, b.pool_cache);
      grad = relu_backward(grad, b.relu_input);
      BatchNormGrads bg = batchnorm_backward(grad, b.bn, b.bn_cache);
      b.bn_grads.gamma = std::move(bg.gamma);
      b.bn_grads.beta = std::move(bg.beta);
      IeaGrads cg = iea_backward(bg.input, b.conv, b.conv_cache, i > 0);
      for (std::size_t k = 0; k < cg.members.size(); ++k) {
        b.conv_grads[k].weight = std::move(cg.members[k].weight);
        b.conv_grads[k].bias = std::move(cg.members[k].bias);
      }
      grad = std::move(cg.input);
    }
  }

  // Post-ReLU activations of block `layer` (before pooling), N x C x H x W.
  // Requires eval mode so that nothing in the model changes.
  Tensor activations(const Tensor& x, std::size_t layer) {
    if (layer >= blocks_.size())
      throw ConfigError("layer index " + std::to_string(layer) + " out of range for depth " + std::to_string(blocks_.size()));
    if (mode_ != Mode::kEval) throw UsageError("feature extraction requires eval mode");
    check_input(x);
    Tensor h = x;
    for (std::size_t i = 0;; ++i) {
      Block& b = blocks_[i];
      Tensor r = relu_forward(batchnorm_forward(iea_forward(h, b.conv), b.bn));
      if (i == layer) return r;
      h = maxpool_forward(r, kPoolWindow, kPoolStride);
    }
  }

  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      Block& b = blocks_[i];
      const std::string pre = "block" + std::to_string(i) + ".";
      for (std::size_t k = 0; k < b.conv.members.size(); ++k) {
        const std::string mp = pre + "member" + std::to_string(k) + ".";
        out.push_back({mp + "weight", &b.conv.members[k].weight, &b.conv_grads[k].weight, true});
        out.push_back({mp + "bias", &b.conv.members[k].bias, &b.conv_grads[k].bias, false});
      }
      out.push_back({pre + "bn.gamma", &b.bn.gamma, &b.bn_grads.gamma, false});
      out.push_back({pre + "bn.beta", &b.bn.beta, &b.bn_grads.beta, false});
    }
    out.push_back({"head.weight", &head_.weight, &head_grads_.weight, true});
    out.push_back({"head.bias", &head_.bias, &head_grads_.bias, false});
    return out;
  }

  std::vector<StateRef> state() {
    std::vector<StateRef> out;
    for (auto& p : parameters()) out.push_back({p.name, p.value});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string pre = "block" + std::to_string(i) + ".bn.";
      out.push_back({pre + "running_mean", &blocks_[i].bn.running_mean});
      out.push_back({pre + "running_var", &blocks_[i].bn.running_var});
    }
    return out;
  }

  // Every trainable scalar: conv/IEA weights and biases, BN gamma/beta, head.
  std::size_t param_count() const {
    std::size_t n = head_.param_count();
    for (const auto& b : blocks_) n += b.conv.param_count() + b.bn.param_count();
    return n;
  }

  // Conv/IEA weights and biases only.
  std::size_t conv_param_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.conv.param_count();
    return n;
  }

 private:
  struct Block {
    IeaParams conv;
    BatchNormState bn;
    IeaCache conv_cache;
    BatchNormCache bn_cache;
    Tensor relu_input;
    MaxPoolCache pool_cache;
    std::vector<ConvGrads> conv_grads;
    BatchNormGrads bn_grads;
  };

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.in_height || x.dim(3) != cfg_.in_width)
      throw DimensionError("model input " + shape_str(x.shape()) + " does not match configured N x " +
                           std::to_string(cfg_.in_channels) + " x " + std::to_string(cfg_.in_height) + " x " +
                           std::to_string(cfg_.in_width));
  }

  ModelConfig cfg_;
  std::vector<Block> blocks_;
  LinearParams head_;
  LinearGrads head_grads_;
  Mode mode_ = Mode::kTrain;
  Shape head_input_shape_;
  Tensor head_features_;
};

inline Model build_model(const ModelConfig& cfg) { return Model(cfg); }

inline std::size_t param_count(const Model& model) { return model.param_count(); }

}  // namespace iea
