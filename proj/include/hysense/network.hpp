#pragma once

// Model graphs: the dilated residual network and the LightResNet baseline,
// assembled from the primitives in layers.hpp.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hysense/errors.hpp"
#include "hysense/layers.hpp"
#include "hysense/rng.hpp"
#include "hysense/tensor.hpp"

namespace hysense {

enum class ModelKind { proposed, light_resnet };

inline std::string to_string(ModelKind k) {
  return k == ModelKind::proposed ? "proposed" : "light_resnet";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "proposed") return ModelKind::proposed;
  if (s == "light_resnet") return ModelKind::light_resnet;
  throw ConfigError("unknown model kind '" + std::string(s) + "' (expected proposed|light_resnet)");
}

/// Architecture hyper-parameters shared by both model kinds.
///
/// The proposed model uses all fields. LightResNet ignores `stem_channels`
/// and `module3_dilation`: its stem is a single 7x7 convolution producing
/// module_channels[0] maps followed by a stride-2 average pool.
struct ModelConfig {
  std::size_t input_channels = 3;
  std::size_t input_height = 224;
  std::size_t input_width = 224;
  std::array<std::size_t, 3> stem_channels{32, 32, 64};
  std::size_t stem_stride = 2;
  std::array<std::size_t, 3> module_channels{64, 128, 256};
  std::size_t blocks_per_module = 2;
  std::size_t module3_dilation = 2;
  std::size_t classifier_pool_h = 3;
  std::size_t classifier_pool_w = 3;
  std::size_t class_count = 4;

  // Scaled-down variant used for quick experiments on 64x64 images.
  static ModelConfig desk() {
    ModelConfig c;
    c.input_height = c.input_width = 64;
    c.stem_channels = {8, 8, 16};
    c.module_channels = {16, 32, 64};
    return c;
  }

  void validate(ModelKind kind) const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw ConfigError(std::string("model config: ") + what + " must be positive");
    };
    positive(input_channels, "input_channels");
    positive(input_height, "input_height");
    positive(input_width, "input_width");
    positive(stem_stride, "stem_stride");
    positive(blocks_per_module, "blocks_per_module");
    positive(module3_dilation, "module3_dilation");
    positive(classifier_pool_h, "classifier_pool_h");
    positive(classifier_pool_w, "classifier_pool_w");
    for (auto c : module_channels) positive(c, "module_channels");
    if (class_count < 2) throw ConfigError("model config: class_count must be >= 2");
    if (kind == ModelKind::proposed) {
      for (auto c : stem_channels) positive(c, "stem_channels");
      if (stem_channels[2] != module_channels[0])
        throw ConfigError("model config: stem output (" + std::to_string(stem_channels[2]) +
                          ") must equal module1 width (" + std::to_string(module_channels[0]) +
                          ") so the first block is an identity block");
    }
    if (classifier_pool_h < 3 || classifier_pool_w < 3)
      throw ConfigError("model config: classifier pool must be at least 3x3 for the 3x3 classifier");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels},
                     {"input_height", c.input_height},
                     {"input_width", c.input_width},
                     {"stem_channels", c.stem_channels},
                     {"stem_stride", c.stem_stride},
                     {"module_channels", c.module_channels},
                     {"blocks_per_module", c.blocks_per_module},
                     {"module3_dilation", c.module3_dilation},
                     {"classifier_pool", {c.classifier_pool_h, c.classifier_pool_w}},
                     {"class_count", c.class_count}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.input_channels = j.value("input_channels", c.input_channels);
  c.input_height = j.value("input_height", c.input_height);
  c.input_width = j.value("input_width", c.input_width);
  c.stem_channels = j.value("stem_channels", c.stem_channels);
  c.stem_stride = j.value("stem_stride", c.stem_stride);
  c.module_channels = j.value("module_channels", c.module_channels);
  c.blocks_per_module = j.value("blocks_per_module", c.blocks_per_module);
  c.module3_dilation = j.value("module3_dilation", c.module3_dilation);
  if (j.contains("classifier_pool")) {
    const auto& p = j.at("classifier_pool");
    c.classifier_pool_h = p.at(0).get<std::size_t>();
    c.classifier_pool_w = p.at(1).get<std::size_t>();
  }
  c.class_count = j.value("class_count", c.class_count);
}

// ---------------------------------------------------------------------------
// Parameter registry

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;  // null for buffers
  bool trainable = true;
  bool buffer = false;  // running statistics: checkpointed, never optimised or counted
};

// Entries live in a deque so the pointers handed to layers stay valid.
template <typename T>
class ParamRegistry {
 public:
  ParamEntry<T>* add(std::string name, Tensor<T>* value, Tensor<T>* grad, bool buffer = false) {
    for (const auto& e : entries_)
      if (e.name == name) throw ConfigError("duplicate parameter name " + name);
    entries_.push_back(ParamEntry<T>{std::move(name), value, grad, !buffer, buffer});
    return &entries_.back();
  }
  std::deque<ParamEntry<T>>& entries() { return entries_; }
  const std::deque<ParamEntry<T>>& entries() const { return entries_; }

 private:
  std::deque<ParamEntry<T>> entries_;
};

// ---------------------------------------------------------------------------
// Layers

template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad) = 0;
  // Output shape computed from the convolution arithmetic alone.
  virtual Shape output_shape(const Shape& in) const = 0;

  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

namespace detail {

inline Shape conv_shape(const Shape& in, std::size_t out_ch, const ConvGeometry& g) {
  if (in.size() != 4) throw ShapeError("expected NCHW shape, got " + to_string(in));
  return {in[0], out_ch, conv_output_extent(in[2], g), conv_output_extent(in[3], g)};
}

}  // namespace detail

template <typename T>
class ConvLayer final : public Layer<T> {
 public:
  enum class Init { kaiming_fan_out, uniform_fan_in };

  ConvLayer(ParamRegistry<T>& reg, std::string name, std::size_t in_ch, std::size_t out_ch,
            ConvGeometry g, bool bias, Rng& rng, Init init = Init::kaiming_fan_out)
      : Layer<T>(std::move(name)), geometry_(g) {
    weight_ = Tensor<T>({out_ch, in_ch, g.kernel, g.kernel});
    grad_weight_ = Tensor<T>(weight_.shape());
    if (init == Init::kaiming_fan_out) {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(out_ch * g.kernel * g.kernel));
      for (auto& w : weight_.data()) w = static_cast<T>(std_dev * rng.normal());
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * g.kernel * g.kernel));
      for (auto& w : weight_.data()) w = static_cast<T>(rng.uniform(-bound, bound));
    }
    reg.add(this->name() + ".weight", &weight_, &grad_weight_);
    if (bias) {
      bias_ = Tensor<T>({out_ch});
      grad_bias_ = Tensor<T>({out_ch});
      reg.add(this->name() + ".bias", &bias_, &grad_bias_);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    input_ = x;
    return conv2d_forward(x, weight_, &bias_, geometry_);
  }

  Tensor<T> backward(const Tensor<T>& grad) override {
    if (input_.empty()) throw StateError(this->name() + ": backward without cached forward");
    auto g = conv2d_backward(grad, input_, weight_, &bias_, geometry_);
    grad_weight_ = std::move(g.grad_weight);
    if (!bias_.empty()) grad_bias_ = std::move(g.grad_bias);
    return std::move(g.grad_input);
  }

  Shape output_shape(const Shape& in) const override {
    if (in.size() == 4 && in[1] != weight_.dim(1))
      throw ShapeError(this->name() + ": channel mismatch in shape trace");
    return detail::conv_shape(in, weight_.dim(0), geometry_);
  }

  const ConvGeometry& geometry() const { return geometry_; }

 private:
  ConvGeometry geometry_;
  Tensor<T> weight_, bias_, grad_weight_, grad_bias_;
  Tensor<T> input_;
};

template <typename T>
class BatchNormLayer final : public Layer<T> {
 public:
  BatchNormLayer(ParamRegistry<T>& reg, std::string name, std::size_t channels)
      : Layer<T>(std::move(name)), params_(BatchNormParams<T>::identity(channels)) {
    grad_gamma_ = Tensor<T>({channels});
    grad_beta_ = Tensor<T>({channels});
    gamma_entry_ = reg.add(this->name() + ".gamma", &params_.gamma, &grad_gamma_);
    reg.add(this->name() + ".beta", &params_.beta, &grad_beta_);
    reg.add(this->name() + ".running_mean", &params_.running_mean, nullptr, true);
    reg.add(this->name() + ".running_var", &params_.running_var, nullptr, true);
  }

  // A frozen batch norm always normalises with its running statistics and
  // never updates them, so every tensor it owns stays fixed.
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    const Mode effective = gamma_entry_->trainable ? mode : Mode::inference;
    return batchnorm2d_forward(x, params_, effective, &cache_);
  }

  Tensor<T> backward(const Tensor<T>& grad) override {
    auto g = batchnorm2d_backward(grad, params_, cache_);
    grad_gamma_ = std::move(g.grad_gamma);
    grad_beta_ = std::move(g.grad_beta);
    return std::move(g.grad_input);
  }

  Shape output_shape(const Shape& in) const override { return in; }

  BatchNormParams<T>& params() { return params_; }

 private:
  BatchNormParams<T> params_;
  BatchNormCache<T> cache_;
  Tensor<T> grad_gamma_, grad_beta_;
  ParamEntry<T>* gamma_entry_ = nullptr;
};

/// Convolution (no bias) + batch norm + optional ReLU.
template <typename T>
class ConvBlock final : public Layer<T> {
 public:
  ConvBlock(ParamRegistry<T>& reg, const std::string& name, std::size_t in_ch, std::size_t out_ch,
            ConvGeometry g, bool relu, Rng& rng)
      : Layer<T>(name),
        conv_(reg, name + ".conv", in_ch, out_ch, g, false, rng),
        bn_(reg, name + ".bn", out_ch),
        relu_(relu) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    auto y = bn_.forward(conv_.forward(x, mode), mode);
    if (!relu_) return y;
    pre_activation_ = y;
    return relu_forward(y);
  }

  Tensor<T> backward(const Tensor<T>& grad) override {
    if (relu_) {
      if (pre_activation_.empty()) throw StateError(this->name() + ": backward without forward");
      return conv_.backward(bn_.backward(relu_backward(grad, pre_activation_)));
    }
    return conv_.backward(bn_.backward(grad));
  }

  Shape output_shape(const Shape& in) const override { return conv_.output_shape(in); }

  bool has_relu() const { return relu_; }
  BatchNormLayer<T>& bn() { return bn_; }

 private:
  ConvLayer<T> conv_;
  BatchNormLayer<T> bn_;
  bool relu_;
  Tensor<T> pre_activation_;
};

/// Basic residual block. The main path is conv1 (with ReLU) then conv2
/// (without); the shortcut is either the identity or a 1x1 projection block
/// without ReLU. A ReLU follows the addition.
template <typename T>
class BasicBlock final : public Layer<T> {
 public:
  BasicBlock(ParamRegistry<T>& reg, const std::string& name, std::size_t in_ch,
             std::size_t out_ch, std::size_t stride, std::size_t dilation, Rng& rng)
      : Layer<T>(name),
        conv1_(reg, name + ".conv1", in_ch, out_ch, ConvGeometry{3, stride, dilation, dilation},
               true, rng),
        conv2_(reg, name + ".conv2", out_ch, out_ch, ConvGeometry{3, 1, dilation, dilation}, false,
               rng) {
    if (in_ch != out_ch || stride != 1)
      shortcut_.emplace(reg, name + ".shortcut", in_ch, out_ch, ConvGeometry{1, stride, 0, 1},
                        false, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    auto main = conv2_.forward(conv1_.forward(x, mode), mode);
    sum_ = shortcut_ ? residual_add(main, shortcut_->forward(x, mode)) : residual_add(main, x);
    return relu_forward(sum_);
  }

  Tensor<T> backward(const Tensor<T>& grad) override {
    if (sum_.empty()) throw StateError(this->name() + ": backward without cached forward");
    auto [g_main, g_short] = residual_add_backward(relu_backward(grad, sum_));
    auto g_in = conv1_.backward(conv2_.backward(g_main));
    const auto g_skip = shortcut_ ? shortcut_->backward(g_short) : std::move(g_short);
    for (std::size_t i = 0; i < g_in.size(); ++i) g_in[i] += g_skip[i];
    return g_in;
  }

  Shape output_shape(const Shape& in) const override {
    auto main = conv2_.output_shape(conv1_.output_shape(in));
    const auto skip = shortcut_ ? shortcut_->output_shape(in) : in;
    if (main != skip)
      throw ShapeError(this->name() + ": residual branches disagree " + to_string(main) + " vs " +
                       to_string(skip));
    return main;
  }

  bool is_projection() const { return shortcut_.has_value(); }
  ConvBlock<T>& conv2() { return conv2_; }

 private:
  ConvBlock<T> conv1_;
  ConvBlock<T> conv2_;
  std::optional<ConvBlock<T>> shortcut_;
  Tensor<T> sum_;
};

template <typename T>
class AvgPoolLayer final : public Layer<T> {
 public:
  AvgPoolLayer(std::string name, ConvGeometry g) : Layer<T>(std::move(name)), geometry_(g) {}
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    input_shape_ = x.shape();
    return avgpool2d_forward(x, geometry_);
  }
  Tensor<T> backward(const Tensor<T>& grad) override {
    if (input_shape_.empty()) throw StateError(this->name() + ": backward without forward");
    return avgpool2d_backward(grad, input_shape_, geometry_);
  }
  Shape output_shape(const Shape& in) const override {
    return detail::conv_shape(in, in.at(1), geometry_);
  }

 private:
  ConvGeometry geometry_;
  Shape input_shape_;
};

template <typename T>
class AdaptiveAvgPoolLayer final : public Layer<T> {
 public:
  AdaptiveAvgPoolLayer(std::string name, std::size_t h, std::size_t w)
      : Layer<T>(std::move(name)), h_(h), w_(w) {}
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    input_shape_ = x.shape();
    return adaptive_avgpool2d_forward(x, h_, w_);
  }
  Tensor<T> backward(const Tensor<T>& grad) override {
    if (input_shape_.empty()) throw StateError(this->name() + ": backward without forward");
    return adaptive_avgpool2d_backward(grad, input_shape_);
  }
  Shape output_shape(const Shape& in) const override {
    if (in.size() != 4 || h_ > in[2] || w_ > in[3])
      throw ShapeError(this->name() + ": pool target exceeds input " + to_string(in));
    return {in[0], in[1], h_, w_};
  }

 private:
  std::size_t h_, w_;
  Shape input_shape_;
};

/// Unpadded 3x3 convolution to class logits, flattened to (N, classes).
template <typename T>
class ClassifierHead final : public Layer<T> {
 public:
  ClassifierHead(ParamRegistry<T>& reg, std::string name, std::size_t in_ch, std::size_t classes,
                 Rng& rng)
      : Layer<T>(name),
        conv_(reg, std::move(name), in_ch, classes, ConvGeometry{3, 1, 0, 1}, true, rng,
              ConvLayer<T>::Init::uniform_fan_in) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    auto y = conv_.forward(x, mode);
    if (y.dim(2) != 1 || y.dim(3) != 1)
      throw ShapeError(this->name() + ": expected 1x1 logits, got " + to_string(y.shape()));
    conv_shape_ = y.shape();
    return y.reshaped({y.dim(0), y.dim(1)});
  }
  Tensor<T> backward(const Tensor<T>& grad) override {
    if (conv_shape_.empty()) throw StateError(this->name() + ": backward without forward");
    return conv_.backward(grad.reshaped(conv_shape_));
  }
  Shape output_shape(const Shape& in) const override {
    const auto s = conv_.output_shape(in);
    if (s[2] != 1 || s[3] != 1) throw ShapeError(this->name() + ": logits not 1x1");
    return {s[0], s[1]};
  }

 private:
  ConvLayer<T> conv_;
  Shape conv_shape_;
};

// ---------------------------------------------------------------------------
// Model

// Gradients of the trainable parameters, keyed by parameter name. Pointers
// refer to storage inside the model and stay valid until the next backward.
template <typename T>
using GradientTable = std::map<std::string, const Tensor<T>*>;

inline bool name_matches_prefix(std::string_view name, std::string_view prefix) {
  if (prefix.ends_with(".*")) prefix.remove_suffix(2);
  else if (prefix.ends_with("*")) prefix.remove_suffix(1);
  if (prefix.empty()) return true;
  if (!name.starts_with(prefix)) return false;
  return name.size() == prefix.size() || prefix.back() == '.' || name[prefix.size()] == '.';
}

template <typename T>
class Model {
 public:
  Model(ModelKind kind, ModelConfig config) : kind_(kind), config_(config) {}
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return config_; }

  /// Runs the network on an (N, C, H, W) batch and returns (N, classes) logits.
  /// Training mode updates batch-norm running statistics of trainable layers.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode) {
    require_rank(batch, 4, "model input");
    if (batch.dim(1) != config_.input_channels || batch.dim(2) != config_.input_height ||
        batch.dim(3) != config_.input_width)
      throw ShapeError("model input " + to_string(batch.shape()) + " does not match configured (" +
                       std::to_string(config_.input_channels) + "," +
                       std::to_string(config_.input_height) + "," +
                       std::to_string(config_.input_width) + ")");
    runtime_shapes_.clear();
    Tensor<T> x = batch;
    for (auto& layer : layers_) {
      x = layer->forward(x, mode);
      runtime_shapes_.emplace_back(layer->name(), x.shape());
    }
    forward_cached_ = true;
    return x;
  }

  /// Back-propagates d(loss)/d(logits) and returns gradients of every
  /// trainable parameter; frozen parameters get no entry.
  GradientTable<T> backward(const Tensor<T>& grad_logits) {
    if (!forward_cached_) throw StateError("model backward without a cached forward pass");
    if (runtime_shapes_.empty() || grad_logits.shape() != runtime_shapes_.back().second)
      throw ShapeError("model backward: grad_logits shape " + to_string(grad_logits.shape()));
    Tensor<T> g = grad_logits;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    GradientTable<T> table;
    for (const auto& e : registry_.entries())
      if (!e.buffer && e.trainable) table.emplace(e.name, e.grad);
    return table;
  }

  /// Analytic (layer name, output shape) chain for an input shape.
  std::vector<std::pair<std::string, Shape>> trace_shapes(const Shape& input) const {
    std::vector<std::pair<std::string, Shape>> out;
    Shape s = input;
    for (const auto& layer : layers_) {
      s = layer->output_shape(s);
      out.emplace_back(layer->name(), s);
    }
    return out;
  }

  // Shapes observed during the most recent forward.
  const std::vector<std::pair<std::string, Shape>>& runtime_shapes() const {
    return runtime_shapes_;
  }

  /// Element count of all weights, biases, gammas and betas (running
  /// statistics excluded, frozen parameters included).
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& e : registry_.entries())
      if (!e.buffer) n += e.value->size();
    return n;
  }

  std::size_t trainable_param_count() const {
    std::size_t n = 0;
    for (const auto& e : registry_.entries())
      if (!e.buffer && e.trainable) n += e.value->size();
    return n;
  }

  std::deque<ParamEntry<T>>& parameters() { return registry_.entries(); }
  const std::deque<ParamEntry<T>>& parameters() const { return registry_.entries(); }

  ParamEntry<T>* find(std::string_view name) {
    for (auto& e : registry_.entries())
      if (e.name == name) return &e;
    return nullptr;
  }

  /// Marks every non-buffer parameter under any of the prefixes as frozen and
  /// returns the affected names. "stem" matches "stem.0.conv.weight" but not
  /// "stem2.x"; a trailing ".*" is accepted.
  std::vector<std::string> freeze(const std::vector<std::string>& prefixes) {
    std::vector<std::string> frozen;
    for (auto& e : registry_.entries()) {
      if (e.buffer) continue;
      for (const auto& p : prefixes)
        if (name_matches_prefix(e.name, p)) {
          e.trainable = false;
          frozen.push_back(e.name);
          break;
        }
    }
    return frozen;
  }

  std::vector<std::unique_ptr<Layer<T>>>& layers() { return layers_; }

  ParamRegistry<T>& registry() { return registry_; }

  void add_layer(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

 private:
  ModelKind kind_;
  ModelConfig config_;
  ParamRegistry<T> registry_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::vector<std::pair<std::string, Shape>> runtime_shapes_;
  bool forward_cached_ = false;
};

namespace detail {

template <typename T>
void add_residual_modules(Model<T>& model, const ModelConfig& c, std::size_t in_ch,
                          const std::array<std::size_t, 3>& strides,
                          const std::array<std::size_t, 3>& dilations, Rng& rng) {
  for (std::size_t m = 0; m < 3; ++m) {
    const std::size_t out_ch = c.module_channels[m];
    for (std::size_t b = 0; b < c.blocks_per_module; ++b) {
      const std::string name = "module" + std::to_string(m + 1) + "." + std::to_string(b);
      model.add_layer(std::make_unique<BasicBlock<T>>(model.registry(), name, in_ch, out_ch,
                                                      b == 0 ? strides[m] : 1, dilations[m], rng));
      in_ch = out_ch;
    }
  }
}

template <typename T>
void add_head(Model<T>& model, const ModelConfig& c, Rng& rng) {
  model.add_layer(
      std::make_unique<AdaptiveAvgPoolLayer<T>>("pool", c.classifier_pool_h, c.classifier_pool_w));
  model.add_layer(std::make_unique<ClassifierHead<T>>(model.registry(), "classifier",
                                                      c.module_channels[2], c.class_count, rng));
}

template <typename T>
void check_graph(const Model<T>& model, const ModelConfig& c) {
  // Surfaces geometry errors (e.g. a pool target larger than the final map)
  // at build time rather than on first use.
  model.trace_shapes({1, c.input_channels, c.input_height, c.input_width});
}

}  // namespace detail

/// Dilated residual network: three-block convolutional stem, three residual
/// modules (the third dilated, stride 1), adaptive average pool and an
/// unpadded 3x3 classifier convolution. No max pooling anywhere.
template <typename T = float>
Model<T> build_proposed_model(const ModelConfig& c, std::uint64_t seed) {
  c.validate(ModelKind::proposed);
  Model<T> model(ModelKind::proposed, c);
  Rng rng(seed);
  auto& reg = model.registry();
  model.add_layer(std::make_unique<ConvBlock<T>>(reg, "stem.0", c.input_channels,
                                                 c.stem_channels[0],
                                                 ConvGeometry{3, c.stem_stride, 1, 1}, true, rng));
  model.add_layer(std::make_unique<ConvBlock<T>>(reg, "stem.1", c.stem_channels[0],
                                                 c.stem_channels[1], ConvGeometry{}, true, rng));
  model.add_layer(std::make_unique<ConvBlock<T>>(reg, "stem.2", c.stem_channels[1],
                                                 c.stem_channels[2], ConvGeometry{}, true, rng));
  detail::add_residual_modules(model, c, c.stem_channels[2], {1, 2, 1},
                               {1, 1, c.module3_dilation}, rng);
  detail::add_head(model, c, rng);
  detail::check_graph(model, c);
  return model;
}

/// First three stages of ResNet-18 with the stem max pool replaced by a
/// stride-2 3x3 average pool.
template <typename T = float>
Model<T> build_light_resnet(const ModelConfig& c, std::uint64_t seed) {
  c.validate(ModelKind::light_resnet);
  Model<T> model(ModelKind::light_resnet, c);
  Rng rng(seed);
  model.add_layer(std::make_unique<ConvBlock<T>>(model.registry(), "stem.0", c.input_channels,
                                                 c.module_channels[0],
                                                 ConvGeometry{7, c.stem_stride, 3, 1}, true, rng));
  model.add_layer(std::make_unique<AvgPoolLayer<T>>("stem.pool", ConvGeometry{3, 2, 1, 1}));
  detail::add_residual_modules(model, c, c.module_channels[0], {1, 2, 2}, {1, 1, 1}, rng);
  detail::add_head(model, c, rng);
  detail::check_graph(model, c);
  return model;
}

template <typename T = float>
Model<T> build_model(ModelKind kind, const ModelConfig& c, std::uint64_t seed) {
  return kind == ModelKind::proposed ? build_proposed_model<T>(c, seed)
                                     : build_light_resnet<T>(c, seed);
}

/// Closed-form trainable parameter count for a configuration.
inline std::size_t analytic_param_count(ModelKind kind, const ModelConfig& c) {
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k; };
  auto block = [&](std::size_t in, std::size_t out, std::size_t k) {
    return conv(in, out, k) + 2 * out;  // conv without bias + gamma/beta
  };
  std::size_t n = 0;
  std::size_t ch;
  if (kind == ModelKind::proposed) {
    n += block(c.input_channels, c.stem_channels[0], 3);
    n += block(c.stem_channels[0], c.stem_channels[1], 3);
    n += block(c.stem_channels[1], c.stem_channels[2], 3);
    ch = c.stem_channels[2];
  } else {
    n += block(c.input_channels, c.module_channels[0], 7);
    ch = c.module_channels[0];
  }
  const std::array<std::size_t, 3> strides =
      kind == ModelKind::proposed ? std::array<std::size_t, 3>{1, 2, 1}
                                  : std::array<std::size_t, 3>{1, 2, 2};
  for (std::size_t m = 0; m < 3; ++m) {
    const std::size_t out = c.module_channels[m];
    for (std::size_t b = 0; b < c.blocks_per_module; ++b) {
      const std::size_t stride = b == 0 ? strides[m] : 1;
      n += block(ch, out, 3) + block(out, out, 3);
      if (ch != out || stride != 1) n += block(ch, out, 1);
      ch = out;
    }
  }
  n += conv(ch, c.class_count, 3) + c.class_count;
  return n;
}

}  // namespace hysense
