#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "disent/ops.hpp"
#include "disent/tensor.hpp"

namespace disent {

enum class LayerKind { conv, deconv, dense, flatten, reshape, activation };
enum class Activation { none, relu, leaky_relu, sigmoid, tanh };

NLOHMANN_JSON_SERIALIZE_ENUM(LayerKind, {{LayerKind::conv, "conv"},
                                         {LayerKind::deconv, "deconv"},
                                         {LayerKind::dense, "dense"},
                                         {LayerKind::flatten, "flatten"},
                                         {LayerKind::reshape, "reshape"},
                                         {LayerKind::activation, "activation"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::none, "none"},
                                          {Activation::relu, "relu"},
                                          {Activation::leaky_relu, "leaky_relu"},
                                          {Activation::sigmoid, "sigmoid"},
                                          {Activation::tanh, "tanh"}})

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t out = 0;  // channels for conv/deconv, units for dense
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Activation activation = Activation::none;
  Shape target;  // reshape only, per-sample shape

  static LayerSpec conv(std::size_t out, std::size_t k, std::size_t s, std::size_t p, Activation a) {
    return {LayerKind::conv, out, k, s, p, a, {}};
  }
  static LayerSpec deconv(std::size_t out, std::size_t k, std::size_t s, std::size_t p, Activation a) {
    return {LayerKind::deconv, out, k, s, p, a, {}};
  }
  static LayerSpec dense(std::size_t units, Activation a) { return {LayerKind::dense, units, 1, 1, 0, a, {}}; }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 1, 1, 0, Activation::none, {}}; }
  static LayerSpec reshape(Shape target) { return {LayerKind::reshape, 0, 1, 1, 0, Activation::none, std::move(target)}; }
  static LayerSpec act(Activation a) { return {LayerKind::activation, 0, 1, 1, 0, a, {}}; }

  bool operator==(const LayerSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = nlohmann::json{{"kind", l.kind}, {"activation", l.activation}};
  switch (l.kind) {
    case LayerKind::conv:
    case LayerKind::deconv:
      j["out"] = l.out;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::dense: j["out"] = l.out; break;
    case LayerKind::reshape: j["target"] = l.target; break;
    default: break;
  }
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  l = LayerSpec{};
  j.at("kind").get_to(l.kind);
  l.activation = j.value("activation", Activation::none);
  l.out = j.value("out", std::size_t{0});
  l.kernel = j.value("kernel", std::size_t{1});
  l.stride = j.value("stride", std::size_t{1});
  l.padding = j.value("padding", std::size_t{0});
  if (j.contains("target")) j.at("target").get_to(l.target);
}

/// Declarative encoder/decoder description, independent of the training objective.
struct ModelSpec {
  std::string name = "custom";
  std::vector<LayerSpec> encoder_layers;
  std::vector<LayerSpec> decoder_layers;
  std::size_t latent_dim = 0;
  Shape image_shape;  // (channels, H, W)
  std::size_t condition_dim = 0;

  bool operator==(const ModelSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"encoder_layers", s.encoder_layers},
                     {"decoder_layers", s.decoder_layers},
                     {"latent_dim", s.latent_dim},
                     {"image_shape", s.image_shape},
                     {"condition_dim", s.condition_dim}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.name = j.value("name", std::string("custom"));
  j.at("encoder_layers").get_to(s.encoder_layers);
  j.at("decoder_layers").get_to(s.decoder_layers);
  j.at("latent_dim").get_to(s.latent_dim);
  j.at("image_shape").get_to(s.image_shape);
  s.condition_dim = j.value("condition_dim", std::size_t{0});
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline Tensor apply_activation(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::none: return x;
    case Activation::relu: return relu(x);
    case Activation::leaky_relu: return leaky_relu(x, 0.2);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
  }
  return x;
}

}  // namespace detail

/// A parameterized chain of layers with per-sample shape bookkeeping.
class Sequential {
 public:
  struct Layer {
    LayerSpec spec;
    std::string name;
    Tensor weight;
    Tensor bias;
    Shape in_shape;
    Shape out_shape;
  };

  Sequential() = default;

  /// Validates shapes layer by layer and allocates Kaiming-uniform weights with zero bias.
  Sequential(std::string prefix, const std::vector<LayerSpec>& specs, Shape input_shape, std::mt19937_64& rng)
      : prefix_(std::move(prefix)), input_shape_(input_shape) {
    Shape cur = std::move(input_shape);
    for (std::size_t i = 0; i < specs.size(); ++i) {
      Layer layer{specs[i], prefix_ + "." + std::to_string(i), {}, {}, cur, {}};
      layer.out_shape = infer(layer, cur);
      allocate(layer, rng);
      cur = layer.out_shape;
      layers_.push_back(std::move(layer));
    }
    output_shape_ = cur;
  }

  /// Output per-sample shape for `input` under `specs`, or ShapeError naming the first bad layer.
  static Shape compose_shapes(const std::string& prefix, const std::vector<LayerSpec>& specs, Shape input) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      Layer layer{specs[i], prefix + "." + std::to_string(i), {}, {}, input, {}};
      input = infer(layer, input);
    }
    return input;
  }

  Tensor forward(Tensor x) const {
    for (const auto& l : layers_) {
      switch (l.spec.kind) {
        case LayerKind::conv: x = conv2d(x, l.weight, l.bias, l.spec.stride, l.spec.padding, l.name); break;
        case LayerKind::deconv: x = conv_transpose2d(x, l.weight, l.bias, l.spec.stride, l.spec.padding, l.name); break;
        case LayerKind::dense: x = linear(x, l.weight, l.bias); break;
        case LayerKind::flatten:
        case LayerKind::reshape: {
          Shape s{x.size(0)};
          s.insert(s.end(), l.out_shape.begin(), l.out_shape.end());
          x = disent::reshape(x, s);
          break;
        }
        case LayerKind::activation: break;
      }
      x = detail::apply_activation(x, l.spec.activation);
    }
    return x;
  }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (const auto& l : layers_) {
      if (l.weight.defined()) out.push_back({l.name + ".weight", l.weight});
      if (l.bias.defined()) out.push_back({l.name + ".bias", l.bias});
    }
    return out;
  }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return output_shape_; }

 private:
  static Shape infer(const Layer& layer, const Shape& in) {
    const LayerSpec& s = layer.spec;
    auto fail = [&](const std::string& why) -> ShapeError {
      return ShapeError("layer " + layer.name + " (" + nlohmann::json(s.kind).get<std::string>() + "): " + why +
                        "; input shape " + shape_str(in));
    };
    switch (s.kind) {
      case LayerKind::conv: {
        if (in.size() != 3) throw fail("conv expects (C,H,W) input");
        if (s.out == 0 || s.kernel == 0 || s.stride == 0) throw fail("conv needs positive out/kernel/stride");
        const long long h = static_cast<long long>(in[1]) + 2 * static_cast<long long>(s.padding) - static_cast<long long>(s.kernel);
        const long long w = static_cast<long long>(in[2]) + 2 * static_cast<long long>(s.padding) - static_cast<long long>(s.kernel);
        if (h < 0 || w < 0) throw fail("non-positive output extent");
        return {s.out, static_cast<std::size_t>(h) / s.stride + 1, static_cast<std::size_t>(w) / s.stride + 1};
      }
      case LayerKind::deconv: {
        if (in.size() != 3) throw fail("deconv expects (C,H,W) input");
        if (s.out == 0 || s.kernel == 0 || s.stride == 0) throw fail("deconv needs positive out/kernel/stride");
        const long long h = (static_cast<long long>(in[1]) - 1) * static_cast<long long>(s.stride) -
                            2 * static_cast<long long>(s.padding) + static_cast<long long>(s.kernel);
        const long long w = (static_cast<long long>(in[2]) - 1) * static_cast<long long>(s.stride) -
                            2 * static_cast<long long>(s.padding) + static_cast<long long>(s.kernel);
        if (h < 1 || w < 1) throw fail("non-positive output extent");
        return {s.out, static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
      }
      case LayerKind::dense:
        if (in.size() != 1) throw fail("dense expects a flat input (insert a flatten layer)");
        if (s.out == 0) throw fail("dense needs positive units");
        return {s.out};
      case LayerKind::flatten: return {numel(in)};
      case LayerKind::reshape:
        if (numel(s.target) != numel(in)) throw fail("reshape target " + shape_str(s.target) + " has wrong size");
        return s.target;
      case LayerKind::activation: return in;
    }
    throw fail("unknown layer kind");
  }

  static void allocate(Layer& layer, std::mt19937_64& rng) {
    const LayerSpec& s = layer.spec;
    Shape wshape;
    std::size_t fan_in = 0, nbias = 0;
    switch (s.kind) {
      case LayerKind::conv:
        wshape = {s.out, layer.in_shape[0], s.kernel, s.kernel};
        fan_in = layer.in_shape[0] * s.kernel * s.kernel;
        nbias = s.out;
        break;
      case LayerKind::deconv:
        wshape = {layer.in_shape[0], s.out, s.kernel, s.kernel};
        fan_in = layer.in_shape[0] * s.kernel * s.kernel;
        nbias = s.out;
        break;
      case LayerKind::dense:
        wshape = {s.out, layer.in_shape[0]};
        fan_in = layer.in_shape[0];
        nbias = s.out;
        break;
      default: return;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> w(numel(wshape));
    for (auto& v : w) v = (2.0 * detail::uniform01(rng) - 1.0) * bound;
    layer.weight = Tensor::parameter(wshape, std::move(w));
    layer.bias = Tensor::parameter({nbias}, std::vector<double>(nbias, 0.0));
  }

  std::string prefix_;
  std::vector<Layer> layers_;
  Shape input_shape_;
  Shape output_shape_;
};

/// Diagonal Gaussian posterior over the latent space. `z`/`eps` are set by reparameterize().
struct LatentPosterior {
  Tensor mu;      // (B, d)
  Tensor logvar;  // (B, d), clamped to [-30, 30]
  Tensor z;       // (B, d)
  Tensor eps;     // (B, d), no grad
};

inline constexpr double kLogvarBound = 30.0;

/// Checks the encoder/decoder shape contract of a spec without allocating.
inline void validate_model_spec(const ModelSpec& spec) {
  if (spec.latent_dim == 0) throw ShapeError("model spec: latent_dim must be positive");
  if (spec.image_shape.size() != 3) throw ShapeError("model spec: image_shape must be (channels, H, W)");
  Shape enc_in = spec.image_shape;
  enc_in[0] += spec.condition_dim;
  const Shape enc_out = Sequential::compose_shapes("encoder", spec.encoder_layers, enc_in);
  if (enc_out != Shape{2 * spec.latent_dim}) {
    throw ShapeError("model spec: encoder output " + shape_str(enc_out) + " must be (" +
                     std::to_string(2 * spec.latent_dim) + ") = mean and log-variance heads");
  }
  const Shape dec_out =
      Sequential::compose_shapes("decoder", spec.decoder_layers, Shape{spec.latent_dim + spec.condition_dim});
  if (dec_out != spec.image_shape) {
    throw ShapeError("model spec: decoder output " + shape_str(dec_out) + " must equal image shape " +
                     shape_str(spec.image_shape));
  }
}

/// Instantiated encoder/decoder pair.
class Network {
 public:
  Network() = default;
  Network(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    validate_model_spec(spec_);
    std::mt19937_64 rng(seed);
    Shape enc_in = spec_.image_shape;
    enc_in[0] += spec_.condition_dim;
    encoder_ = Sequential("encoder", spec_.encoder_layers, enc_in, rng);
    decoder_ = Sequential("decoder", spec_.decoder_layers, Shape{spec_.latent_dim + spec_.condition_dim}, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  const Sequential& encoder() const { return encoder_; }
  const Sequential& decoder() const { return decoder_; }
  Sequential& encoder() { return encoder_; }
  Sequential& decoder() { return decoder_; }

  std::vector<NamedTensor> parameters() const {
    auto out = encoder_.parameters();
    auto dec = decoder_.parameters();
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
  }

 private:
  ModelSpec spec_;
  Sequential encoder_;
  Sequential decoder_;
};

/// Pure function of (spec, seed).
inline Network build_model(const ModelSpec& spec, std::uint64_t seed) { return Network(spec, seed); }

namespace detail {

inline void check_condition(const Network& net, const Tensor* condition, std::size_t batch, const char* where) {
  const std::size_t cd = net.spec().condition_dim;
  if (cd == 0) {
    if (condition && condition->defined()) throw ShapeError(std::string(where) + ": unconditional network got a condition");
    return;
  }
  if (!condition || !condition->defined()) throw ShapeError(std::string(where) + ": conditional network requires a condition");
  if (condition->shape() != Shape{batch, cd}) {
    throw ShapeError(std::string(where) + ": condition shape " + shape_str(condition->shape()) + " != (" +
                     std::to_string(batch) + "," + std::to_string(cd) + ")");
  }
}

}  // namespace detail

/// Posterior mean and clamped log-variance. A condition, when required, is appended as constant planes.
inline LatentPosterior forward_encode(const Network& net, const Tensor& x, const Tensor* condition = nullptr) {
  const auto& spec = net.spec();
  if (x.dim() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != spec.image_shape) {
    throw ShapeError("forward_encode: input " + shape_str(x.shape()) + " does not match image shape " +
                     shape_str(spec.image_shape));
  }
  const std::size_t batch = x.size(0);
  detail::check_condition(net, condition, batch, "forward_encode");
  Tensor input = x;
  if (spec.condition_dim > 0) {
    const std::size_t plane = x.size(2) * x.size(3);
    Tensor planes({batch, spec.condition_dim, x.size(2), x.size(3)});
    auto pd = planes.mutable_data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < spec.condition_dim; ++c)
        std::fill_n(pd.begin() + static_cast<std::ptrdiff_t>((b * spec.condition_dim + c) * plane), plane,
                    (*condition)[b * spec.condition_dim + c]);
    input = concat({x, planes}, 1);
  }
  Tensor h = net.encoder().forward(input);
  const std::size_t d = spec.latent_dim;
  LatentPosterior post;
  post.mu = slice(h, 1, 0, d);
  post.logvar = clamp(slice(h, 1, d, 2 * d), -kLogvarBound, kLogvarBound);
  return post;
}

/// Decoder output (B, channels, H, W); a condition, when required, is concatenated to z.
inline Tensor forward_decode(const Network& net, const Tensor& z, const Tensor* condition = nullptr) {
  const auto& spec = net.spec();
  if (z.dim() != 2 || z.size(1) != spec.latent_dim) {
    throw ShapeError("forward_decode: z shape " + shape_str(z.shape()) + " does not match latent_dim " +
                     std::to_string(spec.latent_dim));
  }
  detail::check_condition(net, condition, z.size(0), "forward_decode");
  Tensor input = spec.condition_dim > 0 ? concat({z, *condition}, 1) : z;
  Tensor out = net.decoder().forward(input);
  Shape s{z.size(0)};
  s.insert(s.end(), spec.image_shape.begin(), spec.image_shape.end());
  return reshape(out, s);
}

// ---------------------------------------------------------------- model profiles

/// 3x64x64 input, five stride-2 3x3 convs (32 -> 256 kernels) and a dense posterior head;
/// decoder is one conv followed by six stride-2 4x4 transposed convs (256 -> channels).
inline ModelSpec paper_model_spec(std::size_t latent_dim = 20, std::size_t channels = 3) {
  using A = Activation;
  ModelSpec s;
  s.name = "paper_conv64";
  s.latent_dim = latent_dim;
  s.image_shape = {channels, 64, 64};
  s.encoder_layers = {
      LayerSpec::conv(32, 3, 2, 1, A::relu),  LayerSpec::conv(64, 3, 2, 1, A::relu),
      LayerSpec::conv(64, 3, 2, 1, A::relu),  LayerSpec::conv(128, 3, 2, 1, A::relu),
      LayerSpec::conv(256, 3, 2, 1, A::relu), LayerSpec::flatten(),
      LayerSpec::dense(2 * latent_dim, A::none),
  };
  s.decoder_layers = {
      LayerSpec::reshape({latent_dim, 1, 1}),
      LayerSpec::conv(256, 1, 1, 0, A::relu),
      LayerSpec::deconv(256, 4, 2, 1, A::relu),
      LayerSpec::deconv(128, 4, 2, 1, A::relu),
      LayerSpec::deconv(128, 4, 2, 1, A::relu),
      LayerSpec::deconv(64, 4, 2, 1, A::relu),
      LayerSpec::deconv(32, 4, 2, 1, A::relu),
      LayerSpec::deconv(channels, 4, 2, 1, A::sigmoid),
  };
  return s;
}

/// Desk-scale convolutional profile for 1x32x32 images.
inline ModelSpec shapes5_model_spec(std::size_t latent_dim = 8, std::size_t condition_dim = 0) {
  using A = Activation;
  ModelSpec s;
  s.name = "shapes5_conv";
  s.latent_dim = latent_dim;
  s.condition_dim = condition_dim;
  s.image_shape = {1, 32, 32};
  s.encoder_layers = {
      LayerSpec::conv(16, 4, 2, 1, A::relu), LayerSpec::conv(32, 4, 2, 1, A::relu),
      LayerSpec::conv(32, 4, 2, 1, A::relu), LayerSpec::flatten(),
      LayerSpec::dense(128, A::relu),        LayerSpec::dense(2 * latent_dim, A::none),
  };
  s.decoder_layers = {
      LayerSpec::dense(128, A::relu),         LayerSpec::dense(512, A::relu),
      LayerSpec::reshape({32, 4, 4}),         LayerSpec::deconv(32, 4, 2, 1, A::relu),
      LayerSpec::deconv(16, 4, 2, 1, A::relu), LayerSpec::deconv(1, 4, 2, 1, A::sigmoid),
  };
  return s;
}

/// Fully connected encoder/decoder; used for quick tests.
inline ModelSpec dense_model_spec(Shape image_shape, std::size_t latent_dim, std::size_t hidden = 32,
                                  std::size_t condition_dim = 0) {
  using A = Activation;
  ModelSpec s;
  s.name = "dense";
  s.latent_dim = latent_dim;
  s.image_shape = image_shape;
  s.condition_dim = condition_dim;
  s.encoder_layers = {LayerSpec::flatten(), LayerSpec::dense(hidden, A::relu), LayerSpec::dense(2 * latent_dim, A::none)};
  s.decoder_layers = {LayerSpec::dense(hidden, A::relu), LayerSpec::dense(numel(image_shape), A::sigmoid),
                      LayerSpec::reshape(image_shape)};
  return s;
}

inline ModelSpec model_profile(const std::string& name, std::size_t latent_dim, std::size_t condition_dim = 0) {
  if (name == "shapes5_conv") return shapes5_model_spec(latent_dim, condition_dim);
  if (name == "paper_conv64") {
    auto s = paper_model_spec(latent_dim);
    if (condition_dim > 0) {
      s.condition_dim = condition_dim;
      s.decoder_layers[0] = LayerSpec::reshape({latent_dim + condition_dim, 1, 1});
    }
    return s;
  }
  if (name == "shapes5_dense") return dense_model_spec({1, 32, 32}, latent_dim, 256, condition_dim);
  throw ConfigError("unknown model profile '" + name + "' (valid: shapes5_conv, shapes5_dense, paper_conv64)");
}

/// Multi-layer perceptron used by discriminators and attribute classifiers.
inline Sequential make_mlp(const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t layers,
                           std::size_t out, Activation act, std::mt19937_64& rng) {
  std::vector<LayerSpec> specs;
  for (std::size_t i = 0; i < layers; ++i) specs.push_back(LayerSpec::dense(hidden, act));
  specs.push_back(LayerSpec::dense(out, Activation::none));
  return Sequential(prefix, specs, Shape{in}, rng);
}

}  // namespace disent
