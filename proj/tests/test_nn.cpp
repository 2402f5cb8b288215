#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "disent/nn.hpp"
#include "disent/optim.hpp"
#include "support/gradcheck.hpp"

using namespace disent;
using disent::testing::gradcheck;
using disent::testing::random_tensor;

namespace {

std::vector<double> flat_params(const Network& net) {
  std::vector<double> out;
  for (const auto& p : net.parameters()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

ModelSpec tiny_conv_spec() {
  using A = Activation;
  ModelSpec s;
  s.latent_dim = 2;
  s.image_shape = {1, 6, 6};
  s.encoder_layers = {LayerSpec::conv(2, 3, 2, 1, A::tanh), LayerSpec::flatten(), LayerSpec::dense(4, A::none)};
  s.decoder_layers = {LayerSpec::dense(8, A::tanh), LayerSpec::reshape({2, 2, 2}), LayerSpec::deconv(1, 4, 2, 0, A::sigmoid)};
  return s;
}

}  // namespace

TEST(ModelSpec, PaperProfileBuildsWithExpectedHeads) {
  Network net(paper_model_spec(20), 0);
  const auto& enc = net.encoder().layers();
  std::size_t convs = 0, deconvs = 0;
  for (const auto& l : enc) convs += l.spec.kind == LayerKind::conv;
  for (const auto& l : net.decoder().layers()) deconvs += l.spec.kind == LayerKind::deconv;
  EXPECT_EQ(convs, 5u);
  EXPECT_EQ(deconvs, 6u);
  EXPECT_EQ(enc.front().out_shape, (Shape{32, 32, 32}));
  EXPECT_EQ(enc[4].out_shape, (Shape{256, 2, 2}));
  EXPECT_EQ(net.encoder().output_shape(), (Shape{40}));
  EXPECT_EQ(net.decoder().output_shape(), (Shape{3, 64, 64}));
}

TEST(ModelSpec, PaperProfilePosteriorShapes) {
  Network net(paper_model_spec(20), 0);
  NoGradGuard guard;
  auto post = forward_encode(net, Tensor({64, 3, 64, 64}, 0.5));
  EXPECT_EQ(post.mu.shape(), (Shape{64, 20}));
  EXPECT_EQ(post.logvar.shape(), (Shape{64, 20}));
}

TEST(ModelSpec, DenseRoundTripShapes) {
  Network net(dense_model_spec({1, 8, 8}, 2), 4);
  std::mt19937_64 rng(1);
  for (std::size_t b : {1u, 3u, 7u}) {
    auto post = forward_encode(net, random_tensor({b, 1, 8, 8}, rng, 0, 1));
    EXPECT_EQ(post.mu.shape(), (Shape{b, 2}));
    EXPECT_EQ(forward_decode(net, post.mu).shape(), (Shape{b, 1, 8, 8}));
  }
}

TEST(ModelSpec, FirstInconsistentLayerIsNamed) {
  auto spec = dense_model_spec({1, 8, 8}, 2);
  spec.encoder_layers.erase(spec.encoder_layers.begin());  // dense on (1,8,8) without flatten
  try {
    Network net(spec, 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.0"), std::string::npos) << e.what();
  }
  auto bad_dec = dense_model_spec({1, 8, 8}, 2);
  bad_dec.decoder_layers.back() = LayerSpec::reshape({1, 4, 16});
  EXPECT_THROW(Network(bad_dec, 0), ShapeError);
}

TEST(ModelSpec, JsonRoundTrip) {
  const auto spec = shapes5_model_spec(8, 3);
  const nlohmann::json j = spec;
  EXPECT_EQ(j.get<ModelSpec>(), spec);
}

TEST(ModelSpec, UnknownProfileIsConfigError) { EXPECT_THROW(model_profile("resnet", 8), ConfigError); }

TEST(BuildModel, DeterministicUnderSeed) {
  EXPECT_EQ(flat_params(build_model(shapes5_model_spec(), 7)), flat_params(build_model(shapes5_model_spec(), 7)));
  EXPECT_NE(flat_params(build_model(shapes5_model_spec(), 7)), flat_params(build_model(shapes5_model_spec(), 8)));
}

TEST(BuildModel, KaimingUniformBoundsAndZeroBias) {
  Network net(shapes5_model_spec(), 3);
  for (const auto& l : net.encoder().layers()) {
    if (!l.weight.defined()) continue;
    const double fan_in = static_cast<double>(l.weight.numel() / l.weight.size(0));
    const double bound = std::sqrt(6.0 / fan_in);
    double max_abs = 0.0;
    for (double w : l.weight.data()) max_abs = std::max(max_abs, std::abs(w));
    EXPECT_LE(max_abs, bound) << l.name;
    EXPECT_GT(max_abs, 0.8 * bound) << l.name;
    for (double b : l.bias.data()) EXPECT_EQ(b, 0.0);
  }
}

TEST(BuildModel, ParameterNamesAreLayerPaths) {
  Network net(dense_model_spec({1, 8, 8}, 2), 0);
  auto params = net.parameters();
  ASSERT_FALSE(params.empty());
  EXPECT_EQ(params[0].name, "encoder.1.weight");
  EXPECT_EQ(params[1].name, "encoder.1.bias");
  EXPECT_EQ(params.back().name, "decoder.1.bias");
}

TEST(ForwardEncode, ZeroHeadGivesStandardPosterior) {
  Network net(dense_model_spec({1, 8, 8}, 3), 0);
  for (double& w : net.encoder().layers().back().weight.mutable_data()) w = 0.0;
  std::mt19937_64 rng(2);
  auto post = forward_encode(net, random_tensor({5, 1, 8, 8}, rng, 0, 1));
  for (double v : post.mu.data()) EXPECT_EQ(v, 0.0);
  for (double v : post.logvar.data()) EXPECT_EQ(v, 0.0);
}

TEST(ForwardEncode, ConditionalNetRequiresCondition) {
  Network net(dense_model_spec({1, 8, 8}, 2, 16, 3), 0);
  Tensor x({2, 1, 8, 8}, 0.5);
  EXPECT_THROW(forward_encode(net, x), ShapeError);
  Tensor cond({2, 3}, {1, 0, 0, 0, 0, 1});
  auto post = forward_encode(net, x, &cond);
  EXPECT_EQ(post.mu.shape(), (Shape{2, 2}));
  EXPECT_THROW(forward_decode(net, post.mu), ShapeError);
  EXPECT_EQ(forward_decode(net, post.mu, &cond).shape(), (Shape{2, 1, 8, 8}));
}

TEST(ForwardDecode, SigmoidOutputInUnitInterval) {
  Network net(shapes5_model_spec(), 5);
  std::mt19937_64 rng(9);
  NoGradGuard guard;
  Tensor out = forward_decode(net, random_tensor({4, 8}, rng, -3, 3));
  EXPECT_EQ(out.shape(), (Shape{4, 1, 32, 32}));
  for (double v : out.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(GradCheck, EncoderJacobian) {
  Network net(tiny_conv_spec(), 11);
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({3, 1, 6, 6}, rng, 0, 1);
  Tensor r = random_tensor({3, 4}, rng);
  auto f = [&](const std::vector<Tensor>& in) {
    auto post = forward_encode(net, in[0]);
    return sum(concat({post.mu, post.logvar}, 1) * r);
  };
  auto res = gradcheck(f, {x}, 3, 40);
  EXPECT_LT(res.max_rel_err, 1e-5) << res.worst;
}

TEST(GradCheck, LayerParameters) {
  Network net(tiny_conv_spec(), 13);
  std::mt19937_64 rng(14);
  Tensor x = random_tensor({2, 1, 6, 6}, rng, 0, 1);
  Tensor z = random_tensor({2, 2}, rng);
  std::vector<Tensor> params;
  for (auto& p : net.parameters()) params.push_back(p.tensor);
  auto f = [&](const std::vector<Tensor>&) {
    auto post = forward_encode(net, x);
    Tensor rz = forward_decode(net, z);
    return sum(square(post.mu)) + sum(post.logvar * 0.3) + sum(rz * rz);
  };
  auto res = gradcheck(f, params, 5, 60);
  EXPECT_LT(res.max_rel_err, 1e-5) << res.worst;
}

TEST(GradCheck, ReluMlp) {
  std::mt19937_64 rng(15);
  Sequential mlp = make_mlp("m", 3, 5, 2, 2, Activation::leaky_relu, rng);
  Tensor x = random_tensor({4, 3}, rng);
  std::vector<Tensor> params{x};
  for (auto& p : mlp.parameters()) params.push_back(p.tensor);
  auto f = [&](const std::vector<Tensor>& in) { return sum(tanh(mlp.forward(in[0]))); };
  auto res = gradcheck(f, params, 6, 60);
  EXPECT_LT(res.max_rel_err, 1e-5) << res.worst;
}

// ---------------------------------------------------------------- Adam

namespace {

std::vector<NamedTensor> scalar_param(double value, double grad) {
  Tensor p = Tensor::parameter({1}, {value});
  p.mutable_grad()[0] = grad;
  return {{"theta", p}};
}

}  // namespace

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  auto params = scalar_param(0.0, 0.1);
  AdamState st({1e-3, 0.9, 0.999, 1e-8}, params);
  adam_step(st, params);
  const double expected = -1e-3 * 0.1 / (0.1 + 1e-8);
  EXPECT_NEAR(params[0].tensor[0], expected, 1e-15);
  EXPECT_NEAR(params[0].tensor[0], -1e-3, 1e-9);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, ZeroGradientAndZeroLrAreNoOps) {
  auto params = scalar_param(0.7, 0.0);
  AdamState st({1e-3, 0.9, 0.999, 1e-8}, params);
  adam_step(st, params);
  EXPECT_EQ(params[0].tensor[0], 0.7);

  std::mt19937_64 rng(3);
  Network net(dense_model_spec({1, 4, 4}, 2), 1);
  auto np = net.parameters();
  const auto before = flat_params(net);
  sum(square(forward_decode(net, random_tensor({3, 2}, rng)))).backward();
  AdamState zero_lr({0.0, 0.9, 0.999, 1e-8}, np);
  for (int i = 0; i < 3; ++i) adam_step(zero_lr, np);
  EXPECT_EQ(flat_params(net), before);
  EXPECT_EQ(zero_lr.t, 3u);
}

TEST(Adam, ConvergesOnQuadratic) {
  Tensor theta = Tensor::parameter({1}, {1.0});
  std::vector<NamedTensor> params{{"theta", theta}};
  AdamState st({0.05, 0.9, 0.999, 1e-8}, params);
  for (int i = 0; i < 200; ++i) {
    zero_grad(params);
    sum(square(theta)).backward();
    adam_step(st, params);
  }
  EXPECT_LT(std::abs(theta[0]), 0.05);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  auto params = scalar_param(1.0, std::nan(""));
  AdamState st({}, params);
  try {
    adam_step(st, params);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("theta"), std::string::npos);
  }
  EXPECT_EQ(params[0].tensor[0], 1.0);
  EXPECT_EQ(st.t, 0u);
}
