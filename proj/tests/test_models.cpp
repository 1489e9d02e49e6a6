#include <gtest/gtest.h>

#include "robustbench/robustbench.hpp"
#include "test_support.hpp"

using namespace robustbench;

namespace {

ModelConfig cnn_config(std::size_t filters = 64) {
  ModelConfig cfg;
  cfg.kind = ModelKind::vanilla_cnn;
  cfg.class_count = 10;
  cfg.filters = filters;
  return cfg;
}

Tensor<float> random_batch(Rng& rng, const Shape& shape) {
  Tensor<float> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform());
  return t;
}

}  // namespace

TEST(Cnn, GeometryForMnist) {
  const auto g = cnn_geometry(cnn_config());
  EXPECT_EQ(g.conv1_h, 14U);
  EXPECT_EQ(g.conv1_w, 14U);
  EXPECT_EQ(g.conv2_h, 9U);
  EXPECT_EQ(g.conv3_h, 5U);
  const auto shapes = parameter_shapes(cnn_config());
  EXPECT_EQ(shapes.at("conv1.w"), (Shape{8, 8, 1, 64}));
  EXPECT_EQ(shapes.at("conv2.w"), (Shape{6, 6, 64, 128}));
  EXPECT_EQ(shapes.at("conv3.w"), (Shape{5, 5, 128, 128}));
  EXPECT_EQ(shapes.at("out.w"), (Shape{5 * 5 * 128, 10}));
}

TEST(Cnn, ForwardShapesAndQuantizedBatchNorm) {
  auto cfg = cnn_config(4);
  Rng rng(2);
  auto params = init_params<float>(cfg, rng);
  EXPECT_EQ(params.tensors.count("conv2.bn.gamma"), 0U);
  const auto x = random_batch(rng, {3, 28, 28, 1});
  EXPECT_EQ(predict_logits(cfg, params, x).shape(), (Shape{3, 10}));

  cfg.quant.weight_bits = 1;
  cfg.quant.activation_bits = 2;
  const auto qparams = init_params<float>(cfg, rng);
  EXPECT_EQ(qparams.tensors.count("conv1.bn.gamma"), 0U);
  EXPECT_EQ(qparams.tensors.count("conv2.bn.gamma"), 1U);
  EXPECT_EQ(qparams.buffers.count("conv3.bn.var"), 1U);
  EXPECT_EQ(predict_logits(cfg, qparams, x).shape(), (Shape{3, 10}));
}

TEST(Forward, OutputWidthPerKind) {
  Rng rng(1);
  ModelConfig mlp;
  mlp.kind = ModelKind::spheres_mlp;
  mlp.input_shape = {2};
  mlp.hidden_width = 8;
  EXPECT_EQ(predict_logits(mlp, init_params<float>(mlp, rng), random_batch(rng, {5, 2})).shape(), (Shape{5, 2}));
  const auto lr = logistic_config({28, 28, 1});
  EXPECT_EQ(predict_logits(lr, init_params<float>(lr, rng), random_batch(rng, {4, 28, 28, 1})).shape(),
            (Shape{4, 1}));
}

TEST(Forward, RejectsWrongInputShape) {
  Rng rng(1);
  const auto lr = logistic_config({28, 28, 1});
  const auto params = init_params<float>(lr, rng);
  EXPECT_THROW(predict_logits(lr, params, random_batch(rng, {2, 27, 28, 1})), ShapeError);
}

TEST(Forward, ZeroParametersGiveUniformSoftmax) {
  const auto cfg = cnn_config(2);
  Rng rng(5);
  auto params = init_params<float>(cfg, rng);
  for (auto& [name, t] : params.tensors) t = Tensor<float>(t.shape());
  const auto p = class_probabilities(cfg, predict_logits(cfg, params, random_batch(rng, {2, 28, 28, 1})));
  for (float v : p.data()) EXPECT_EQ(v, 0.1F);
}

TEST(Forward, EvalIsDeterministic) {
  auto cfg = cnn_config(4);
  cfg.quant.weight_bits = 2;
  cfg.quant.activation_bits = 2;
  Rng rng(8);
  const auto params = init_params<float>(cfg, rng);
  const auto x = random_batch(rng, {7, 28, 28, 1});
  EXPECT_EQ(predict_logits(cfg, params, x), predict_logits(cfg, params, x));
}

TEST(Forward, QuantizedLayerMustExist) {
  auto cfg = cnn_config();
  cfg.quantized_layers = {"fc1"};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(ParamSetCheck, RejectsWrongShapesAndNonBinaryMasks) {
  const auto lr = logistic_config({4});
  Rng rng(3);
  auto params = init_params<float>(lr, rng);
  EXPECT_NO_THROW(check_params(lr, params));
  params.masks["linear.w"] = Tensor<float>(Shape{4, 1}, 0.5F);
  EXPECT_THROW(check_params(lr, params), std::invalid_argument);
  params.masks.clear();
  params.tensors["linear.w"] = Tensor<float>(Shape{3, 1});
  EXPECT_THROW(check_params(lr, params), ShapeError);
}

TEST(ExpertInit, IdenticalClassAveragesGiveZeroWeights) {
  Dataset d;
  d.images = Tensor<float>(Shape{4, 2, 2, 1}, std::vector<float>{0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0});
  d.labels = {kThreeLabel, kThreeLabel, kSevenLabel, kSevenLabel};
  d.class_count = 2;
  const auto p = expert_init(d);
  for (float v : p.at("linear.w").data()) EXPECT_EQ(v, 0.0F);
  EXPECT_EQ(p.at("linear.b")[0], 0.0F);
}

TEST(ExpertInit, AverageThreeHasPositiveLogit) {
  const auto dir = mnist_dir();
  if (!dir) GTEST_SKIP() << "MNIST not found; set ROBUSTBENCH_DATA";
  const auto ts = filter_three_seven(load_mnist(*dir, true));
  const auto params = expert_init(ts);
  const auto cfg = logistic_config(ts.example_shape());
  const auto three = average_class_image(ts, kThreeLabel).reshaped({1, 28, 28, 1});
  const auto seven = average_class_image(ts, kSevenLabel).reshaped({1, 28, 28, 1});
  EXPECT_GT(predict_logits(cfg, params, three)[0], 0.0F);
  EXPECT_LT(predict_logits(cfg, params, seven)[0], 0.0F);
}

TEST(KernelSparsity, Examples) {
  ParamSet<float> p;
  p.tensors["conv1.w"] = Tensor<float>(Shape{3, 3, 1, 4});
  auto spike = Tensor<float>(Shape{3, 3, 1, 4});
  spike[4 * 4 + 2] = 1.0F;  // centre tap of kernel 2
  spike[0] = 0.005F;        // below tau
  p.tensors["conv2.w"] = spike;
  p.tensors["out.w"] = Tensor<float>(Shape{4, 2});
  const auto r = kernel_sparsity_report(p);
  ASSERT_EQ(r.size(), 2U);
  EXPECT_EQ(r[0].layer, "conv1");
  EXPECT_EQ(r[0].dead_fraction, 1.0);
  EXPECT_TRUE(r[0].survivor_max.empty());
  EXPECT_EQ(r[1].dead_fraction, 0.75);
  EXPECT_EQ(r[1].survivor_max, (std::vector<double>{1.0}));
}

TEST(Checkpoint, RoundTripIsExact) {
  auto cfg = cnn_config(2);
  cfg.quant.weight_bits = 1;
  Rng rng(11);
  Checkpoint ck;
  ck.config_text = "model.kind=vanilla_cnn\n";
  ck.params = init_params<float>(cfg, rng);
  ck.params.masks["conv1.w"] = Tensor<float>(ck.params.at("conv1.w").shape(), 1.0F);
  ck.rng_state = rng.state();
  const auto bytes = encode_checkpoint(ck);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config_text, ck.config_text);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.rng_state, ck.rng_state);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, RejectsCorruption) {
  Checkpoint ck;
  ck.params.tensors["linear.w"] = Tensor<float>(Shape{2, 1}, 0.5F);
  const auto bytes = encode_checkpoint(ck);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), CheckpointError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), CheckpointError);
  auto bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(decode_checkpoint(bad_version), CheckpointError);
}
