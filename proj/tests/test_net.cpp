#include <cmath>

#include <doctest.h>

#include "bwnh/dataset.hpp"
#include "bwnh/pipeline.hpp"
#include "bwnh/net.hpp"
#include "helpers.hpp"

using namespace bwnh;

namespace {

Model one_by_one_conv(float weight) {
  ModelManifest m;
  m.name = "unit";
  m.input_shape = {1, 2, 2};
  m.tensor_dir = ".";
  LayerSpec conv;
  conv.kind = LayerKind::Conv;
  conv.name = "conv";
  conv.in_channels = conv.out_channels = 1;
  conv.kernel_h = conv.kernel_w = 1;
  conv.weight_ref = "conv.weight.tensor";
  LayerSpec relu;
  relu.name = "relu";
  m.layers = {conv, relu};
  Model model{m, {}};
  model.tensors.emplace("conv.weight.tensor", Tensor({1, 1, 1, 1}, std::vector<float>{weight}));
  return model;
}

Model small_trained(std::uint64_t seed, const Dataset& data, int iters = 80) {
  const auto& d = data.images.dims();
  const auto m = parse_architecture("(1x4C3)-MP2-(1x8C3)-MP2-10FC-Softmax", "small", {d[1], d[2], d[3]});
  TrainConfig cfg;
  cfg.max_iters = iters;
  cfg.seed = seed;
  return train_baseline(initialize_model(m, seed), data, cfg);
}

double max_abs_diff(const FeatureMap& a, const FeatureMap& b) {
  REQUIRE(a.values.size() == b.values.size());
  double worst = 0.0;
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    worst = std::max(worst, std::abs(a.values[k] - b.values[k]));
  }
  return worst;
}

}  // namespace

TEST_CASE("zero input through Conv and ReLU stays zero") {
  const auto r = forward(one_by_one_conv(-1.7f), Tensor::zeros({2, 1, 2, 2}), ExecutionMode::Float);
  for (double v : r.logits.values) CHECK(v == 0.0);
}

TEST_CASE("1x1 conv with weight 2 maps 3 to 6") {
  const Tensor x({1, 1, 2, 2}, std::vector<float>{3, 3, 3, 3});
  const auto r = forward(one_by_one_conv(2.0f), x, ExecutionMode::Float);
  for (double v : r.logits.values) CHECK(v == 6.0);
}

TEST_CASE("Binary mode needs every weight layer binarized") {
  CHECK_THROWS_AS(forward(one_by_one_conv(2.0f), Tensor::zeros({1, 1, 2, 2}), ExecutionMode::Binary),
                  ModeError);
}

TEST_CASE("uniform logits score chance on a balanced set") {
  const Dataset data = make_synthetic_digits(200, 5);
  const auto& d = data.images.dims();
  Model model = initialize_model(parse_architecture("10FC-Softmax", "flat", {d[1], d[2], d[3]}), 1);
  for (auto& [ref, t] : model.tensors) {
    if (ref.find("weight") != std::string::npos) t = Tensor::zeros(t.dims());
  }
  const auto r = evaluate(model, data, ExecutionMode::Float);
  CHECK(r.top1 == doctest::Approx(0.1).epsilon(0.5));
  CHECK(r.loss == doctest::Approx(std::log(10.0)));
}

TEST_CASE("a single sample is memorised") {
  const Dataset one = make_synthetic_digits(1, 9);
  const auto& d = one.images.dims();
  const auto m = parse_architecture("(1x4C3)-MP2-10FC-Softmax", "mem", {d[1], d[2], d[3]});
  TrainConfig cfg;
  cfg.max_iters = 500;
  cfg.batch_size = 1;
  TrainReport report;
  const Model trained = train_baseline(initialize_model(m, 4), one, cfg, &report);
  CHECK(report.losses.back() < 0.01);
  CHECK(evaluate(trained, one, ExecutionMode::Float).top1 == 1.0);
}

TEST_CASE("training") {
  const Dataset data = make_synthetic_digits(300, 13);
  const auto& d = data.images.dims();
  const auto m = parse_architecture("(1x4C3)-MP2-10FC-Softmax", "t", {d[1], d[2], d[3]});
  const Model init = initialize_model(m, 8);

  SUBCASE("zero learning rate leaves weights and affine parameters alone") {
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.max_iters = 5;
    const Model out = train_baseline(init, data, cfg);
    CHECK(out.tensor("conv1.weight.tensor").bit_equal(init.tensor("conv1.weight.tensor")));
    CHECK(out.tensor("fc1.weight.tensor").bit_equal(init.tensor("fc1.weight.tensor")));
    const auto p0 = init.tensor("bn1.params.tensor").f32();
    const auto p1 = out.tensor("bn1.params.tensor").f32();
    for (std::size_t i = 0; i < 8; ++i) CHECK(p0[i] == p1[i]);  // gamma, beta rows
  }

  SUBCASE("same seed, same weights; loss goes down") {
    TrainConfig cfg;
    cfg.max_iters = 60;
    TrainReport r1;
    const Model a = train_baseline(init, data, cfg, &r1);
    const Model b = train_baseline(init, data, cfg);
    for (const auto& [ref, t] : a.tensors) CHECK(b.tensor(ref).bit_equal(t));
    CHECK(r1.losses.back() < r1.losses.front());
  }

  SUBCASE("divergence aborts with the loss history") {
    TrainConfig cfg;
    cfg.lr = 1e12;
    cfg.max_iters = 50;
    try {
      train_baseline(init, data, cfg);
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK(e.losses().size() == static_cast<std::size_t>(e.iteration() + 1));
    }
  }
}

TEST_CASE("analytic gradients match central differences") {
  for (auto kind : {LayerKind::Conv, LayerKind::FullyConnected, LayerKind::BatchNorm,
                    LayerKind::ReLU, LayerKind::MaxPool, LayerKind::Softmax}) {
    CAPTURE(to_string(kind));
    CHECK(grad_check(kind, 1e-3) < 1e-4);
  }
  CHECK(grad_check(LayerKind::FullyConnected, 1e-3) < 1e-9);
}

TEST_CASE("binarized networks") {
  const Dataset data = make_synthetic_digits(300, 17);
  const Model model = small_trained(3, data);
  const Model bin = binarize_model(model, data, BinarizeConfig{}).target;
  const Tensor batch = sample_batch(data, 32, 1);

  SUBCASE("add/sub execution equals dense alpha*B execution") {
    const auto binary = forward(bin, batch, ExecutionMode::Binary);
    const auto dense = forward(densify(bin), batch, ExecutionMode::Float);
    for (std::size_t l = 0; l < binary.outputs.size(); ++l) {
      CHECK(max_abs_diff(binary.outputs[l], dense.outputs[l]) < 1e-5);
    }
  }

  SUBCASE("folding scales into BatchNorm keeps the outputs") {
    const auto before = forward(bin, batch, ExecutionMode::Binary);
    const Model merged = merge_scale_into_batchnorm(bin);
    const auto after = forward(merged, batch, ExecutionMode::Binary);
    CHECK(max_abs_diff(before.logits, after.logits) < 1e-5);
    for (std::size_t l = 0; l < merged.manifest.layers.size(); ++l) {
      if (merged.manifest.layers[l].binarized) CHECK(scale_vector(merged, l).isOnes());
    }
  }

  SUBCASE("unfolded inputs times weights reproduce the layer output") {
    const auto r = forward(model, batch, ExecutionMode::Float);
    const auto& layers = model.manifest.layers;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].kind != LayerKind::Conv) continue;
      const Eigen::MatrixXd pre = extract_layer_inputs(model, batch, l).transpose() * weight_matrix(model, l);
      // pre is (n*oh*ow) x N; the forward output is (n, N, oh, ow).
      const auto& out = r.outputs[l];
      const std::size_t n = out.dims[0], ch = out.dims[1], sp = out.dims[2] * out.dims[3];
      double worst = 0.0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t c = 0; c < ch; ++c)
          for (std::size_t p = 0; p < sp; ++p)
            worst = std::max(worst, std::abs(pre(static_cast<Eigen::Index>(s * sp + p),
                                                 static_cast<Eigen::Index>(c)) -
                                             out.values[(s * ch + c) * sp + p]));
      CHECK(worst < 1e-5);
    }
  }

  SUBCASE("fine-tuning with zero learning rate changes nothing") {
    FinetuneConfig cfg;
    cfg.train.lr = 0.0;
    cfg.train.max_iters = 5;
    const Model out = finetune(bin, data, cfg);
    for (const auto& [ref, t] : bin.tensors) {
      if (out.tensors.count(ref)) CHECK(out.tensor(ref).bit_equal(t));
    }
    CHECK(out.manifest.layers == bin.manifest.layers);
  }

  SUBCASE("codes stay binary and fixed-codes mode keeps them") {
    FinetuneConfig cfg;
    cfg.train.max_iters = 20;
    const Model ste = finetune(bin, data, cfg);
    cfg.mode = FinetuneMode::FixedCodes;
    const Model fixed = finetune(bin, data, cfg);
    for (std::size_t l = 0; l < bin.manifest.layers.size(); ++l) {
      if (!bin.manifest.layers[l].binarized) continue;
      const Eigen::MatrixXd b = code_matrix(ste, l);
      CHECK((b.array().abs() == 1.0).all());
      CHECK(code_matrix(fixed, l) == code_matrix(bin, l));
    }
  }

  SUBCASE("fine-tuning needs binarized layers") {
    CHECK_THROWS_AS(finetune(model, data, FinetuneConfig{}), std::invalid_argument);
  }
}

TEST_CASE("evaluation rejects an empty dataset") {
  Dataset empty{Tensor::zeros({1, 1, 2, 2}), {}};
  CHECK_THROWS(evaluate(one_by_one_conv(1.0f), empty, ExecutionMode::Float));
}
