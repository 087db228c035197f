// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "fpcc/errors.hpp"
#include "fpcc/network.hpp"

using namespace fpcc;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(shape_size(s));
  for (auto& v : d) v = u(rng);
  return Tensor(std::move(s), std::move(d));
}

ForwardRecord run_forward(Tape& tape, const NetworkSpec& net, const Params& params,
                          const Tensor& x, const TrainHooks& hooks = {},
                          const std::vector<std::string>& sites = {}) {
  auto pv = bind_params(tape, params, false);
  return forward(net, pv, tape.constant(x), hooks, sites);
}

}  // namespace

TEST(NetworkSpec, DeskArchitecturesValidate) {
  auto cnn = NetworkSpec::desk_cnn();
  cnn.validate();
  EXPECT_EQ(cnn.hook_sites(), (std::vector<std::string>{"block1", "block2", "fc1"}));
  EXPECT_EQ(cnn.feature_dim("block1"), 16u);
  EXPECT_EQ(cnn.feature_dim("block2"), 32u);
  EXPECT_EQ(cnn.feature_dim("fc1"), 128u);
  EXPECT_EQ(cnn.layer_shapes().back(), (Shape{10}));
  auto mlp = NetworkSpec::desk_mlp();
  mlp.validate();
  EXPECT_EQ(mlp.hook_sites(), (std::vector<std::string>{"h1", "h2", "h3"}));
  EXPECT_EQ(mlp.feature_dim("h3"), 64u);
  EXPECT_THROW(cnn.hook_layer("nope"), ConfigError);
}

TEST(NetworkSpec, RejectsBrokenSpecs) {
  auto dup = NetworkSpec::desk_mlp();
  dup.layers[2].hook = "h2";
  EXPECT_THROW(dup.validate(), ConfigError);
  auto wrong_k = NetworkSpec::desk_mlp(10);
  wrong_k.classes = 7;
  EXPECT_THROW(wrong_k.validate(), ConfigError);
  NetworkSpec odd{{LayerSpec::conv(4, 3), LayerSpec::avgpool2(), LayerSpec::flatten(),
                   LayerSpec::dense(10)},
                  {1, 9, 9},
                  10};
  EXPECT_THROW(odd.validate(), DimensionError);
}

TEST(SpatialMean, ConstantOneHotAndLoopOracle) {
  Tape tape;
  EXPECT_EQ(spatial_mean(tape.constant(Tensor({2, 3, 2, 2}, 0.4))).value(), Tensor({2, 3}, 0.4));
  Tensor one({1, 2, 2, 2});
  one[5] = 1.0;
  EXPECT_EQ(spatial_mean(tape.constant(one)).value(), Tensor({1, 2}, {0.0, 0.25}));
  auto x = random_tensor({2, 3, 4, 5}, 1);
  auto got = spatial_mean(tape.constant(x)).value();
  for (std::size_t bc = 0; bc < 6; ++bc) {
    double s = 0.0;
    for (std::size_t i = 0; i < 20; ++i) s += x[bc * 20 + i];
    EXPECT_NEAR(got[bc], s / 20.0, 1e-15);
  }
  EXPECT_THROW(spatial_mean(tape.constant(Tensor({2, 3}))), DimensionError);
}

TEST(InitParams, DeterministicAndFanInScaled) {
  const auto net = NetworkSpec::desk_cnn();
  EXPECT_EQ(init_params(net, 3), init_params(net, 3));
  EXPECT_NE(init_params(net, 3), init_params(net, 4));
  NetworkSpec dense{{LayerSpec::dense(50), LayerSpec::relu(), LayerSpec::dense(2)}, {100}, 2};
  double sq = 0.0;
  std::size_t n = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = init_params(dense, seed);
    ASSERT_EQ(p.tensors[0].shape(), (Shape{100, 50}));
    for (double v : p.tensors[0].data()) sq += v * v, ++n;
    for (double v : p.tensors[1].data()) EXPECT_EQ(v, 0.0);
  }
  EXPECT_NEAR(sq / static_cast<double>(n), 0.02, 0.2 * 0.02);
}

TEST(Forward, EvalModeShapeAndFiniteness) {
  const auto net = NetworkSpec::desk_cnn();
  const auto params = init_params(net, 0);
  Tape tape;
  auto rec = run_forward(tape, net, params, Tensor({3, 1, 28, 28}));
  EXPECT_EQ(rec.logits.shape(), (Shape{3, 10}));
  EXPECT_TRUE(rec.logits.value().all_finite());
  EXPECT_TRUE(rec.features.empty());
  auto r2 = run_forward(tape, net, params, random_tensor({2, 1, 28, 28}, 2));
  EXPECT_TRUE(r2.logits.value().all_finite());
  EXPECT_THROW(run_forward(tape, net, params, Tensor({2, 1, 27, 28})), DimensionError);
}

TEST(Forward, ZeroGammaMasksMatchEvalBitExactly) {
  const auto net = NetworkSpec::desk_cnn();
  const auto params = init_params(net, 1);
  const auto x = random_tensor({4, 1, 28, 28}, 3);
  const auto plan = InsertionPlan::at_sites(net.hook_sites());
  Rng rng(5);
  Tape t1, t2;
  auto eval = run_forward(t1, net, params, x, {}, net.hook_sites());
  auto train = run_forward(t2, net, params, x, {&plan, 0.0, MaskKind::select, &rng});
  EXPECT_EQ(eval.logits.value(), train.logits.value());
  for (const auto& s : net.hook_sites())
    EXPECT_EQ(eval.features.at(s).value(), train.features.at(s).value());
}

TEST(Forward, SeededMasksReplayIdentically) {
  const auto net = NetworkSpec::desk_cnn();
  const auto params = init_params(net, 1);
  const auto x = random_tensor({4, 1, 28, 28}, 4);
  const auto plan = InsertionPlan::at_sites({"block2", "fc1"});
  auto once = [&] {
    Rng rng(9);
    Tape tape;
    auto rec = run_forward(tape, net, params, x, {&plan, 0.2, MaskKind::select, &rng});
    return std::pair{rec.logits.value(), rec.features.at("fc1").value()};
  };
  EXPECT_EQ(once(), once());
  Rng rng(9);
  Tape tape;
  auto eval = run_forward(tape, net, params, x);
  auto masked = run_forward(tape, net, params, x, {&plan, 0.2, MaskKind::select, &rng});
  EXPECT_NE(eval.logits.value(), masked.logits.value());
  EXPECT_EQ(masked.features.size(), 2u);
}

TEST(Forward, PlanErrors) {
  const auto net = NetworkSpec::desk_cnn();
  const auto params = init_params(net, 1);
  const Tensor x({1, 1, 28, 28});
  Rng rng(1);
  Tape tape;
  InsertionPlan unknown = InsertionPlan::at_sites({"nowhere"});
  EXPECT_THROW(run_forward(tape, net, params, x, {&unknown, 0.2, MaskKind::select, &rng}),
               ConfigError);
  InsertionPlan dup = InsertionPlan::at_sites({"fc1", "fc1"});
  EXPECT_THROW(run_forward(tape, net, params, x, {&dup, 0.2, MaskKind::select, &rng}), ConfigError);
  InsertionPlan deep{{{"block1", 2, std::nullopt}}};
  EXPECT_THROW(run_forward(tape, net, params, x, {&deep, 0.2, MaskKind::select, &rng}), ConfigError);
  InsertionPlan ok = InsertionPlan::at_sites({"fc1"});
  EXPECT_THROW(run_forward(tape, net, params, x, {&ok, 0.2, MaskKind::select, nullptr}), ConfigError);
  EXPECT_THROW(run_forward(tape, net, params, x, {}, {"nowhere"}), ConfigError);
}

TEST(Forward, ConvSiteFeaturesEqualSpatialMeanOfBlockOutput) {
  const auto net = NetworkSpec::desk_cnn();
  const auto params = init_params(net, 2);
  const auto x = random_tensor({2, 1, 28, 28}, 6);
  Tape tape;
  auto rec = run_forward(tape, net, params, x, {}, {"block1", "block2"});
  auto pv = bind_params(tape, params, false);
  auto b1 = avgpool2(relu(add_channel_bias(conv2d(tape.constant(x), pv[0]), pv[1])));
  auto b2 = avgpool2(relu(add_channel_bias(conv2d(b1, pv[2]), pv[3])));
  EXPECT_EQ(rec.features.at("block1").value(), spatial_mean(b1).value());
  EXPECT_EQ(rec.features.at("block2").value(), spatial_mean(b2).value());
}

TEST(Forward, MaskGranularityPerChannelForMapsPerElementOtherwise) {
  // The CFS location of site "f" is the 3-channel input of the second conv.
  NetworkSpec net{{LayerSpec::conv(3, 1), LayerSpec::relu(), LayerSpec::conv(1, 1),
                   LayerSpec::flatten("f"), LayerSpec::dense(2)},
                  {1, 2, 2},
                  2};
  net.validate();
  Params p = init_params(net, 0);
  p.tensors[0] = Tensor({3, 1, 1, 1}, {1, 1, 1});
  p.tensors[1] = Tensor({3}, {1, 1, 1});
  p.tensors[2] = Tensor({1, 3, 1, 1}, {1, 1, 1});
  const auto plan = InsertionPlan::at_sites({"f"});
  Rng rng(11);
  Tape tape;
  auto pv = bind_params(tape, p, false);
  auto rec = forward(net, pv, tape.constant(Tensor({64, 1, 2, 2}, 0.5)),
                     {&plan, 0.5, MaskKind::select, &rng});
  const auto f = rec.features.at("f").value();
  ASSERT_EQ(f.shape(), (Shape{64, 4}));
  std::set<double> kept;
  for (std::size_t b = 0; b < 64; ++b) {
    for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(f[b * 4 + i], f[b * 4]);
    kept.insert(f[b * 4] / 1.5);
  }
  EXPECT_GT(kept.size(), 2u);
  for (double k : kept) EXPECT_EQ(k, std::round(k));

  // Single-channel image input: element-wise masks.
  NetworkSpec flat{{LayerSpec::conv(1, 1), LayerSpec::flatten("c"), LayerSpec::dense(2)},
                   {1, 4, 4},
                   2};
  Params q = init_params(flat, 0);
  q.tensors[0] = Tensor({1, 1, 1, 1}, {1.0});
  const auto plan2 = InsertionPlan::at_sites({"c"});
  auto qv = bind_params(tape, q, false);
  auto out = forward(flat, qv, tape.constant(Tensor({1, 1, 4, 4}, 1.0)),
                     {&plan2, 0.5, MaskKind::select, &rng});
  const auto c = out.features.at("c").value();
  std::set<double> values(c.data().begin(), c.data().end());
  EXPECT_EQ(values, (std::set<double>{0.0, 1.0}));
}

TEST(InputGradient, MatchesFiniteDifferencesOnDeskMlp) {
  const auto net = NetworkSpec::desk_mlp();
  const auto params = init_params(net, 4);
  const auto x = random_tensor({3, 1, 28, 28}, 7);
  const std::vector<std::size_t> y = {1, 7, 3};
  std::vector<std::size_t> coords;
  for (std::size_t i = 0; i < 20; ++i) coords.push_back(i * 117 % x.size());
  auto rep = grad_check(
      [&](Tape& t, const Var& in) {
        auto pv = bind_params(t, params, false);
        return softmax_cross_entropy(forward(net, pv, in).logits, y).loss;
      },
      x, 1e-5, coords);
  EXPECT_LT(rep.max_rel_error_smooth, 1e-4);
  auto g = input_gradient(net, params, x, y);
  for (std::size_t i = 0; i < coords.size(); ++i)
    EXPECT_NEAR(g.gradient[coords[i]], rep.analytic[i], 1e-15);
}

TEST(Utilities, SliceArgmaxAndChunkedPrediction) {
  const auto net = NetworkSpec::desk_mlp();
  const auto params = init_params(net, 5);
  const auto x = random_tensor({7, 1, 28, 28}, 8);
  const auto a = predict_logits(net, params, x, 3), b = predict_logits(net, params, x, 100);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  EXPECT_EQ(predict_logits(net, params, x, 3), a);
  EXPECT_EQ(slice_rows(x, 2, 4).shape(), (Shape{2, 1, 28, 28}));
  EXPECT_THROW(slice_rows(x, 4, 4), DimensionError);
  EXPECT_EQ(argmax_rows(Tensor({2, 3}, {0, 5, 1, 9, 2, 9})), (std::vector<std::size_t>{1, 0}));
}
