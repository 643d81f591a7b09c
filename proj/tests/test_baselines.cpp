#include <random>

#include <gtest/gtest.h>

#include "fedoptima/baselines.hpp"
#include "fedoptima/harness.hpp"
#include "helpers.hpp"

using namespace fedoptima;
using namespace testing_helpers;

namespace {

ParameterSet constant(float v, Shape shape = {2, 3}) {
  ParameterSet p;
  Tensor t(shape);
  for (auto& x : t.data()) x = v;
  p.tensors.push_back(t);
  return p;
}

void expect_near(const ParameterSet& a, const ParameterSet& b, float tol) {
  ASSERT_TRUE(a.same_shapes(b));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a.tensors[i].size(); ++j) {
      ASSERT_NEAR(a.tensors[i][j], b.tensors[i][j], tol) << "tensor " << i << " index " << j;
    }
  }
}

}  // namespace

TEST(FedAvg, IdenticalLocalsGiveSameModel) {
  std::mt19937_64 rng(1);
  ParameterSet p;
  p.tensors.push_back(random_tensor({3, 3}, rng));
  const std::vector<std::pair<ParameterSet, std::size_t>> locals{{p, 10}, {p, 30}, {p, 7}};
  EXPECT_EQ(fedavg_round(locals).tensors, p.tensors);
}

TEST(FedAvg, EqualShardsGiveArithmeticMean) {
  const std::vector<std::pair<ParameterSet, std::size_t>> locals{{constant(0), 5}, {constant(2), 5}};
  EXPECT_EQ(fedavg_round(locals).tensors, constant(1).tensors);
}

TEST(FedAvg, WeightedMeanMatchesDirectSum) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::pair<ParameterSet, std::size_t>> locals;
    const std::size_t n = 1 + rng() % 6;
    for (std::size_t k = 0; k < n; ++k) {
      ParameterSet p;
      p.tensors.push_back(random_tensor({4}, rng));
      locals.emplace_back(p, 1 + rng() % 100);
    }
    const auto avg = fedavg_round(locals);
    for (std::size_t j = 0; j < 4; ++j) {
      double num = 0.0, den = 0.0;
      for (const auto& [p, w] : locals) {
        num += static_cast<double>(w) * p.tensors[0][j];
        den += static_cast<double>(w);
      }
      EXPECT_NEAR(avg.tensors[0][j], num / den, 1e-6);
    }
  }
}

TEST(FedAvg, RejectsEmptyOrMismatched) {
  EXPECT_THROW(fedavg_round({}), std::invalid_argument);
  const std::vector<std::pair<ParameterSet, std::size_t>> bad{{constant(0), 1}, {constant(0, {3}), 1}};
  EXPECT_THROW(fedavg_round(bad), ShapeError);
}

TEST(FedAsync, FreshUpdateReplaces) {
  auto g = constant(5);
  std::uint64_t version = 3;
  const auto r = fedasync_aggregate(g, version, constant(1), 3, 4);
  EXPECT_TRUE(r.accepted);
  EXPECT_EQ(g.tensors, constant(1).tensors);
  EXPECT_EQ(version, 4U);
}

TEST(FedAsync, TooStaleIsNoOp) {
  auto g = constant(5);
  std::uint64_t version = 9;
  EXPECT_FALSE(fedasync_aggregate(g, version, constant(1), 2, 4).accepted);
  EXPECT_EQ(g.tensors, constant(5).tensors);
  EXPECT_EQ(version, 9U);
}

TEST(FedAsync, AlphaTraceMatchesHandComputedValues) {
  // Uploads based on versions 0, 0, 1, 0, 4 with D = 2.
  auto g = constant(0);
  std::uint64_t version = 0;
  const std::vector<std::uint64_t> bases{0, 0, 1, 0, 4};
  const std::vector<float> alphas{1.0F, 0.5F, 0.5F, 0.0F, 1.0F};
  const std::vector<bool> accepted{true, true, true, false, true};
  for (std::size_t i = 0; i < bases.size(); ++i) {
    const auto r = fedasync_aggregate(g, version, constant(static_cast<float>(i + 1)), bases[i], 2);
    EXPECT_EQ(r.accepted, accepted[i]) << i;
    if (r.accepted) {
      EXPECT_FLOAT_EQ(r.alpha, alphas[i]) << i;
    }
  }
  EXPECT_EQ(version, 4U);
  EXPECT_FLOAT_EQ(g.tensors[0][0], 5.0F);
}

TEST(SplitStep, MatchesUnsplitAutograd) {
  std::mt19937_64 rng(4);
  const auto net = build_network("dense", 16, 3);
  for (auto l : net.split_eligible()) {
    const auto full = init_parameters(net, 5);
    auto [dev, srv] = split_parameters(net, full, l);
    Dataset batch;
    batch.features = random_tensor({8, 16}, rng);
    batch.labels = random_labels(8, 3, rng);
    batch.class_count = 3;
    split_step(net.slice(0, l), dev, net.slice(l, net.size()), srv, batch, 0.1F, 0.1F);

    auto ref = full;
    auto fr = forward(net, ref, batch.features, true);
    const auto loss = cross_entropy_loss(fr.output, batch.labels);
    sgd_step(ref, backward(*fr.tape, loss.grad).params, 0.1F);
    expect_near(concat_parameters(dev, srv), ref, 1e-6F);
  }
}

TEST(Centralized, FollowsSamplerOrder) {
  const auto data = gen_blobs(1, 30, 3, 16, 0.3);
  const auto net = build_network("dense", 16, 3);
  const auto init = init_parameters(net, 1);
  const auto a = centralized_sgd(net, init, data.train, 8, 0.05F, 20, 3);
  auto b = init;
  MinibatchSampler sampler(data.train, 8, 3);
  for (int i = 0; i < 20; ++i) {
    const auto batch = sampler.next();
    auto fr = forward(net, b, batch.features, true);
    sgd_step(b, backward(*fr.tape, cross_entropy_loss(fr.output, batch.labels).grad).params, 0.05F);
  }
  EXPECT_EQ(a.tensors, b.tensors);
}

namespace {

ExperimentConfig single_device(Mode mode) {
  ExperimentConfig c;
  c.mode = mode;
  c.devices = 1;
  c.server_rounds = 3;
  c.patience = 100;
  c.samples = 600;
  return c;
}

/// The same centralized run the harness would do for a single device.
ParameterSet centralized_reference(const ExperimentConfig& c, std::size_t steps) {
  const auto data = gen_blobs(derive_seed(c.seed, 1), c.samples / c.classes, c.classes, c.dim, c.spread);
  const auto net = build_network(c.network, c.dim, c.classes);
  const auto init = init_parameters(net, derive_seed(c.seed, 3));
  return centralized_sgd(net, init, data.train, c.batch_size, c.lr_device, steps, derive_seed(c.seed, 101));
}

}  // namespace

TEST(FedAvgRun, SingleDeviceEqualsCentralized) {
  const auto c = single_device(Mode::FedAvg);
  const auto r = run_experiment(c);
  ASSERT_TRUE(r.errors.empty());
  ASSERT_EQ(r.server.rounds.size(), 3U);
  const auto ref = centralized_reference(c, 3 * c.iters_per_round);
  expect_near(r.server.global.device_params, ref, 1e-6F);
}

TEST(SyncSplitRun, SingleDeviceEqualsCentralized) {
  const auto c = single_device(Mode::SyncSplit);
  const auto r = run_experiment(c);
  ASSERT_TRUE(r.errors.empty());
  ASSERT_EQ(r.server.rounds.size(), 3U);
  const auto ref = centralized_reference(c, 3 * c.iters_per_round);
  expect_near(concat_parameters(r.server.global.device_params, r.server.server_params), ref, 1e-5F);
}

TEST(SyncSplitRun, RoundTimeFollowsSlowestDevice) {
  ExperimentConfig c;
  c.mode = Mode::SyncSplit;
  c.devices = 2;
  c.speed_multipliers = {1.0, 4.0};
  c.server_rounds = 5;
  c.patience = 100;
  const auto r = run_experiment(c);
  ASSERT_TRUE(r.errors.empty());

  // One slow iteration: device forward, activation up, server step,
  // gradient down, device backward. Plus the model exchange per round.
  const auto& plan = r.plan;
  const double slow = c.device_flops / 4.0;
  const double act_bytes = static_cast<double>(
      encode(Message::activation({Tensor::zeros({c.batch_size, plan.device_spec.output_dims()[0]}),
                                  std::vector<std::uint32_t>(c.batch_size, 0), 1, 0}))
          .size());
  const double iteration = training_seconds(plan.device_spec, c.batch_size, slow) + 2.0 * act_bytes / c.bandwidth +
                           training_seconds(plan.server_spec, c.batch_size, c.server_flops);
  ModelUpdate model{init_parameters(plan.device_spec, 1), {}, 0};
  const double exchange = 2.0 * static_cast<double>(encode(Message::model_upload(1, model)).size()) / c.bandwidth;
  const double expected = static_cast<double>(c.iters_per_round) * iteration + exchange;
  for (std::size_t i = 1; i < r.metrics.round_seconds.size(); ++i) {
    EXPECT_NEAR(r.metrics.round_seconds[i], expected, 0.1 * expected) << "round " << i;
  }
}

TEST(OaflRun, CommunicationPerIterationIsActivationPlusGradient) {
  ExperimentConfig c;
  c.mode = Mode::Oafl;
  c.devices = 2;
  c.server_rounds = 3;
  c.patience = 100;
  const auto r = run_experiment(c);
  ASSERT_TRUE(r.errors.empty());
  EXPECT_EQ(r.server.server_models, c.devices + 1);

  const std::size_t width = r.plan.device_spec.output_dims()[0];
  const auto act = encode(Message::activation(
                              {Tensor::zeros({c.batch_size, width}), std::vector<std::uint32_t>(c.batch_size, 0), 1, 0}))
                       .size();
  const auto upload = encode(Message::model_upload(1, {r.server.global.device_params, {}, 0})).size();
  const auto global = encode(Message::global_model({r.server.global.device_params, {}, 0})).size();
  const auto stop = encode(Message::stop()).size();

  for (std::size_t i = 0; i < c.devices; ++i) {
    const auto id = static_cast<int>(i + 1);
    const auto& link = r.metrics.links[i];
    // The last queued activation may be dropped when STOP arrives first.
    const auto queued = r.devices[i].activations_sent;
    bool matched = false;
    for (auto sent : {queued, queued - 1}) {
      const auto uploads = link.frames_up - sent;
      if (link.up == sent * act + uploads * upload) matched = true;
    }
    EXPECT_TRUE(matched) << "device " << id << " up " << link.up << " frames " << link.frames_up;

    std::uint64_t grads = 0, replies = 0;
    for (const auto& e : r.events) {
      if (e.entity != 0) continue;
      if (e.type == "train_step" && e.data.at("origin").get<int>() == id) ++grads;
      if (e.type == "aggregate" && e.data.at("origin").get<int>() == id) ++replies;
    }
    const auto stops = link.frames_down - grads - replies;
    EXPECT_LE(stops, 1U);
    EXPECT_EQ(link.down, grads * act + replies * global + stops * stop);
  }
}
