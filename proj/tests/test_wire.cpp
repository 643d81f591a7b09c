#include <random>

#include <gtest/gtest.h>

#include "fedoptima/wire.hpp"
#include "helpers.hpp"

using namespace fedoptima;
using namespace testing_helpers;

namespace {

ParameterSet random_params(std::mt19937_64& rng) {
  ParameterSet p;
  const std::size_t n = rng() % 4;
  for (std::size_t i = 0; i < n; ++i) {
    Shape s;
    const std::size_t rank = 1 + rng() % 3;
    for (std::size_t r = 0; r < rank; ++r) s.push_back(1 + rng() % 4);
    p.tensors.push_back(random_tensor(s, rng));
  }
  return p;
}

ModelUpdate random_update(std::mt19937_64& rng) {
  ModelUpdate u{random_params(rng), random_params(rng), rng() % 1000};
  u.device_params.version = u.aux_params.version = u.version;
  return u;
}

Message random_message(std::mt19937_64& rng) {
  switch (rng() % 5) {
    case 0: {
      ActivationBatch b;
      const std::size_t rows = 1 + rng() % 5;
      b.features = random_tensor({rows, 1 + rng() % 6}, rng);
      b.labels = random_labels(rows, 4, rng);
      b.origin = static_cast<DeviceId>(1 + rng() % 50);
      b.sequence = rng();
      return Message::activation(std::move(b));
    }
    case 1: return Message::model_upload(static_cast<DeviceId>(1 + rng() % 50), random_update(rng));
    case 2: return Message::global_model(random_update(rng));
    case 3: return Message::turn_on();
    default: return Message::stop();
  }
}

}  // namespace

TEST(Wire, StopFrameIsSeventeenBytes) {
  const auto frame = encode(Message::stop());
  ASSERT_EQ(frame.size(), 17U);
  EXPECT_EQ(std::string(frame.begin(), frame.begin() + 4), "FO01");
  EXPECT_EQ(frame[4], 5);
  for (std::size_t i = 5; i < 17; ++i) EXPECT_EQ(frame[i], 0) << i;
}

TEST(Wire, RoundTripsRandomMessages) {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 1000; ++i) {
    const auto msg = random_message(rng);
    const auto frame = encode(msg);
    EXPECT_EQ(frame_length(frame).value(), frame.size());
    EXPECT_EQ(decode(frame), msg);
  }
}

TEST(Wire, ModelWithEmptyAuxRoundTrips) {
  ParameterSet device;
  device.tensors.push_back(Tensor::from({2}, {1, 2}));
  device.version = 7;
  ParameterSet aux;
  aux.version = 7;
  const auto msg = Message::model_upload(3, {device, aux, 7});
  EXPECT_EQ(decode(encode(msg)), msg);
}

TEST(Wire, RejectsBadFrames) {
  auto frame = encode(Message::turn_on());
  frame[0] = 'X';
  EXPECT_THROW(decode(frame), WireError);

  auto act = encode(Message::activation({Tensor::from({1, 2}, {1, 2}), {0}, 1, 0}));
  act.pop_back();
  EXPECT_THROW(decode(act), WireError);

  auto kind = encode(Message::stop());
  kind[4] = 99;
  EXPECT_THROW(decode(kind), WireError);

  const auto big = encode(Message::activation({Tensor::zeros({4, 100}), {0, 0, 0, 0}, 1, 0}));
  EXPECT_THROW(decode(big, 100), WireError);
  EXPECT_THROW(encode(Message::activation({Tensor::zeros({4, 100}), {0, 0, 0, 0}, 1, 0}), 100), WireError);
}

TEST(Wire, LabelCountMustMatchRows) {
  EXPECT_THROW(encode(Message::activation({Tensor::zeros({2, 3}), {0}, 1, 0})), WireError);
}

TEST(Wire, FrameLengthWaitsForHeader) {
  const auto frame = encode(Message::turn_on());
  EXPECT_FALSE(frame_length(std::span(frame).first(10)).has_value());
  EXPECT_EQ(frame_length(frame).value(), 17U);
}
