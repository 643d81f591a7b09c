#include <set>
#include <thread>

#include <gtest/gtest.h>

#include "fedoptima/channel.hpp"
#include "fedoptima/comms.hpp"
#include "fedoptima/transport.hpp"

using namespace fedoptima;

TEST(Channel, IsFifo) {
  auto env = make_real_env();
  Channel<int> ch(*env, 4);
  ch.push(1);
  ch.push(2);
  EXPECT_EQ(ch.pop().value(), 1);
  EXPECT_EQ(ch.pop().value(), 2);
}

TEST(Channel, ClosedAndEmptyReportsClosed) {
  auto env = make_real_env();
  Channel<int> ch(*env, 4);
  ch.push(5);
  ch.close();
  EXPECT_FALSE(ch.push(6));
  EXPECT_EQ(ch.pop().value(), 5);
  int out = 0;
  EXPECT_EQ(ch.pop_until(out, kForever), ChannelStatus::Closed);
}

TEST(Channel, PopTimesOut) {
  auto env = make_real_env();
  Channel<int> ch(*env, 1);
  int out = 0;
  EXPECT_EQ(ch.pop_for(out, 0.01), ChannelStatus::Timeout);
  EXPECT_THROW(Channel<int>(*env, 0), std::invalid_argument);
}

namespace {

void stress(Env& env) {
  constexpr int kProducers = 4;
  constexpr int kPerProducer = 2500;
  Channel<int> ch(env, 16);
  std::multiset<int> seen;
  for (int p = 0; p < kProducers; ++p) {
    env.spawn("producer", [&, p] {
      for (int i = 0; i < kPerProducer; ++i) ch.push(p * kPerProducer + i);
    });
  }
  env.spawn("consumer", [&] {
    for (int i = 0; i < kProducers * kPerProducer; ++i) seen.insert(ch.pop().value());
    ch.close();
  });
  EXPECT_TRUE(env.run().empty());
  ASSERT_EQ(seen.size(), static_cast<std::size_t>(kProducers * kPerProducer));
  int expected = 0;
  for (int v : seen) EXPECT_EQ(v, expected++);
}

}  // namespace

TEST(Channel, StressWithThreadsLosesNothing) {
  auto env = make_real_env();
  stress(*env);
}

TEST(Channel, StressInVirtualTimeLosesNothing) {
  auto env = make_sim_env();
  stress(*env);
}

TEST(SimEnv, SleepAdvancesVirtualClockOnly) {
  auto env = make_sim_env();
  double woke = -1.0;
  env->spawn("sleeper", [&] {
    env->sleep_for(1000.0);
    woke = env->now();
  });
  EXPECT_TRUE(env->run().empty());
  EXPECT_DOUBLE_EQ(woke, 1000.0);
}

TEST(SimEnv, DetectsDeadlock) {
  auto env = make_sim_env();
  Channel<int> ch(*env, 1);
  env->spawn("stuck", [&] { ch.pop(); });
  const auto errors = env->run();
  ASSERT_EQ(errors.size(), 1U);
  EXPECT_NE(errors[0].find("deadlock"), std::string::npos);
}

TEST(SimEnv, ReportsWorkerExceptions) {
  auto env = make_sim_env();
  env->spawn("thrower", [] { throw std::runtime_error("boom"); });
  const auto errors = env->run();
  ASSERT_EQ(errors.size(), 1U);
  EXPECT_NE(errors[0].find("boom"), std::string::npos);
}

TEST(InProc, DeliversBothWaysAndReportsClose) {
  auto env = make_sim_env();
  InProcFabric fabric(*env, 2);
  env->spawn("device", [&] {
    fabric.device(2).send(encode(Message::turn_on()));
    Bytes reply;
    ASSERT_EQ(fabric.device(2).receive(reply, kForever), ChannelStatus::Ok);
    EXPECT_EQ(decode(reply).kind, MessageKind::Stop);
    fabric.device(2).close();
  });
  env->spawn("server", [&] {
    Inbound in;
    ASSERT_EQ(fabric.server().receive(in, kForever), ChannelStatus::Ok);
    EXPECT_EQ(in.from, 2U);
    EXPECT_EQ(in.event, InboundEvent::Frame);
    EXPECT_TRUE(fabric.server().send(2, encode(Message::stop())));
    ASSERT_EQ(fabric.server().receive(in, kForever), ChannelStatus::Ok);
    EXPECT_EQ(in.event, InboundEvent::Disconnected);
    EXPECT_TRUE(in.permanent);
    EXPECT_FALSE(fabric.server().send(2, encode(Message::stop())));
    fabric.server().close();
  });
  EXPECT_TRUE(env->run().empty());
}

TEST(Socket, HandshakeAndFrameExchange) {
  auto env = make_real_env();
  SocketServerTransport server(*env, "127.0.0.1", 0);
  ASSERT_NE(server.port(), 0);
  std::unique_ptr<SocketDeviceTransport> dev;
  std::thread client([&] { dev = std::make_unique<SocketDeviceTransport>(*env, "127.0.0.1", server.port(), 3); });
  server.accept_devices(1, 10.0);
  client.join();

  Inbound in;
  ASSERT_EQ(server.receive(in, env->now() + 5.0), ChannelStatus::Ok);
  EXPECT_EQ(in.event, InboundEvent::Connected);
  EXPECT_EQ(in.from, 3U);

  const auto act = Message::activation({Tensor::from({1, 2}, {1.5F, -2.0F}), {1}, 3, 9});
  ASSERT_TRUE(dev->send(encode(act)));
  ASSERT_EQ(server.receive(in, env->now() + 5.0), ChannelStatus::Ok);
  EXPECT_EQ(in.event, InboundEvent::Frame);
  EXPECT_EQ(in.from, 3U);
  EXPECT_EQ(decode(in.bytes), act);

  ASSERT_TRUE(server.send(3, encode(Message::stop())));
  Bytes reply;
  ASSERT_EQ(dev->receive(reply, env->now() + 5.0), ChannelStatus::Ok);
  EXPECT_EQ(decode(reply).kind, MessageKind::Stop);

  dev->close();
  ASSERT_EQ(server.receive(in, env->now() + 5.0), ChannelStatus::Ok);
  EXPECT_EQ(in.event, InboundEvent::Disconnected);
  server.close();
}

TEST(Socket, AcceptTimesOutWithoutDevices) {
  auto env = make_real_env();
  SocketServerTransport server(*env, "127.0.0.1", 0);
  EXPECT_THROW(server.accept_devices(1, 0.2), std::runtime_error);
  server.close();
}

TEST(Comms, BytesAreCountedOncePerFrame) {
  auto env = make_sim_env();
  InProcFabric fabric(*env, 1);
  EventLog log(*env);
  LinkTable links(1);
  DeviceComms dev(*env, 1, fabric.device(1), links.at(1), log);
  ServerComms srv(*env, fabric.server(), links, log);
  const auto up = Message::activation({Tensor::from({1, 3}, {1, 2, 3}), {0}, 1, 0});
  const auto down = Message::global_model({});
  env->spawn("server", [&] {
    srv.start([&](Received&& r) {
      if (r.event == InboundEvent::Frame) {
        EXPECT_EQ(r.msg, up);
        srv.send(1, down);
        srv.send(1, Message::stop());
        srv.shutdown();
      }
    });
  });
  env->spawn("device", [&] {
    dev.start();
    ASSERT_TRUE(dev.gate().try_consume());
    dev.send(up);
    Message m;
    ASSERT_EQ(dev.receive(m), ChannelStatus::Ok);
    EXPECT_EQ(m, down);
    ASSERT_EQ(dev.receive(m), ChannelStatus::Ok);
    EXPECT_EQ(m.kind, MessageKind::Stop);
    EXPECT_TRUE(dev.stop_requested());
    dev.shutdown();
  });
  EXPECT_TRUE(env->run().empty());
  EXPECT_EQ(links.at(1).bytes_up.load(), encode(up).size());
  EXPECT_EQ(links.at(1).bytes_down.load(), encode(down).size() + encode(Message::stop()).size());
  EXPECT_EQ(links.at(1).frames_up.load(), 1U);
  EXPECT_EQ(links.at(1).frames_down.load(), 2U);
}

TEST(Comms, TurnOnFlipsTheGate) {
  SenderGate gate;
  EXPECT_TRUE(gate.try_consume());
  EXPECT_FALSE(gate.try_consume());
  gate.grant();
  EXPECT_TRUE(gate.active());
  EXPECT_TRUE(gate.try_consume());
}
