#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fedoptima/channel.hpp"
#include "fedoptima/wire.hpp"

namespace fedoptima {

/// Byte counters and simulated bandwidth of one device <-> server link.
/// Frames are counted by the side that sends them, so each frame is counted
/// exactly once.
struct LinkStats {
  std::atomic<std::uint64_t> bytes_up{0};
  std::atomic<std::uint64_t> bytes_down{0};
  std::atomic<std::uint64_t> frames_up{0};
  std::atomic<std::uint64_t> frames_down{0};
  std::atomic<double> bandwidth{0.0};  // bytes per second, 0 = unpaced

  /// Serialization delay of a frame of this size on the link.
  double transfer_seconds(std::size_t bytes) const {
    const double bw = bandwidth.load();
    return bw > 0.0 ? static_cast<double>(bytes) / bw : 0.0;
  }
  std::uint64_t total_bytes() const { return bytes_up.load() + bytes_down.load(); }
};

enum class InboundEvent { Frame, Connected, Disconnected };

struct Inbound {
  InboundEvent event = InboundEvent::Frame;
  DeviceId from = 0;
  Bytes bytes;
  bool permanent = false;  // Disconnected only: the device will not return
};

/// Server side of the transport: one logical connection per device.
class ServerTransport {
 public:
  virtual ~ServerTransport() = default;
  /// False when the destination is gone or the transport is closed.
  virtual bool send(DeviceId to, Bytes frame) = 0;
  virtual ChannelStatus receive(Inbound& out, double deadline) = 0;
  /// Queues a control event (join or leave) behind frames already received.
  virtual void inject(Inbound event) = 0;
  virtual void close() = 0;
};

/// Device side of the transport.
class DeviceTransport {
 public:
  virtual ~DeviceTransport() = default;
  virtual bool send(Bytes frame) = 0;
  virtual ChannelStatus receive(Bytes& out, double deadline) = 0;
  /// Tells the server this device is gone for good and stops receiving.
  virtual void close() = 0;
};

/// In-process queues: a shared uplink into the server and one downlink per
/// device. Device ids run 1..K.
class InProcFabric {
 public:
  InProcFabric(Env& env, std::size_t devices, std::size_t capacity = 1 << 14);
  ~InProcFabric();

  ServerTransport& server();
  DeviceTransport& device(DeviceId id);
  std::size_t devices() const { return device_count_; }

 private:
  class Server;
  class Device;
  std::size_t device_count_;
  Channel<Inbound> uplink_;
  std::vector<std::unique_ptr<Channel<Bytes>>> downlinks_;
  std::unique_ptr<Server> server_;
  std::vector<std::unique_ptr<Device>> device_ends_;
};

/// Stream-socket server: listens on host:port, accepts one connection per
/// device. A device announces itself with a TURN_ON frame carrying its id as
/// origin; that first frame is consumed by the handshake.
class SocketServerTransport final : public ServerTransport {
 public:
  SocketServerTransport(Env& env, const std::string& host, std::uint16_t port);
  ~SocketServerTransport() override;

  std::uint16_t port() const { return port_; }

  /// Blocks until `devices` connections completed the handshake or the
  /// timeout elapses. Throws on timeout.
  void accept_devices(std::size_t devices, double timeout_seconds);

  bool send(DeviceId to, Bytes frame) override;
  ChannelStatus receive(Inbound& out, double deadline) override;
  void inject(Inbound event) override;
  void close() override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::uint16_t port_ = 0;
};

class SocketDeviceTransport final : public DeviceTransport {
 public:
  /// Connects (retrying until the timeout) and sends the handshake frame.
  SocketDeviceTransport(Env& env, const std::string& host, std::uint16_t port, DeviceId id,
                        double timeout_seconds = 10.0);
  ~SocketDeviceTransport() override;

  bool send(Bytes frame) override;
  ChannelStatus receive(Bytes& out, double deadline) override;
  void close() override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace fedoptima
