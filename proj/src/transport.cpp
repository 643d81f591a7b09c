#include "fedoptima/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>
#include <map>
#include <thread>

namespace fedoptima {

// ---------------------------------------------------------------------------
// In-process fabric

class InProcFabric::Server final : public ServerTransport {
 public:
  explicit Server(InProcFabric& fabric) : fabric_(fabric) {}

  bool send(DeviceId to, Bytes frame) override {
    if (to == 0 || to > fabric_.downlinks_.size()) return false;
    return fabric_.downlinks_[to - 1]->push(std::move(frame));
  }

  ChannelStatus receive(Inbound& out, double deadline) override {
    return fabric_.uplink_.pop_until(out, deadline);
  }

  void inject(Inbound event) override { fabric_.uplink_.push(std::move(event)); }

  void close() override {
    fabric_.uplink_.close();
    for (auto& d : fabric_.downlinks_) d->close();
  }

 private:
  InProcFabric& fabric_;
};

class InProcFabric::Device final : public DeviceTransport {
 public:
  Device(InProcFabric& fabric, DeviceId id) : fabric_(fabric), id_(id) {}

  bool send(Bytes frame) override {
    return fabric_.uplink_.push(Inbound{InboundEvent::Frame, id_, std::move(frame), false});
  }

  ChannelStatus receive(Bytes& out, double deadline) override {
    return fabric_.downlinks_[id_ - 1]->pop_until(out, deadline);
  }

  void close() override {
    if (closed_) return;
    closed_ = true;
    fabric_.uplink_.push(Inbound{InboundEvent::Disconnected, id_, {}, true});
    fabric_.downlinks_[id_ - 1]->close();
  }

 private:
  InProcFabric& fabric_;
  DeviceId id_;
  bool closed_ = false;
};

InProcFabric::InProcFabric(Env& env, std::size_t devices, std::size_t capacity)
    : device_count_(devices), uplink_(env, capacity) {
  for (std::size_t i = 0; i < devices; ++i) {
    downlinks_.push_back(std::make_unique<Channel<Bytes>>(env, capacity));
  }
  server_ = std::make_unique<Server>(*this);
  for (std::size_t i = 0; i < devices; ++i) {
    device_ends_.push_back(std::make_unique<Device>(*this, static_cast<DeviceId>(i + 1)));
  }
}

InProcFabric::~InProcFabric() = default;

ServerTransport& InProcFabric::server() { return *server_; }

DeviceTransport& InProcFabric::device(DeviceId id) {
  if (id == 0 || id > device_ends_.size()) throw std::out_of_range("no such device " + std::to_string(id));
  return *device_ends_[id - 1];
}

// ---------------------------------------------------------------------------
// Stream sockets

namespace {

bool write_all(int fd, const std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
  return true;
}

// Pulls every complete frame out of `buffer`.
void extract_frames(Bytes& buffer, std::deque<Bytes>& frames) {
  std::size_t offset = 0;
  for (;;) {
    const auto view = std::span<const std::uint8_t>(buffer).subspan(offset);
    const auto len = frame_length(view);
    if (!len || view.size() < *len) break;
    frames.emplace_back(view.begin(), view.begin() + static_cast<std::ptrdiff_t>(*len));
    offset += *len;
  }
  buffer.erase(buffer.begin(), buffer.begin() + static_cast<std::ptrdiff_t>(offset));
}

// Reads what is available. Returns false on EOF or error.
bool read_some(int fd, Bytes& buffer) {
  std::uint8_t chunk[65536];
  for (;;) {
    const ssize_t r = ::recv(fd, chunk, sizeof chunk, 0);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return false;
    buffer.insert(buffer.end(), chunk, chunk + r);
    return true;
  }
}

int poll_timeout_ms(Env& env, double deadline) {
  if (deadline == kForever) return -1;
  const double remaining = deadline - env.now();
  if (remaining <= 0) return 0;
  return static_cast<int>(std::ceil(remaining * 1000.0));
}

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (host.empty() || host == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
  } else if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
      throw std::runtime_error("cannot resolve host " + host);
    }
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    ::freeaddrinfo(res);
  }
  return addr;
}

struct WakePipe {
  int fds[2] = {-1, -1};
  WakePipe() {
    if (::pipe(fds) != 0) throw std::runtime_error("pipe failed");
    ::fcntl(fds[0], F_SETFL, O_NONBLOCK);
  }
  ~WakePipe() {
    ::close(fds[0]);
    ::close(fds[1]);
  }
  void wake() const {
    const std::uint8_t b = 1;
    [[maybe_unused]] auto r = ::write(fds[1], &b, 1);
  }
};

}  // namespace

struct SocketServerTransport::Impl {
  explicit Impl(Env& e) : env(e) {}
  Env& env;
  int listen_fd = -1;
  WakePipe wake;
  struct Conn {
    int fd = -1;
    Bytes buffer;
  };
  std::mutex mutex;  // guards conns for send vs receive
  std::map<DeviceId, Conn> conns;
  std::deque<Inbound> pending;
  std::mutex pending_mutex;
  std::atomic<bool> closed{false};
};

SocketServerTransport::SocketServerTransport(Env& env, const std::string& host, std::uint16_t port)
    : impl_(std::make_unique<Impl>(env)) {
  if (env.simulated()) throw std::logic_error("socket transport needs a real-time environment");
  impl_->listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (impl_->listen_fd < 0) throw std::runtime_error("socket() failed");
  int one = 1;
  ::setsockopt(impl_->listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr = resolve(host, port);
  if (::bind(impl_->listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(impl_->listen_fd);
    throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
  }
  if (::listen(impl_->listen_fd, 64) != 0) throw std::runtime_error("listen() failed");
  socklen_t len = sizeof addr;
  ::getsockname(impl_->listen_fd, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

SocketServerTransport::~SocketServerTransport() {
  close();
  if (impl_->listen_fd >= 0) ::close(impl_->listen_fd);
}

void SocketServerTransport::accept_devices(std::size_t devices, double timeout_seconds) {
  const double deadline = impl_->env.now() + timeout_seconds;
  std::map<int, Bytes> handshaking;
  std::size_t accepted = 0;
  while (accepted < devices) {
    std::vector<pollfd> fds{{impl_->listen_fd, POLLIN, 0}};
    for (auto& [fd, _] : handshaking) fds.push_back({fd, POLLIN, 0});
    const int timeout = poll_timeout_ms(impl_->env, deadline);
    if (timeout == 0) throw std::runtime_error("timed out waiting for devices to connect");
    if (::poll(fds.data(), fds.size(), timeout) < 0 && errno != EINTR) throw std::runtime_error("poll failed");
    if (fds[0].revents & POLLIN) {
      const int fd = ::accept(impl_->listen_fd, nullptr, nullptr);
      if (fd >= 0) {
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        handshaking.emplace(fd, Bytes{});
      }
    }
    for (std::size_t i = 1; i < fds.size(); ++i) {
      if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      const int fd = fds[i].fd;
      Bytes& buf = handshaking[fd];
      if (!read_some(fd, buf)) {
        ::close(fd);
        handshaking.erase(fd);
        continue;
      }
      std::deque<Bytes> frames;
      extract_frames(buf, frames);
      if (frames.empty()) continue;
      const Message hello = decode(frames.front());
      if (hello.kind != MessageKind::TurnOn || hello.origin == 0) {
        ::close(fd);
        handshaking.erase(fd);
        continue;
      }
      {
        std::lock_guard lock(impl_->mutex);
        impl_->conns[hello.origin] = Impl::Conn{fd, std::move(buf)};
      }
      {
        std::lock_guard lock(impl_->pending_mutex);
        impl_->pending.push_back(Inbound{InboundEvent::Connected, hello.origin, {}, false});
        frames.pop_front();
        for (auto& f : frames) impl_->pending.push_back(Inbound{InboundEvent::Frame, hello.origin, std::move(f), false});
      }
      handshaking.erase(fd);
      ++accepted;
    }
  }
}

bool SocketServerTransport::send(DeviceId to, Bytes frame) {
  if (impl_->closed) return false;
  int fd = -1;
  {
    std::lock_guard lock(impl_->mutex);
    auto it = impl_->conns.find(to);
    if (it == impl_->conns.end()) return false;
    fd = it->second.fd;
  }
  return write_all(fd, frame.data(), frame.size());
}

ChannelStatus SocketServerTransport::receive(Inbound& out, double deadline) {
  for (;;) {
    {
      std::lock_guard lock(impl_->pending_mutex);
      if (!impl_->pending.empty()) {
        out = std::move(impl_->pending.front());
        impl_->pending.pop_front();
        return ChannelStatus::Ok;
      }
    }
    if (impl_->closed) return ChannelStatus::Closed;

    std::vector<pollfd> fds{{impl_->wake.fds[0], POLLIN, 0}};
    std::vector<DeviceId> ids;
    {
      std::lock_guard lock(impl_->mutex);
      for (auto& [id, conn] : impl_->conns) {
        fds.push_back({conn.fd, POLLIN, 0});
        ids.push_back(id);
      }
    }
    const int timeout = poll_timeout_ms(impl_->env, deadline);
    const int ready = ::poll(fds.data(), fds.size(), timeout);
    if (ready < 0 && errno != EINTR) return ChannelStatus::Closed;
    if (ready == 0 && timeout >= 0) return ChannelStatus::Timeout;
    if (fds[0].revents & POLLIN) {
      std::uint8_t drain[64];
      while (::read(impl_->wake.fds[0], drain, sizeof drain) > 0) {
      }
    }
    for (std::size_t i = 1; i < fds.size(); ++i) {
      if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      const DeviceId id = ids[i - 1];
      std::deque<Bytes> frames;
      bool alive = true;
      {
        std::lock_guard lock(impl_->mutex);
        auto& conn = impl_->conns[id];
        alive = read_some(conn.fd, conn.buffer);
        try {
          extract_frames(conn.buffer, frames);
        } catch (const WireError&) {
          alive = false;
        }
        if (!alive) {
          ::close(conn.fd);
          impl_->conns.erase(id);
        }
      }
      std::lock_guard lock(impl_->pending_mutex);
      for (auto& f : frames) impl_->pending.push_back(Inbound{InboundEvent::Frame, id, std::move(f), false});
      if (!alive) impl_->pending.push_back(Inbound{InboundEvent::Disconnected, id, {}, true});
    }
  }
}

void SocketServerTransport::inject(Inbound event) {
  {
    std::lock_guard lock(impl_->pending_mutex);
    impl_->pending.push_back(std::move(event));
  }
  impl_->wake.wake();
}

void SocketServerTransport::close() {
  if (impl_->closed.exchange(true)) return;
  std::lock_guard lock(impl_->mutex);
  for (auto& [id, conn] : impl_->conns) ::shutdown(conn.fd, SHUT_RDWR);
  impl_->wake.wake();
}

struct SocketDeviceTransport::Impl {
  explicit Impl(Env& e) : env(e) {}
  Env& env;
  int fd = -1;
  WakePipe wake;
  Bytes buffer;
  std::deque<Bytes> frames;
  std::atomic<bool> closed{false};
  std::mutex send_mutex;
};

SocketDeviceTransport::SocketDeviceTransport(Env& env, const std::string& host, std::uint16_t port, DeviceId id,
                                             double timeout_seconds)
    : impl_(std::make_unique<Impl>(env)) {
  if (env.simulated()) throw std::logic_error("socket transport needs a real-time environment");
  const sockaddr_in addr = resolve(host.empty() ? "127.0.0.1" : host, port);
  const auto give_up = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_seconds);
  for (;;) {
    impl_->fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (::connect(impl_->fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) break;
    ::close(impl_->fd);
    impl_->fd = -1;
    if (std::chrono::steady_clock::now() > give_up) {
      throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  int one = 1;
  ::setsockopt(impl_->fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  Message hello = Message::turn_on();
  hello.origin = id;
  const Bytes frame = encode(hello);
  if (!write_all(impl_->fd, frame.data(), frame.size())) throw std::runtime_error("handshake failed");
}

SocketDeviceTransport::~SocketDeviceTransport() {
  close();
  if (impl_->fd >= 0) ::close(impl_->fd);
}

bool SocketDeviceTransport::send(Bytes frame) {
  if (impl_->closed) return false;
  std::lock_guard lock(impl_->send_mutex);
  return write_all(impl_->fd, frame.data(), frame.size());
}

ChannelStatus SocketDeviceTransport::receive(Bytes& out, double deadline) {
  for (;;) {
    if (!impl_->frames.empty()) {
      out = std::move(impl_->frames.front());
      impl_->frames.pop_front();
      return ChannelStatus::Ok;
    }
    if (impl_->closed) return ChannelStatus::Closed;
    pollfd fds[2] = {{impl_->wake.fds[0], POLLIN, 0}, {impl_->fd, POLLIN, 0}};
    const int timeout = poll_timeout_ms(impl_->env, deadline);
    const int ready = ::poll(fds, 2, timeout);
    if (ready < 0 && errno != EINTR) return ChannelStatus::Closed;
    if (ready == 0 && timeout >= 0) return ChannelStatus::Timeout;
    if (fds[1].revents & (POLLIN | POLLHUP | POLLERR)) {
      if (!read_some(impl_->fd, impl_->buffer)) {
        impl_->closed = true;
      }
      try {
        extract_frames(impl_->buffer, impl_->frames);
      } catch (const WireError&) {
        impl_->closed = true;
      }
    }
  }
}

void SocketDeviceTransport::close() {
  if (impl_->closed.exchange(true)) return;
  ::shutdown(impl_->fd, SHUT_RDWR);
  impl_->wake.wake();
}

}  // namespace fedoptima
