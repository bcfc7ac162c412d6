#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "fedsim/errors.hpp"

namespace fedsim {

// Point-to-point message transport between the server (rank 0) and clients
// (ranks 1..m). Two implementations: in-process queues and loopback TCP
// sockets with length-prefix framing. Frames are opaque byte blobs; the
// protocol layer puts envelopes inside.

using Frame = std::vector<uint8_t>;
using FrameObserver = std::function<void(int from, int to, const Frame&)>;

class Endpoint {
 public:
  virtual ~Endpoint() = default;
  virtual int rank() const = 0;
  virtual void send(int peer, const Frame& frame) = 0;
  virtual Frame recv(int peer, std::chrono::milliseconds timeout) = 0;
};

// ---- in-process transport ----

class InProcNetwork {
 public:
  explicit InProcNetwork(int clients) : ranks_(clients + 1) {
    queues_.resize(static_cast<size_t>(ranks_) * ranks_);
    for (auto& q : queues_) q = std::make_unique<Queue>();
    endpoints_.reserve(ranks_);
    for (int r = 0; r < ranks_; ++r) {
      endpoints_.push_back(std::make_unique<InProcEndpoint>(*this, r));
    }
  }

  ~InProcNetwork() { shutdown(); }

  int ranks() const { return ranks_; }
  Endpoint& endpoint(int rank) { return *endpoints_.at(static_cast<size_t>(rank)); }

  void set_observer(FrameObserver obs) {
    std::lock_guard<std::mutex> lock(observer_mu_);
    observer_ = std::move(obs);
  }

  // Wakes every blocked recv; subsequent receives fail with TransportClosed.
  void shutdown() {
    for (auto& q : queues_) {
      std::lock_guard<std::mutex> lock(q->mu);
      q->closed = true;
      q->cv.notify_all();
    }
  }

 private:
  struct Queue {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<Frame> frames;
    bool closed = false;
  };

  Queue& queue(int from, int to) {
    return *queues_.at(static_cast<size_t>(from) * ranks_ + to);
  }

  void push(int from, int to, const Frame& frame) {
    {
      std::lock_guard<std::mutex> lock(observer_mu_);
      if (observer_) observer_(from, to, frame);
    }
    Queue& q = queue(from, to);
    std::lock_guard<std::mutex> lock(q.mu);
    if (q.closed) throw TransportClosed("network is shut down");
    q.frames.push_back(frame);
    q.cv.notify_one();
  }

  Frame pop(int from, int to, std::chrono::milliseconds timeout) {
    Queue& q = queue(from, to);
    std::unique_lock<std::mutex> lock(q.mu);
    const bool got = q.cv.wait_for(lock, timeout,
                                   [&] { return !q.frames.empty() || q.closed; });
    if (!q.frames.empty()) {
      Frame f = std::move(q.frames.front());
      q.frames.pop_front();
      return f;
    }
    if (q.closed) throw TransportClosed("network is shut down");
    if (!got) {
      throw Timeout("rank " + std::to_string(to) + " timed out waiting for rank " +
                    std::to_string(from));
    }
    throw Timeout("rank " + std::to_string(to) + " woke without a frame from rank " +
                  std::to_string(from));
  }

  class InProcEndpoint final : public Endpoint {
   public:
    InProcEndpoint(InProcNetwork& net, int rank) : net_(net), rank_(rank) {}
    int rank() const override { return rank_; }
    void send(int peer, const Frame& frame) override { net_.push(rank_, peer, frame); }
    Frame recv(int peer, std::chrono::milliseconds timeout) override {
      return net_.pop(peer, rank_, timeout);
    }

   private:
    InProcNetwork& net_;
    int rank_;
  };

  int ranks_;
  std::vector<std::unique_ptr<Queue>> queues_;
  std::vector<std::unique_ptr<InProcEndpoint>> endpoints_;
  std::mutex observer_mu_;
  FrameObserver observer_;
};

// ---- loopback TCP transport ----

namespace detail {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd() { reset(); }
  Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;

  int get() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void poll_readable(int fd, std::chrono::steady_clock::time_point deadline,
                          const std::string& who) {
  const auto now = std::chrono::steady_clock::now();
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now);
  if (left.count() <= 0) throw Timeout(who);
  pollfd pfd{fd, POLLIN, 0};
  const int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
  if (rc == 0) throw Timeout(who);
  if (rc < 0) throw TransportClosed("poll failed: " + std::string(std::strerror(errno)));
}

inline void read_exact(int fd, uint8_t* buf, size_t n,
                       std::chrono::steady_clock::time_point deadline,
                       const std::string& who) {
  size_t done = 0;
  while (done < n) {
    poll_readable(fd, deadline, who);
    const ssize_t rc = ::read(fd, buf + done, n - done);
    if (rc == 0) throw TransportClosed("peer closed the connection");
    if (rc < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw TransportClosed("read failed: " + std::string(std::strerror(errno)));
    }
    done += static_cast<size_t>(rc);
  }
}

inline void write_exact(int fd, const uint8_t* buf, size_t n) {
  size_t done = 0;
  while (done < n) {
    const ssize_t rc = ::write(fd, buf + done, n - done);
    if (rc < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw TransportClosed("write failed: " + std::string(std::strerror(errno)));
    }
    done += static_cast<size_t>(rc);
  }
}

inline constexpr size_t kMaxFrameBytes = size_t{1} << 30;

inline void write_frame(int fd, const Frame& frame) {
  uint8_t len[4];
  const uint32_t n = static_cast<uint32_t>(frame.size());
  for (int i = 0; i < 4; ++i) len[i] = static_cast<uint8_t>(n >> (8 * i));
  write_exact(fd, len, 4);
  if (!frame.empty()) write_exact(fd, frame.data(), frame.size());
}

inline Frame read_frame(int fd, std::chrono::milliseconds timeout, const std::string& who) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  uint8_t len[4];
  read_exact(fd, len, 4, deadline, who);
  uint32_t n = 0;
  for (int i = 0; i < 4; ++i) n |= static_cast<uint32_t>(len[i]) << (8 * i);
  if (n > kMaxFrameBytes) throw MalformedPayload("frame of " + std::to_string(n) + " bytes");
  Frame f(n);
  if (n > 0) read_exact(fd, f.data(), n, deadline, who);
  return f;
}

}  // namespace detail

// Owns the listening socket. The server endpoint accepts one connection per
// client; each client introduces itself with a 4-byte rank hello.
class SocketNetwork {
 public:
  explicit SocketNetwork(int clients,
                         std::chrono::milliseconds accept_timeout = std::chrono::seconds(30))
      : clients_(clients), accept_timeout_(accept_timeout) {
    listen_ = detail::Fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listen_.valid()) throw TransportClosed("cannot create listening socket");
    const int one = 1;
    ::setsockopt(listen_.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(listen_.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listen_.get(), clients) != 0) {
      throw TransportClosed("cannot bind loopback listener: " +
                            std::string(std::strerror(errno)));
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  uint16_t port() const { return port_; }

  void set_observer(FrameObserver obs) { observer_ = std::move(obs); }

  // Blocks until all clients have connected and identified themselves.
  std::unique_ptr<Endpoint> server_endpoint() {
    auto ep = std::make_unique<ServerEndpoint>(clients_, observer_);
    const auto deadline = std::chrono::steady_clock::now() + accept_timeout_;
    for (int i = 0; i < clients_; ++i) {
      detail::poll_readable(listen_.get(), deadline, "server accepting clients");
      detail::Fd conn(::accept(listen_.get(), nullptr, nullptr));
      if (!conn.valid()) throw TransportClosed("accept failed");
      const int one = 1;
      ::setsockopt(conn.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      uint8_t hello[4];
      detail::read_exact(conn.get(), hello, 4, deadline, "client hello");
      uint32_t rank = 0;
      for (int b = 0; b < 4; ++b) rank |= static_cast<uint32_t>(hello[b]) << (8 * b);
      if (rank < 1 || rank > static_cast<uint32_t>(clients_)) {
        throw MalformedPayload("client hello carries invalid rank " + std::to_string(rank));
      }
      ep->adopt(static_cast<int>(rank), std::move(conn));
    }
    return ep;
  }

  static std::unique_ptr<Endpoint> connect_client(int rank, uint16_t port) {
    detail::Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd.valid()) throw TransportClosed("cannot create client socket");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      throw TransportClosed("cannot connect to server: " +
                            std::string(std::strerror(errno)));
    }
    const int one = 1;
    ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    uint8_t hello[4];
    for (int b = 0; b < 4; ++b) hello[b] = static_cast<uint8_t>(rank >> (8 * b));
    detail::write_exact(fd.get(), hello, 4);
    return std::make_unique<ClientEndpoint>(rank, std::move(fd));
  }

 private:
  class ServerEndpoint final : public Endpoint {
   public:
    ServerEndpoint(int clients, FrameObserver obs)
        : clients_(clients), observer_(std::move(obs)) {}

    void adopt(int rank, detail::Fd fd) { fds_[rank] = std::move(fd); }

    int rank() const override { return 0; }

    void send(int peer, const Frame& frame) override {
      if (observer_) observer_(0, peer, frame);
      detail::write_frame(fd_for(peer), frame);
    }

    Frame recv(int peer, std::chrono::milliseconds timeout) override {
      Frame f = detail::read_frame(fd_for(peer), timeout,
                                   "server waiting for client " + std::to_string(peer));
      if (observer_) observer_(peer, 0, f);
      return f;
    }

   private:
    int fd_for(int peer) {
      auto it = fds_.find(peer);
      if (it == fds_.end() || !it->second.valid()) {
        throw TransportClosed("no connection for client " + std::to_string(peer));
      }
      return it->second.get();
    }

    int clients_;
    FrameObserver observer_;
    std::map<int, detail::Fd> fds_;
  };

  class ClientEndpoint final : public Endpoint {
   public:
    ClientEndpoint(int rank, detail::Fd fd) : rank_(rank), fd_(std::move(fd)) {}

    int rank() const override { return rank_; }

    void send(int peer, const Frame& frame) override {
      if (peer != 0) throw TransportClosed("clients only talk to the server");
      detail::write_frame(fd_.get(), frame);
    }

    Frame recv(int peer, std::chrono::milliseconds timeout) override {
      if (peer != 0) throw TransportClosed("clients only talk to the server");
      return detail::read_frame(fd_.get(), timeout,
                                "client " + std::to_string(rank_) + " waiting for server");
    }

   private:
    int rank_;
    detail::Fd fd_;
  };

  int clients_;
  std::chrono::milliseconds accept_timeout_;
  detail::Fd listen_;
  uint16_t port_ = 0;
  FrameObserver observer_;
};

}  // namespace fedsim
