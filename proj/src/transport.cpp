#include "gvq/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <optional>
#include <thread>

namespace gvq {

// ---------------------------------------------------------------------------
// In-process backend

struct InprocRing::Queue {
  std::mutex mutex;
  std::condition_variable ready;
  std::deque<std::vector<std::uint8_t>> frames;

  void push(std::vector<std::uint8_t> frame) {
    {
      std::lock_guard<std::mutex> lock(mutex);
      frames.push_back(std::move(frame));
    }
    ready.notify_one();
  }

  std::vector<std::uint8_t> pop(std::chrono::milliseconds timeout) {
    std::unique_lock<std::mutex> lock(mutex);
    if (!ready.wait_for(lock, timeout, [&] { return !frames.empty(); }))
      throw TransportError("recv timed out after " +
                           std::to_string(timeout.count()) + " ms");
    auto frame = std::move(frames.front());
    frames.pop_front();
    return frame;
  }
};

class InprocRing::Endpoint : public Transport {
 public:
  Endpoint(int id, const RingTopology& topology, Queue& out, Queue& in)
      : id_(id), topology_(topology), out_(out), in_(in) {}

  void send(int to, std::span<const std::uint8_t> frame) override {
    if (to != topology_.successor(id_))
      throw ProtocolError("send: node " + std::to_string(id_) +
                          " may only send to its successor");
    out_.push(std::vector<std::uint8_t>(frame.begin(), frame.end()));
    stats_.bytes_sent += frame.size() + kFrameHeaderBytes;
    stats_.messages_sent += 1;
  }

  std::vector<std::uint8_t> recv(int from,
                                 std::chrono::milliseconds timeout) override {
    if (from != topology_.predecessor(id_))
      throw ProtocolError("recv: node " + std::to_string(id_) +
                          " may only receive from its predecessor");
    auto frame = in_.pop(timeout);
    stats_.bytes_received += frame.size() + kFrameHeaderBytes;
    stats_.messages_received += 1;
    return frame;
  }

  const LinkStats& stats() const override { return stats_; }
  int id() const override { return id_; }

 private:
  int id_;
  const RingTopology& topology_;
  Queue& out_;
  Queue& in_;
  LinkStats stats_;
};

InprocRing::InprocRing(int nodes) : topology_(nodes) {
  for (int n = 0; n < nodes; ++n) queues_.push_back(std::make_unique<Queue>());
  for (int n = 0; n < nodes; ++n)
    endpoints_.push_back(std::make_unique<Endpoint>(
        n, topology_, *queues_[n], *queues_[topology_.predecessor(n)]));
}

InprocRing::~InprocRing() = default;

Transport& InprocRing::endpoint(int node) { return *endpoints_.at(node); }

// ---------------------------------------------------------------------------
// TCP backend

namespace {

void close_fd(int& fd) {
  if (fd >= 0) {
    ::close(fd);
    fd = -1;
  }
}

void write_all(int fd, const std::uint8_t* data, std::size_t size) {
  std::size_t done = 0;
  while (done < size) {
    ssize_t n = ::send(fd, data + done, size - done, MSG_NOSIGNAL);
    if (n <= 0) throw TransportError("connection lost while sending");
    done += static_cast<std::size_t>(n);
  }
}

void read_all(int fd, std::uint8_t* data, std::size_t size,
              std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  std::size_t done = 0;
  while (done < size) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) throw TransportError("recv timed out");
    pollfd pfd{fd, POLLIN, 0};
    int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
    if (rc == 0) throw TransportError("recv timed out");
    if (rc < 0) throw TransportError("poll failed");
    ssize_t n = ::recv(fd, data + done, size - done, 0);
    if (n <= 0) throw TransportError("connection lost while receiving");
    done += static_cast<std::size_t>(n);
  }
}

}  // namespace

class TcpRing::Endpoint : public Transport {
 public:
  Endpoint(int id, const RingTopology& topology) : id_(id), topology_(topology) {}

  ~Endpoint() override {
    {
      std::lock_guard<std::mutex> lock(send_mutex_);
      closing_ = true;
    }
    send_ready_.notify_all();
    if (writer_.joinable()) writer_.join();
    close_fd(out_fd_);
    close_fd(in_fd_);
    close_fd(listen_fd_);
  }

  void start_writer() {
    writer_ = std::thread([this] { writer_loop(); });
  }

  void send(int to, std::span<const std::uint8_t> frame) override {
    if (to != topology_.successor(id_))
      throw ProtocolError("send: node " + std::to_string(id_) +
                          " may only send to its successor");
    std::vector<std::uint8_t> wire;
    wire.reserve(frame.size() + kFrameHeaderBytes);
    const std::uint32_t len = static_cast<std::uint32_t>(frame.size());
    const auto* lp = reinterpret_cast<const std::uint8_t*>(&len);
    wire.insert(wire.end(), lp, lp + 4);
    wire.insert(wire.end(), frame.begin(), frame.end());
    {
      std::lock_guard<std::mutex> lock(send_mutex_);
      if (writer_error_) throw TransportError(*writer_error_);
      send_queue_.push_back(std::move(wire));
    }
    send_ready_.notify_one();
    stats_.bytes_sent += frame.size() + kFrameHeaderBytes;
    stats_.messages_sent += 1;
  }

  std::vector<std::uint8_t> recv(int from,
                                 std::chrono::milliseconds timeout) override {
    if (from != topology_.predecessor(id_))
      throw ProtocolError("recv: node " + std::to_string(id_) +
                          " may only receive from its predecessor");
    std::uint8_t header[4];
    read_all(in_fd_, header, 4, timeout);
    std::uint32_t len = 0;
    std::memcpy(&len, header, 4);
    std::vector<std::uint8_t> frame(len);
    if (len > 0) read_all(in_fd_, frame.data(), len, timeout);
    stats_.bytes_received += len + kFrameHeaderBytes;
    stats_.messages_received += 1;
    return frame;
  }

  const LinkStats& stats() const override { return stats_; }
  int id() const override { return id_; }

  int listen_fd_ = -1;
  int in_fd_ = -1;   // connection from predecessor
  int out_fd_ = -1;  // connection to successor

 private:
  void writer_loop() {
    for (;;) {
      std::vector<std::uint8_t> wire;
      {
        std::unique_lock<std::mutex> lock(send_mutex_);
        send_ready_.wait(lock, [&] { return closing_ || !send_queue_.empty(); });
        if (send_queue_.empty()) return;  // closing
        wire = std::move(send_queue_.front());
        send_queue_.pop_front();
      }
      try {
        write_all(out_fd_, wire.data(), wire.size());
      } catch (const TransportError& e) {
        std::lock_guard<std::mutex> lock(send_mutex_);
        writer_error_ = e.what();
        return;
      }
    }
  }

  int id_;
  const RingTopology& topology_;
  LinkStats stats_;

  std::thread writer_;
  std::mutex send_mutex_;
  std::condition_variable send_ready_;
  std::deque<std::vector<std::uint8_t>> send_queue_;
  std::optional<std::string> writer_error_;
  bool closing_ = false;
};

TcpRing::TcpRing(TcpRingConfig config, std::chrono::milliseconds timeout)
    : topology_(static_cast<int>(config.listen_ports.size())) {
  const int nodes = topology_.nodes;
  if (config.listen_hosts.size() != static_cast<std::size_t>(nodes))
    throw ConfigError("TcpRing: need one listen host per node");

  for (int n = 0; n < nodes; ++n)
    endpoints_.push_back(std::make_unique<Endpoint>(n, topology_));

  // Bind and listen everywhere first so connects cannot race the ring order.
  for (int n = 0; n < nodes; ++n) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket() failed");
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(config.listen_ports[n]);
    if (::inet_pton(AF_INET, config.listen_hosts[n].c_str(), &addr.sin_addr) != 1)
      throw ConfigError("TcpRing: bad listen host " + config.listen_hosts[n]);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw TransportError("bind failed on port " +
                           std::to_string(config.listen_ports[n]));
    if (::listen(fd, 1) != 0) throw TransportError("listen failed");
    endpoints_[n]->listen_fd_ = fd;
  }

  // Every node connects to its successor; accept the predecessor side.
  for (int n = 0; n < nodes; ++n) {
    const int succ = topology_.successor(n);
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(config.listen_ports[succ]);
    ::inet_pton(AF_INET, config.listen_hosts[succ].c_str(), &addr.sin_addr);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw TransportError("connect to node " + std::to_string(succ) +
                           " failed");
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    endpoints_[n]->out_fd_ = fd;
  }
  for (int n = 0; n < nodes; ++n) {
    pollfd pfd{endpoints_[n]->listen_fd_, POLLIN, 0};
    int rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (rc <= 0)
      throw TransportError("timed out waiting for predecessor connection");
    int fd = ::accept(endpoints_[n]->listen_fd_, nullptr, nullptr);
    if (fd < 0) throw TransportError("accept failed");
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    endpoints_[n]->in_fd_ = fd;
  }
  for (int n = 0; n < nodes; ++n) endpoints_[n]->start_writer();
}

TcpRing::~TcpRing() = default;

Transport& TcpRing::endpoint(int node) { return *endpoints_.at(node); }

}  // namespace gvq
