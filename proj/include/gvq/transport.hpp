#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "gvq/types.hpp"

namespace gvq {

/// Logical ring: node n sends only to (n + 1) mod N.
struct RingTopology {
  int nodes = 1;

  explicit RingTopology(int n = 1) : nodes(n) {
    if (n < 1) throw ConfigError("RingTopology: need at least one node");
  }
  int successor(int n) const { return (n + 1) % nodes; }
  int predecessor(int n) const { return (n + nodes - 1) % nodes; }
};

/// Per-endpoint byte and message counters. Sent/received bytes include
/// the 4-byte length prefix every backend puts in front of a frame.
struct LinkStats {
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t messages_sent = 0;
  std::uint64_t messages_received = 0;
};

inline constexpr std::size_t kFrameHeaderBytes = 4;  // u32 LE payload length

struct BandwidthModel {
  double bytes_per_second = 1e8;
  double latency_seconds = 0.0;
};

inline double simulated_transfer_time(std::uint64_t bytes,
                                      const BandwidthModel& model) {
  if (model.bytes_per_second <= 0)
    throw Error("simulated_transfer_time: bandwidth must be positive");
  return model.latency_seconds +
         static_cast<double>(bytes) / model.bytes_per_second;
}

/// One node's view of the ring: ordered, reliable, exactly-once frame
/// delivery to the successor and from the predecessor.
class Transport {
 public:
  virtual ~Transport() = default;

  /// Delivers one frame to the successor. `to` must be this node's
  /// successor id; anything else is a contract violation.
  virtual void send(int to, std::span<const std::uint8_t> frame) = 0;

  /// Next undelivered frame from the predecessor. Throws TransportError
  /// on timeout or connection loss.
  virtual std::vector<std::uint8_t> recv(
      int from,
      std::chrono::milliseconds timeout = std::chrono::milliseconds(30000)) = 0;

  virtual const LinkStats& stats() const = 0;
  virtual int id() const = 0;
};

/// In-process ring of FIFO queues. Sends never block; receives wait on a
/// condition variable with a timeout.
class InprocRing {
 public:
  explicit InprocRing(int nodes);
  ~InprocRing();

  Transport& endpoint(int node);
  const RingTopology& topology() const { return topology_; }

 private:
  struct Queue;
  class Endpoint;
  RingTopology topology_;
  std::vector<std::unique_ptr<Queue>> queues_;  // queues_[n]: edge n -> n+1
  std::vector<std::unique_ptr<Endpoint>> endpoints_;
};

/// TCP ring over length-prefixed frames, one persistent connection per
/// ring edge. Each endpoint owns a background writer so a send never
/// blocks the protocol thread.
struct TcpRingConfig {
  std::vector<std::string> listen_hosts;  // per node, usually 127.0.0.1
  std::vector<std::uint16_t> listen_ports;
};

class TcpRing {
 public:
  /// Binds all listeners, then connects every edge. Blocks until the ring
  /// is fully connected or `timeout` expires.
  TcpRing(TcpRingConfig config,
          std::chrono::milliseconds timeout = std::chrono::milliseconds(10000));
  ~TcpRing();

  Transport& endpoint(int node);
  const RingTopology& topology() const { return topology_; }

 private:
  class Endpoint;
  RingTopology topology_;
  std::vector<std::unique_ptr<Endpoint>> endpoints_;
};

}  // namespace gvq
