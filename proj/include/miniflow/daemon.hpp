// Copyright 2026 The Miniflow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MINIFLOW__DAEMON_HPP_
#define MINIFLOW__DAEMON_HPP_

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "miniflow/control_proto.hpp"
#include "miniflow/dfspec.hpp"
#include "miniflow/io.hpp"
#include "miniflow/shm_pool.hpp"

namespace miniflow
{

inline constexpr std::uint16_t kDefaultCoordinatorPort = 53290;
inline constexpr std::uint16_t kDefaultDaemonPort = 53291;

/// $XDG_RUNTIME_DIR/miniflow, or /tmp/miniflow-<uid>.
std::filesystem::path default_run_dir();

struct DaemonConfig
{
  std::string machine_id = "local";
  /// Unset: local mode. Dataflows are driven through the Daemon API and the
  /// readiness barrier opens as soon as every local node is ready.
  std::optional<io::HostPort> coordinator;
  /// Listener for peer daemons; port 0 picks a free port.
  io::HostPort inter_daemon{"127.0.0.1", kDefaultDaemonPort};
  /// Static peer table (machine -> inter-daemon address); the coordinator
  /// adds to it per dataflow.
  std::map<std::string, io::HostPort> peers;
  std::filesystem::path run_dir = default_run_dir();
  std::uint64_t max_free_bytes = 256ull << 20;
  std::uint64_t inline_threshold = 4096;
  std::chrono::milliseconds readiness_timeout{30000};
  std::chrono::milliseconds stop_grace{5000};
  std::chrono::milliseconds heartbeat_interval{2000};
  /// Per-receiver bound on undelivered events; oldest are dropped past it.
  std::optional<std::size_t> event_queue_bound;
  /// Local mode: stop a dataflow when one of its nodes fails.
  bool stop_on_node_failure = true;
  std::shared_ptr<ShmFactory> shm_factory;  // POSIX shm when unset
};

/// Fixed-interval tick schedule. Deadlines sit on multiples of the interval
/// counted from `origin`; after a late poll the next deadline is the first
/// multiple after `now`, so missed ticks are skipped rather than replayed.
class TimerSchedule
{
public:
  using Clock = std::chrono::steady_clock;

  TimerSchedule(std::chrono::nanoseconds interval, Clock::time_point origin);

  Clock::time_point deadline() const {return deadline_;}
  /// True when a tick is due at `now`.
  bool poll(Clock::time_point now);

private:
  std::chrono::nanoseconds interval_;
  Clock::time_point origin_;
  Clock::time_point deadline_;
};

struct DaemonStats
{
  PoolStats pool;
  std::uint64_t inline_deliveries = 0;
  std::uint64_t shm_deliveries = 0;
  std::uint64_t remote_frames_sent = 0;
  std::uint64_t remote_frames_received = 0;
  std::uint64_t timer_ticks = 0;
  /// Input events handed to a node before its dataflow's barrier. Always 0.
  std::uint64_t early_deliveries = 0;
  std::uint64_t forced_releases = 0;
  std::uint64_t unknown_drops = 0;
  std::uint64_t queue_drops = 0;
  std::uint64_t peer_failures = 0;
  std::size_t running_dataflows = 0;
  std::size_t live_children = 0;
  /// os_name -> references still held by receivers (and a pending sender).
  std::map<std::string, std::uint32_t> outstanding;
};

struct NodeOutcome
{
  proto::NodeState state = proto::NodeState::Spawned;
  std::string detail;
};

struct DataflowOutcome
{
  bool ok = false;
  std::string error;
  std::map<std::string, NodeOutcome> nodes;
};

/// Per-machine manager: spawns node processes, routes their outputs through
/// shared memory, inline copies or peer daemons, drives timers and reclaims
/// blocks. All state is owned by one event loop.
class Daemon
{
public:
  /// Connects to the coordinator when one is configured.
  /// Throws Error(ConnectFailed | IoError).
  explicit Daemon(DaemonConfig config);
  ~Daemon();

  Daemon(const Daemon &) = delete;
  Daemon & operator=(const Daemon &) = delete;

  /// Runs the event loop on a background thread.
  void start();
  /// Runs the event loop on the calling thread until shutdown(), or until
  /// the coordinator connection is lost.
  void run();
  /// Stops every dataflow and ends the loop. Thread-safe.
  void shutdown();
  /// Waits for a loop started with start() to end.
  void join();

  const std::string & daemon_id() const {return daemon_id_;}
  const DaemonConfig & config() const {return config_;}
  std::string node_endpoint() const;
  std::uint16_t inter_daemon_port() const {return inter_daemon_port_;}

  /// Local mode entry point. Spawns every node and returns the new uuid.
  /// Throws Error(SpawnFailed | DuplicateDataflow | InvalidArgument).
  std::string spawn_dataflow(const dfspec::SubDataflow & sub, std::string uuid = {});
  /// Throws Error(UnknownDataflow) unless the dataflow is running.
  void stop_dataflow(const std::string & uuid);
  /// True once the readiness barrier has opened.
  bool wait_running(const std::string & uuid, std::chrono::milliseconds timeout);
  std::optional<DataflowOutcome> wait_finished(
    const std::string & uuid, std::chrono::milliseconds timeout);

  DaemonStats stats() const;
  /// Ordered lifecycle records: "spawn <uuid>", "ready <uuid> <node>",
  /// "barrier <uuid>", "deliver <uuid> <node> <input>" (first per input),
  /// "stop <uuid>", "finished <uuid>".
  std::vector<std::string> audit_log() const;

private:
  struct Impl;

  template<typename F>
  auto call(F && fn);

  DaemonConfig config_;
  std::string daemon_id_;
  std::uint16_t inter_daemon_port_ = 0;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
};

}  // namespace miniflow

#endif  // MINIFLOW__DAEMON_HPP_
