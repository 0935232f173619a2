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


#ifndef MINIFLOW__COORDINATOR_HPP_
#define MINIFLOW__COORDINATOR_HPP_

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "miniflow/control_proto.hpp"
#include "miniflow/io.hpp"

namespace miniflow
{

struct CoordinatorConfig
{
  /// Control listener for daemons and CLI clients; port 0 picks a free port.
  io::HostPort bind{"127.0.0.1", 53290};
  /// A daemon silent for this long is treated as lost.
  std::chrono::milliseconds heartbeat_timeout{10000};
  /// Upper bound on waiting for spawn results and readiness.
  std::chrono::milliseconds spawn_timeout{60000};
  /// Upper bound on waiting for DataflowFinished after a stop.
  std::chrono::milliseconds stop_timeout{20000};
  /// Keep a dataflow running after one of its nodes fails.
  bool keep_running = false;
  /// Line-delimited audit records are appended here when set.
  std::optional<std::filesystem::path> audit_file;
};

enum class Phase {Spawning, Ready, Running, Stopping, Finished, Failed};

std::string_view to_string(Phase phase);
std::optional<Phase> phase_from_string(std::string_view text);

struct DataflowRow
{
  std::string uuid;
  std::string name;
  Phase phase = Phase::Spawning;
  std::vector<std::string> machines;
  std::chrono::system_clock::time_point started_at;
  std::string detail;
};

std::string to_json(const DataflowRow & row);
DataflowRow dataflow_row_from_json(std::string_view text);
/// "2026-01-02T03:04:05Z"
std::string format_utc(std::chrono::system_clock::time_point t);

/// Global control service: partitions dataflows, dispatches them to
/// registered daemons, runs the readiness barrier and answers CLI requests.
/// All state is owned by one event loop.
class Coordinator
{
public:
  /// Binds the control listener. Throws Error(IoError | InvalidArgument).
  explicit Coordinator(CoordinatorConfig config);
  ~Coordinator();

  Coordinator(const Coordinator &) = delete;
  Coordinator & operator=(const Coordinator &) = delete;

  std::uint16_t port() const {return port_;}
  io::HostPort address() const;

  /// Runs the event loop on a background thread.
  void start();
  /// Runs the event loop on the calling thread until shutdown() or a
  /// destroy request.
  void run();
  void shutdown();
  void join();

  /// Registered machine ids, earliest registration first.
  std::vector<std::string> daemons() const;
  std::vector<DataflowRow> list() const;
  std::vector<std::string> audit_log() const;
  /// Number of AllNodesReady messages sent for `uuid`.
  std::size_t barrier_broadcasts(const std::string & uuid) const;

  bool wait_daemons(std::size_t count, std::chrono::milliseconds timeout) const;
  /// Waits until `uuid` reaches `phase` or a terminal phase; returns the
  /// phase reached, if any.
  std::optional<Phase> wait_phase(
    const std::string & uuid, Phase phase, std::chrono::milliseconds timeout) const;

private:
  struct Impl;
  CoordinatorConfig config_;
  std::uint16_t port_ = 0;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
};

/// One request/reply exchange with a coordinator.
/// Throws Error(ConnectFailed | ConnectionClosed | Timeout).
proto::CliReply cli_call(
  const io::HostPort & coordinator, const proto::CliRequest & request,
  std::chrono::milliseconds timeout = std::chrono::seconds(120));

}  // namespace miniflow

#endif  // MINIFLOW__COORDINATOR_HPP_
