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


#include "miniflow/coordinator.hpp"

#include <poll.h>

#include <algorithm>
#include <condition_variable>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <utility>

#include <spdlog/spdlog.h>

#include "json.hpp"

#include "miniflow/dfspec.hpp"
#include "miniflow/error.hpp"
#include "miniflow/log.hpp"

namespace miniflow
{

namespace
{

using Clock = std::chrono::steady_clock;
using proto::Message;
using proto::NodeState;

constexpr std::string_view kPhaseNames[] = {
  "spawning", "ready", "running", "stopping", "finished", "failed"};

bool terminal(Phase p)
{
  return p == Phase::Finished || p == Phase::Failed;
}

std::string error_text(const Error & e)
{
  std::string out(to_string(e.code()));
  if (!e.detail().empty()) {
    out += ": " + e.detail();
  }
  return out;
}

/// Splits "Code: detail" when Code names an error code.
std::pair<std::string, std::string> split_error(const std::string & text, Errc fallback)
{
  const auto colon = text.find(": ");
  if (colon != std::string::npos) {
    const auto head = text.substr(0, colon);
    for (int i = 0; i <= static_cast<int>(Errc::Timeout); ++i) {
      if (to_string(static_cast<Errc>(i)) == head) {
        return {head, text.substr(colon + 2)};
      }
    }
  }
  return {std::string(to_string(fallback)), text};
}

proto::CliReply error_reply(const std::string & text)
{
  return proto::CliReply{false, {text}};
}

}  // namespace

std::string_view to_string(Phase phase)
{
  return kPhaseNames[static_cast<int>(phase)];
}

std::optional<Phase> phase_from_string(std::string_view text)
{
  for (int i = 0; i < 6; ++i) {
    if (kPhaseNames[i] == text) {
      return static_cast<Phase>(i);
    }
  }
  return std::nullopt;
}

std::string format_utc(std::chrono::system_clock::time_point t)
{
  const auto secs = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  ::gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string to_json(const DataflowRow & row)
{
  nlohmann::json j;
  j["uuid"] = row.uuid;
  j["name"] = row.name;
  j["phase"] = std::string(to_string(row.phase));
  j["machines"] = row.machines;
  j["started_at"] = format_utc(row.started_at);
  j["started_at_ns"] = std::chrono::duration_cast<std::chrono::nanoseconds>(
    row.started_at.time_since_epoch()).count();
  j["detail"] = row.detail;
  return j.dump();
}

DataflowRow dataflow_row_from_json(std::string_view text)
{
  try {
    const auto j = nlohmann::json::parse(text);
    DataflowRow row;
    row.uuid = j.at("uuid").get<std::string>();
    row.name = j.at("name").get<std::string>();
    const auto phase = phase_from_string(j.at("phase").get<std::string>());
    if (!phase) {
      fail(Errc::MalformedMessage, "unknown phase");
    }
    row.phase = *phase;
    row.machines = j.at("machines").get<std::vector<std::string>>();
    row.started_at = std::chrono::system_clock::time_point(
      std::chrono::duration_cast<std::chrono::system_clock::duration>(
        std::chrono::nanoseconds(j.at("started_at_ns").get<std::int64_t>())));
    row.detail = j.value("detail", "");
    return row;
  } catch (const nlohmann::json::exception & e) {
    fail(Errc::MalformedMessage, e.what());
  }
}

struct Coordinator::Impl
{
  struct Conn
  {
    enum class Kind {Unknown, Daemon, Cli};

    Conn(io::UniqueFd fd, Clock::time_point now)
    : link(std::move(fd)), last_seen(now) {}

    Kind kind = Kind::Unknown;
    io::Connection link;
    std::string machine;
    Clock::time_point last_seen;
    bool closed = false;
  };

  struct DaemonInfo
  {
    std::uint64_t conn = 0;
    std::uint64_t order = 0;
    std::string host;
    std::uint16_t port = 0;
  };

  struct MachineState
  {
    bool spawn_ok = false;
    bool finished = false;
  };

  struct NodeInfo
  {
    std::string machine;
    NodeState state = NodeState::Spawned;
    bool ready = false;
    bool running = false;
    std::string detail;
  };

  struct Dataflow
  {
    std::string uuid;
    std::string name;
    Phase phase = Phase::Spawning;
    std::map<std::string, MachineState> machines;
    std::map<std::string, NodeInfo> nodes;
    std::chrono::system_clock::time_point started_at;
    std::uint64_t seq = 0;
    std::string failure;
    std::size_t barrier_count = 0;
    std::optional<std::uint64_t> start_waiter;
    std::vector<std::uint64_t> stop_waiters;
    Clock::time_point deadline;
  };

  explicit Impl(const CoordinatorConfig & c)
  : config(c)
  {
    if (config.audit_file) {
      audit_out.open(*config.audit_file, std::ios::app);
    }
  }

  const CoordinatorConfig & config;
  mutable std::mutex mu;
  mutable std::condition_variable cv;
  io::Waker waker;
  io::UniqueFd listener;
  std::map<std::uint64_t, std::unique_ptr<Conn>> conns;
  std::uint64_t next_conn_id = 1;
  std::map<std::string, DaemonInfo> daemons;
  std::uint64_t next_daemon_order = 0;
  std::map<std::string, Dataflow> dataflows;
  std::uint64_t next_dataflow_seq = 0;
  struct LogsWaiter
  {
    std::uint64_t cli = 0;
    std::string machine;
  };
  std::map<std::uint64_t, LogsWaiter> logs_waiters;  // by request id
  std::uint64_t next_request_id = 1;
  std::vector<std::string> audit;
  std::ofstream audit_out;
  bool stop_requested = false;
  bool loop_running = false;
  std::optional<std::uint64_t> destroy_waiter;
  Clock::time_point destroy_deadline;

  // ---- helpers -----------------------------------------------------------

  void note(std::string line)
  {
    spdlog::debug("[coordinator] {}", line);
    if (audit_out) {
      audit_out << line << '\n';
      audit_out.flush();
    }
    audit.push_back(std::move(line));
    cv.notify_all();
  }

  Conn * conn(std::optional<std::uint64_t> id)
  {
    if (!id) {
      return nullptr;
    }
    auto it = conns.find(*id);
    return it == conns.end() || it->second->closed ? nullptr : it->second.get();
  }

  void reply(std::optional<std::uint64_t> cli, const proto::CliReply & msg)
  {
    if (auto * c = conn(cli)) {
      c->link.send(msg);
    }
  }

  void send_to(const std::string & machine, const Message & msg)
  {
    auto it = daemons.find(machine);
    if (it == daemons.end()) {
      return;
    }
    if (auto * c = conn(it->second.conn)) {
      c->link.send(msg);
    }
  }

  void set_phase(Dataflow & df, Phase phase)
  {
    if (df.phase == phase) {
      return;
    }
    df.phase = phase;
    note("phase " + df.uuid + " " + std::string(to_string(phase)));
  }

  std::string default_machine() const
  {
    std::string best;
    std::uint64_t order = UINT64_MAX;
    for (const auto & [machine, info] : daemons) {
      if (info.order < order) {
        order = info.order;
        best = machine;
      }
    }
    return best;
  }

  Dataflow * resolve(const std::string & key)
  {
    if (auto it = dataflows.find(key); it != dataflows.end()) {
      return &it->second;
    }
    Dataflow * best = nullptr;
    for (auto & [uuid, df] : dataflows) {
      if (df.name != key || key.empty()) {
        continue;
      }
      const bool better = best == nullptr ||
        (terminal(best->phase) && !terminal(df.phase)) ||
        (terminal(best->phase) == terminal(df.phase) && df.seq > best->seq);
      if (better) {
        best = &df;
      }
    }
    return best;
  }

  DataflowRow row_of(const Dataflow & df) const
  {
    DataflowRow row;
    row.uuid = df.uuid;
    row.name = df.name;
    row.phase = df.phase;
    for (const auto & [machine, st] : df.machines) {
      row.machines.push_back(machine);
    }
    row.started_at = df.started_at;
    row.detail = df.failure;
    return row;
  }

  // ---- dataflow lifecycle ------------------------------------------------

  void start_dataflow(std::uint64_t cli, const std::vector<std::string> & args)
  {
    if (args.empty()) {
      fail(Errc::InvalidArgument, "start needs the dataflow specification");
    }
    const auto name = args.size() > 1 ? args[1] : std::string();
    const auto working_dir = args.size() > 2 ? args[2] : std::string();
    const auto spec = dfspec::parse(args[0]);
    const auto diags = dfspec::validate(spec);
    if (dfspec::has_errors(diags)) {
      std::string text;
      for (const auto & d : diags) {
        if (d.severity == dfspec::Severity::Error) {
          text += (text.empty() ? "" : "; ") + dfspec::format(d);
        }
      }
      fail(Errc::ValidationFailed, text);
    }
    if (!name.empty()) {
      for (const auto & [uuid, df] : dataflows) {
        if (df.name == name && !terminal(df.phase)) {
          fail(Errc::NameInUse, name);
        }
      }
    }
    const auto fallback = default_machine();
    for (const auto & node : spec.nodes) {
      const auto machine = dfspec::machine_of(node, fallback);
      if (machine.empty()) {
        fail(Errc::UnknownMachine, "no daemon is registered");
      }
      if (daemons.count(machine) == 0) {
        fail(Errc::UnknownMachine, machine);
      }
    }
    auto subs = dfspec::partition(spec, fallback);

    Dataflow df;
    do {
      df.uuid = proto::random_uuid();
    } while (dataflows.count(df.uuid) != 0);
    df.name = name;
    df.started_at = std::chrono::system_clock::now();
    df.seq = next_dataflow_seq++;
    df.start_waiter = cli;
    df.deadline = Clock::now() + config.spawn_timeout;
    for (const auto & [machine, sub] : subs) {
      df.machines[machine];
      for (const auto & node : sub.nodes) {
        df.nodes[node.id].machine = machine;
      }
    }
    const auto uuid = df.uuid;
    auto & stored = dataflows.emplace(uuid, std::move(df)).first->second;
    note("phase " + uuid + " spawning");

    proto::PeerDirectory directory{uuid, {}};
    for (const auto & [machine, st] : stored.machines) {
      const auto & info = daemons.at(machine);
      directory.peers.push_back({machine, info.host, info.port});
    }
    for (auto & [machine, sub] : subs) {
      sub.working_dir = working_dir;
      send_to(machine, directory);
      send_to(machine, proto::SpawnDataflow{uuid, dfspec::to_json(sub)});
      note("dispatch " + uuid + " " + machine);
    }
    spdlog::info("[coordinator] dataflow {} dispatched to {} daemon(s)", uuid, subs.size());
  }

  void try_barrier(Dataflow & df)
  {
    if (df.phase != Phase::Spawning || df.barrier_count != 0) {
      return;
    }
    for (const auto & [machine, st] : df.machines) {
      if (!st.spawn_ok) {
        return;
      }
    }
    for (const auto & [id, node] : df.nodes) {
      if (!node.ready) {
        return;
      }
    }
    set_phase(df, Phase::Ready);
    for (const auto & [machine, st] : df.machines) {
      send_to(machine, proto::AllNodesReady{df.uuid});
      ++df.barrier_count;
      note("all-nodes-ready " + df.uuid + " " + machine);
    }
  }

  void try_running(Dataflow & df)
  {
    if (df.phase != Phase::Ready) {
      return;
    }
    for (const auto & [id, node] : df.nodes) {
      if (!node.running) {
        return;
      }
    }
    set_phase(df, Phase::Running);
    reply(df.start_waiter, proto::CliReply{true, {df.uuid}});
    df.start_waiter.reset();
    cv.notify_all();
  }

  /// Sends StopDataflow to every involved daemon that has not finished.
  void stop_all(Dataflow & df)
  {
    if (!terminal(df.phase)) {
      set_phase(df, Phase::Stopping);
    }
    df.deadline = Clock::now() + config.stop_timeout;
    for (const auto & [machine, st] : df.machines) {
      if (!st.finished) {
        send_to(machine, proto::StopDataflow{df.uuid});
        note("stop " + df.uuid + " " + machine);
      }
    }
    check_finished(df);
  }

  void rollback(Dataflow & df, const std::string & error)
  {
    if (terminal(df.phase)) {
      return;
    }
    spdlog::warn("[coordinator] dataflow {} failed to start: {}", df.uuid, error);
    df.failure = error;
    reply(df.start_waiter, error_reply(error));
    df.start_waiter.reset();
    set_phase(df, Phase::Failed);
    stop_all(df);
  }

  void check_finished(Dataflow & df)
  {
    for (const auto & [machine, st] : df.machines) {
      if (!st.finished) {
        return;
      }
    }
    if (!terminal(df.phase)) {
      set_phase(df, df.failure.empty() ? Phase::Finished : Phase::Failed);
    }
    if (df.start_waiter) {
      reply(df.start_waiter, df.failure.empty() ?
        proto::CliReply{true, {df.uuid}} : error_reply(df.failure));
      df.start_waiter.reset();
    }
    for (auto waiter : df.stop_waiters) {
      reply(waiter, proto::CliReply{true, {df.uuid}});
    }
    df.stop_waiters.clear();
    cv.notify_all();
  }

  void daemon_lost(const std::string & machine)
  {
    spdlog::info("[coordinator] daemon {} disconnected", machine);
    note("lost " + machine);
    daemons.erase(machine);
    for (auto & [uuid, df] : dataflows) {
      auto it = df.machines.find(machine);
      if (it == df.machines.end() || it->second.finished || terminal(df.phase)) {
        continue;
      }
      it->second.finished = true;
      const auto detail = "DaemonUnreachable: machine " + machine;
      spdlog::warn("[coordinator] dataflow {}: {}", uuid, detail);
      if (df.phase == Phase::Spawning) {
        rollback(df, detail);
      } else {
        if (df.failure.empty()) {
          df.failure = detail;
        }
        stop_all(df);
      }
    }
    for (auto it = logs_waiters.begin(); it != logs_waiters.end(); ) {
      if (it->second.machine == machine) {
        reply(it->second.cli, error_reply("DaemonUnreachable: machine " + machine));
        it = logs_waiters.erase(it);
      } else {
        ++it;
      }
    }
  }

  // ---- message handling --------------------------------------------------

  void handle_cli(std::uint64_t id, const proto::CliRequest & req)
  {
    try {
      switch (req.verb) {
        case proto::CliVerb::Start:
          start_dataflow(id, req.args);
          break;
        case proto::CliVerb::Stop: {
            if (req.args.empty()) {
              fail(Errc::InvalidArgument, "stop needs a uuid or name");
            }
            auto * df = resolve(req.args[0]);
            if (df == nullptr) {
              fail(Errc::NotFound, req.args[0]);
            }
            if (terminal(df->phase) || df->phase == Phase::Stopping) {
              fail(Errc::AlreadyStopped, df->uuid);
            }
            if (df->phase == Phase::Spawning && df->failure.empty()) {
              df->failure = "stopped before all nodes were ready";
            }
            df->stop_waiters.push_back(id);
            stop_all(*df);
            break;
          }
        case proto::CliVerb::List: {
            std::vector<const Dataflow *> ordered;
            for (const auto & [uuid, df] : dataflows) {
              ordered.push_back(&df);
            }
            std::sort(ordered.begin(), ordered.end(), [](auto * a, auto * b) {
                return a->seq < b->seq;
              });
            proto::CliReply out{true, {}};
            for (const auto * df : ordered) {
              out.items.push_back(to_json(row_of(*df)));
            }
            reply(id, out);
            break;
          }
        case proto::CliVerb::Logs: {
            if (req.args.size() < 2) {
              fail(Errc::InvalidArgument, "logs needs a dataflow and a node");
            }
            auto * df = resolve(req.args[0]);
            if (df == nullptr) {
              fail(Errc::NotFound, "dataflow " + req.args[0]);
            }
            auto node = df->nodes.find(req.args[1]);
            if (node == df->nodes.end()) {
              fail(Errc::NotFound, "node " + req.args[1]);
            }
            const auto & machine = node->second.machine;
            auto d = daemons.find(machine);
            if (d == daemons.end() || conn(d->second.conn) == nullptr) {
              fail(Errc::DaemonUnreachable, "machine " + machine);
            }
            const auto request_id = next_request_id++;
            logs_waiters[request_id] = LogsWaiter{id, machine};
            send_to(machine, proto::LogsRequest{request_id, df->uuid, req.args[1]});
            break;
          }
        case proto::CliVerb::Destroy:
          note("destroy");
          for (const auto & [machine, info] : daemons) {
            send_to(machine, proto::Shutdown{});
          }
          destroy_waiter = id;
          destroy_deadline = Clock::now() + std::chrono::seconds(10);
          break;
        case proto::CliVerb::Check: {
            nlohmann::json j;
            std::vector<std::string> machines;
            for (const auto & [machine, info] : daemons) {
              machines.push_back(machine);
            }
            j["daemons"] = machines;
            reply(id, proto::CliReply{true, {j.dump()}});
            break;
          }
      }
    } catch (const Error & e) {
      reply(id, error_reply(error_text(e)));
    } catch (const std::exception & e) {
      reply(id, error_reply(std::string("InvalidArgument: ") + e.what()));
    }
  }

  void handle_daemon(Conn & c, const Message & msg)
  {
    const auto & machine = c.machine;
    auto find_df = [&](const std::string & uuid) -> Dataflow * {
        auto it = dataflows.find(uuid);
        if (it == dataflows.end() || it->second.machines.count(machine) == 0) {
          spdlog::warn("[coordinator] {} from {} for unknown dataflow {}",
            proto::name_of(msg), machine, uuid);
          return nullptr;
        }
        return &it->second;
      };

    if (const auto * r = std::get_if<proto::SpawnResult>(&msg)) {
      auto * df = find_df(r->dataflow_uuid);
      if (df == nullptr) {
        return;
      }
      note("spawn-result " + df->uuid + " " + machine + (r->ok ? " ok" : " failed"));
      if (r->ok) {
        df->machines[machine].spawn_ok = true;
        try_barrier(*df);
      } else {
        auto [code, detail] = split_error(r->error, Errc::SpawnFailed);
        rollback(*df, code + ": machine " + machine + ": " + detail);
      }
    } else if (const auto * s = std::get_if<proto::NodeStatus>(&msg)) {
      auto * df = find_df(s->dataflow_uuid);
      if (df == nullptr) {
        return;
      }
      auto node = df->nodes.find(s->node_id);
      if (node == df->nodes.end() || node->second.machine != machine) {
        spdlog::warn("[coordinator] status for unknown node {}/{}", s->dataflow_uuid, s->node_id);
        return;
      }
      if (terminal(df->phase) && df->machines[machine].finished) {
        spdlog::info("[coordinator] ignoring status of {}/{} for a finished dataflow",
          s->dataflow_uuid, s->node_id);
        return;
      }
      auto & info = node->second;
      info.state = s->state;
      info.detail = s->detail;
      switch (s->state) {
        case NodeState::Ready:
          info.ready = true;
          note("ready " + df->uuid + " " + s->node_id);
          try_barrier(*df);
          break;
        case NodeState::Running:
          if (!s->detail.empty()) {
            spdlog::warn("[coordinator] {}/{}: {}", df->uuid, s->node_id, s->detail);
            break;
          }
          info.running = true;
          try_running(*df);
          break;
        case NodeState::Failed:
          note("failed " + df->uuid + " " + s->node_id);
          if ((df->phase == Phase::Ready || df->phase == Phase::Running) &&
            !config.keep_running)
          {
            df->failure = "NodeFailed: node " + s->node_id + ": " + s->detail;
            spdlog::warn("[coordinator] dataflow {}: {}", df->uuid, df->failure);
            stop_all(*df);
          }
          break;
        default:
          break;
      }
    } else if (const auto * f = std::get_if<proto::DataflowFinished>(&msg)) {
      auto * df = find_df(f->dataflow_uuid);
      if (df == nullptr) {
        return;
      }
      note("finished " + df->uuid + " " + machine);
      df->machines[machine].finished = true;
      check_finished(*df);
    } else if (const auto * l = std::get_if<proto::LogsReply>(&msg)) {
      auto it = logs_waiters.find(l->request_id);
      if (it != logs_waiters.end()) {
        reply(it->second.cli, proto::CliReply{l->ok, {l->text}});
        logs_waiters.erase(it);
      }
    } else if (const auto * e = std::get_if<proto::DaemonEndpoint>(&msg)) {
      auto & info = daemons.at(machine);
      info.host = e->host;
      info.port = e->port;
    } else if (!std::holds_alternative<proto::Heartbeat>(msg)) {
      spdlog::warn("[coordinator] unexpected {} from daemon {}", proto::name_of(msg), machine);
    }
  }

  void handle_message(std::uint64_t id, Conn & c, const Message & msg)
  {
    c.last_seen = Clock::now();
    if (c.kind == Conn::Kind::Unknown) {
      if (const auto * reg = std::get_if<proto::RegisterDaemon>(&msg)) {
        if (daemons.count(reg->machine_id) != 0) {
          spdlog::error("[coordinator] machine {} is already registered; rejecting", reg->machine_id);
          c.closed = true;
          return;
        }
        c.kind = Conn::Kind::Daemon;
        c.machine = reg->machine_id;
        daemons[c.machine] = DaemonInfo{id, next_daemon_order++, {}, 0};
        note("register " + c.machine);
        spdlog::info("[coordinator] daemon {} registered", c.machine);
        return;
      }
      if (std::holds_alternative<proto::CliRequest>(msg)) {
        c.kind = Conn::Kind::Cli;
      } else {
        spdlog::warn("[coordinator] unexpected {} from an unregistered peer", proto::name_of(msg));
        c.closed = true;
        return;
      }
    }
    if (c.kind == Conn::Kind::Cli) {
      if (const auto * req = std::get_if<proto::CliRequest>(&msg)) {
        handle_cli(id, *req);
      } else {
        c.closed = true;
      }
      return;
    }
    handle_daemon(c, msg);
  }

  void on_closed(std::uint64_t id)
  {
    auto & c = *conns.at(id);
    c.closed = true;
    if (c.kind == Conn::Kind::Daemon) {
      auto it = daemons.find(c.machine);
      if (it != daemons.end() && it->second.conn == id) {
        daemon_lost(c.machine);
      }
    }
  }

  void service(std::uint64_t id, short revents)
  {
    auto & c = *conns.at(id);
    if (c.closed) {
      return;
    }
    bool open = true;
    if (revents & (POLLIN | POLLHUP | POLLERR)) {
      open = c.link.receive();
      try {
        while (auto msg = c.link.next()) {
          handle_message(id, c, *msg);
          if (c.closed) {
            break;
          }
        }
      } catch (const Error & e) {
        spdlog::warn("[coordinator] protocol error: {}", error_text(e));
        open = false;
      }
    }
    if (open && !c.closed && (revents & POLLOUT)) {
      open = c.link.flush();
    }
    if (!open || c.closed) {
      on_closed(id);
    }
  }

  void on_time(Clock::time_point now)
  {
    for (auto & [id, c] : conns) {
      if (!c->closed && c->kind == Conn::Kind::Daemon &&
        now - c->last_seen > config.heartbeat_timeout)
      {
        spdlog::warn("[coordinator] daemon {} missed its heartbeats", c->machine);
        on_closed(id);
      }
    }
    for (auto & [uuid, df] : dataflows) {
      if (df.phase == Phase::Spawning && now >= df.deadline) {
        rollback(df, "ReadinessTimeout: dataflow was not ready in time");
      } else if ((df.phase == Phase::Stopping || terminal(df.phase)) && now >= df.deadline) {
        std::string missing;
        for (auto & [machine, st] : df.machines) {
          if (!st.finished) {
            missing += (missing.empty() ? "" : ", ") + machine;
            st.finished = true;
          }
        }
        if (!missing.empty()) {
          if (df.failure.empty()) {
            df.failure = "DaemonUnreachable: no DataflowFinished from machine " + missing;
          }
          set_phase(df, Phase::Failed);
          check_finished(df);
        }
      }
    }
  }

  void flush_all()
  {
    for (auto it = conns.begin(); it != conns.end(); ) {
      auto & c = *it->second;
      if (!c.closed && c.link.wants_write() && !c.link.flush()) {
        on_closed(it->first);
      }
      if (c.closed) {
        it = conns.erase(it);
      } else {
        ++it;
      }
    }
  }

  bool destroy_complete(Clock::time_point now) const
  {
    if (!destroy_waiter) {
      return false;
    }
    return daemons.empty() || now >= destroy_deadline;
  }

  void loop()
  {
    std::unique_lock lock(mu);
    loop_running = true;
    cv.notify_all();
    std::vector<pollfd> fds;
    std::vector<std::uint64_t> owners;  // 0: waker, 1: listener, else conn id + 1
    while (!stop_requested) {
      const auto now = Clock::now();
      if (destroy_complete(now)) {
        reply(destroy_waiter, proto::CliReply{true, {}});
        if (auto * c = conn(destroy_waiter)) {
          c->link.drain_output(std::chrono::milliseconds(1000));
        }
        break;
      }
      flush_all();
      fds.clear();
      owners.clear();
      fds.push_back({waker.fd(), POLLIN, 0});
      owners.push_back(0);
      fds.push_back({listener.get(), POLLIN, 0});
      owners.push_back(1);
      for (const auto & [id, c] : conns) {
        short events = POLLIN;
        if (c->link.wants_write()) {
          events |= POLLOUT;
        }
        fds.push_back({c->link.fd(), events, 0});
        owners.push_back(id + 1);
      }
      lock.unlock();
      ::poll(fds.data(), fds.size(), 200);
      lock.lock();
      for (std::size_t i = 0; i < fds.size(); ++i) {
        if (fds[i].revents == 0) {
          continue;
        }
        if (owners[i] == 0) {
          waker.drain();
        } else if (owners[i] == 1) {
          while (auto fd = io::accept_nonblocking(listener.get())) {
            const auto id = next_conn_id++;
            conns.emplace(id, std::make_unique<Conn>(std::move(fd), Clock::now()));
          }
        } else if (conns.count(owners[i] - 1) != 0) {
          service(owners[i] - 1, fds[i].revents);
        }
      }
      on_time(Clock::now());
      cv.notify_all();
    }
    for (auto & [id, c] : conns) {
      if (!c->closed && c->link.wants_write()) {
        c->link.drain_output(std::chrono::milliseconds(200));
      }
    }
    conns.clear();
    listener.reset();
    loop_running = false;
    stop_requested = true;
    cv.notify_all();
  }
};

Coordinator::Coordinator(CoordinatorConfig config)
: config_(std::move(config))
{
  init_logging();
  impl_ = std::make_unique<Impl>(config_);
  impl_->listener = io::tcp_listen(config_.bind);
  port_ = io::local_port(impl_->listener.get());
}

Coordinator::~Coordinator()
{
  shutdown();
  join();
}

io::HostPort Coordinator::address() const
{
  auto host = config_.bind.host;
  if (host.empty() || host == "0.0.0.0") {
    host = "127.0.0.1";
  }
  return {host, port_};
}

void Coordinator::start()
{
  thread_ = std::thread([this] {run();});
  std::unique_lock lock(impl_->mu);
  impl_->cv.wait(lock, [&] {return impl_->loop_running || impl_->stop_requested;});
}

void Coordinator::run()
{
  impl_->loop();
}

void Coordinator::shutdown()
{
  std::lock_guard lock(impl_->mu);
  impl_->stop_requested = true;
  impl_->waker.wake();
}

void Coordinator::join()
{
  if (thread_.joinable()) {
    thread_.join();
  }
}

std::vector<std::string> Coordinator::daemons() const
{
  std::lock_guard lock(impl_->mu);
  std::vector<std::pair<std::uint64_t, std::string>> ordered;
  for (const auto & [machine, info] : impl_->daemons) {
    ordered.emplace_back(info.order, machine);
  }
  std::sort(ordered.begin(), ordered.end());
  std::vector<std::string> out;
  for (auto & [order, machine] : ordered) {
    out.push_back(std::move(machine));
  }
  return out;
}

std::vector<DataflowRow> Coordinator::list() const
{
  std::lock_guard lock(impl_->mu);
  std::vector<DataflowRow> out;
  for (const auto & [uuid, df] : impl_->dataflows) {
    out.push_back(impl_->row_of(df));
  }
  return out;
}

std::vector<std::string> Coordinator::audit_log() const
{
  std::lock_guard lock(impl_->mu);
  return impl_->audit;
}

std::size_t Coordinator::barrier_broadcasts(const std::string & uuid) const
{
  std::lock_guard lock(impl_->mu);
  auto it = impl_->dataflows.find(uuid);
  return it == impl_->dataflows.end() ? 0 : it->second.barrier_count;
}

bool Coordinator::wait_daemons(std::size_t count, std::chrono::milliseconds timeout) const
{
  std::unique_lock lock(impl_->mu);
  return impl_->cv.wait_for(lock, timeout, [&] {return impl_->daemons.size() >= count;});
}

std::optional<Phase> Coordinator::wait_phase(
  const std::string & uuid, Phase phase, std::chrono::milliseconds timeout) const
{
  std::unique_lock lock(impl_->mu);
  auto current = [&]() -> std::optional<Phase> {
      auto it = impl_->dataflows.find(uuid);
      if (it == impl_->dataflows.end()) {
        return std::nullopt;
      }
      return it->second.phase;
    };
  impl_->cv.wait_for(lock, timeout, [&] {
      const auto p = current();
      return p && (*p == phase || terminal(*p));
    });
  return current();
}

proto::CliReply cli_call(
  const io::HostPort & coordinator, const proto::CliRequest & request,
  std::chrono::milliseconds timeout)
{
  auto fd = io::tcp_connect(coordinator, std::chrono::milliseconds(2000));
  io::FdStream stream(fd.get());
  proto::write_frame(stream, request);
  if (!stream.wait_readable(timeout)) {
    fail(Errc::Timeout, "no reply from coordinator " + coordinator.str());
  }
  auto msg = proto::read_frame(stream);
  auto * reply = std::get_if<proto::CliReply>(&msg);
  if (reply == nullptr) {
    fail(Errc::MalformedMessage, "expected CliReply");
  }
  return std::move(*reply);
}

}  // namespace miniflow
