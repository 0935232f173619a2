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

#include "miniflow/daemon.hpp"

#include <poll.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <functional>
#include <future>
#include <mutex>
#include <set>
#include <sstream>
#include <utility>

#include <spdlog/spdlog.h>

#include "miniflow/clock.hpp"
#include "miniflow/envelope.hpp"
#include "miniflow/error.hpp"
#include "miniflow/log.hpp"
#include "miniflow/process.hpp"

namespace miniflow
{

namespace
{

using Clock = std::chrono::steady_clock;
using proto::Message;

std::atomic<int> g_daemon_count{0};

std::string sanitize(const std::string & text)
{
  std::string out;
  for (char c : text) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
      (c >= '0' && c <= '9') || c == '.' || c == '_';
    out += ok ? c : '_';
  }
  return out.empty() ? "_" : out;
}

std::string error_text(const Error & e)
{
  std::string out(to_string(e.code()));
  if (!e.detail().empty()) {
    out += ": " + e.detail();
  }
  return out;
}

struct Receiver
{
  std::string node;
  std::string input;
};

struct Route
{
  std::vector<Receiver> local;
  std::set<std::string> remote;
};

struct NodeRt
{
  dfspec::NodeSpec spec;
  pid_t pid = -1;
  io::UniqueFd pidfd;
  bool exited = false;
  std::optional<std::uint64_t> conn;
  bool registered = false;
  bool ready = false;
  bool disconnected = false;
  bool stop_sent = false;
  bool killed = false;
  proto::NodeState state = proto::NodeState::Spawned;
  std::string detail;
  std::deque<Message> queue;
  std::set<std::string> delivered_inputs;

  bool can_receive() const {return conn.has_value() && !disconnected && !stop_sent;}
};

struct TimerRt
{
  std::string node;
  std::string input;
  TimerSchedule schedule;
};

struct Instance
{
  std::string uuid;
  dfspec::SubDataflow sub;
  std::vector<std::string> order;
  std::map<std::string, NodeRt> nodes;
  std::map<std::pair<std::string, std::string>, Route> routes;
  std::map<std::pair<std::string, std::string>, std::vector<Receiver>> remote_inbound;
  std::vector<TimerRt> timers;
  bool spawn_reported = false;
  bool barrier = false;
  bool stopping = false;
  bool stragglers_killed = false;
  Clock::time_point ready_deadline;
  Clock::time_point stop_deadline;
  std::deque<std::pair<std::string, Message>> deferred;
  std::deque<proto::RemoteOutput> pending_remote;
  std::set<std::string> unreachable_reported;
  std::string failure;
};

struct BlockUse
{
  std::uint64_t block_id = 0;
  std::uint64_t generation = 0;
  std::uint64_t length = 0;
  std::string uuid;
  std::string sender;
  std::string output_id;
  bool sender_hold = false;  // granted but not yet confirmed
  std::vector<Receiver> receivers;
  std::map<std::string, std::uint32_t> pending;

  std::uint32_t references() const
  {
    std::uint32_t n = sender_hold ? 1 : 0;
    for (const auto & [node, count] : pending) {
      n += count;
    }
    return n;
  }
};

struct Conn
{
  enum class Kind {Node, PeerIn, PeerOut, Coordinator};

  Conn(Kind k, io::UniqueFd fd)
  : kind(k), link(std::move(fd)) {}

  Kind kind;
  io::Connection link;
  std::string uuid;
  std::string node;
  std::string machine;
  bool close_after_flush = false;
  bool closed = false;
};

}  // namespace

std::filesystem::path default_run_dir()
{
  if (const char * xdg = std::getenv("XDG_RUNTIME_DIR"); xdg != nullptr && *xdg != '\0') {
    return std::filesystem::path(xdg) / "miniflow";
  }
  return std::filesystem::temp_directory_path() / ("miniflow-" + std::to_string(::getuid()));
}

TimerSchedule::TimerSchedule(std::chrono::nanoseconds interval, Clock::time_point origin)
: interval_(interval), origin_(origin), deadline_(origin + interval)
{
  if (interval_.count() <= 0) {
    fail(Errc::InvalidArgument, "timer interval must be positive");
  }
}

bool TimerSchedule::poll(Clock::time_point now)
{
  if (now < deadline_) {
    return false;
  }
  const auto elapsed = now - origin_;
  const auto k = elapsed / interval_ + 1;
  deadline_ = origin_ + k * interval_;
  return true;
}

struct Daemon::Impl
{
  Impl(Daemon & owner, const DaemonConfig & cfg)
  : self(owner), config(cfg),
    pool(PoolConfig{cfg.max_free_bytes,
        cfg.shm_factory ? cfg.shm_factory : posix_shm_factory(), owner.daemon_id_}) {}

  Daemon & self;
  const DaemonConfig & config;
  Pool pool;
  io::Waker waker;
  io::UniqueFd node_listener;
  io::UniqueFd peer_listener;

  std::map<std::uint64_t, std::unique_ptr<Conn>> conns;
  std::uint64_t next_conn_id = 1;
  std::optional<std::uint64_t> coordinator_conn;
  std::map<std::string, std::uint64_t> peer_out;
  std::map<std::string, io::HostPort> peer_addrs;

  std::map<std::string, Instance> instances;
  std::map<std::string, DataflowOutcome> finished;
  std::set<std::string> ever_running;
  std::map<std::string, BlockUse> blocks;
  std::uint64_t next_generation = 1;

  DaemonStats counters;
  std::vector<std::string> audit;

  mutable std::mutex mu;
  std::condition_variable cv;
  std::deque<std::function<void()>> tasks;
  bool loop_running = false;
  bool stop_requested = false;
  bool shutting_down = false;
  Clock::time_point next_heartbeat{};

  // ---- connections -------------------------------------------------------

  std::uint64_t add_conn(Conn::Kind kind, io::UniqueFd fd)
  {
    const auto id = next_conn_id++;
    conns.emplace(id, std::make_unique<Conn>(kind, std::move(fd)));
    return id;
  }

  Conn * conn(std::optional<std::uint64_t> id)
  {
    if (!id) {
      return nullptr;
    }
    auto it = conns.find(*id);
    return it == conns.end() || it->second->closed ? nullptr : it->second.get();
  }

  void report(const Message & msg)
  {
    if (auto * c = conn(coordinator_conn)) {
      c->link.send(msg);
      return;
    }
    if (!config.coordinator) {
      local_report(msg);
    }
  }

  // Local mode stands in for the coordinator's reactions.
  void local_report(const Message & msg)
  {
    if (const auto * r = std::get_if<proto::SpawnResult>(&msg)) {
      if (r->ok) {
        if (auto it = instances.find(r->dataflow_uuid); it != instances.end()) {
          open_barrier(it->second);
        }
      }
    } else if (const auto * s = std::get_if<proto::NodeStatus>(&msg)) {
      if (s->state == proto::NodeState::Failed && config.stop_on_node_failure) {
        if (auto it = instances.find(s->dataflow_uuid); it != instances.end()) {
          if (it->second.failure.empty()) {
            it->second.failure = "node " + s->node_id + " failed: " + s->detail;
          }
          stop_instance(it->second);
        }
      }
    }
  }

  void note_audit(std::string line)
  {
    spdlog::debug("[{}] {}", self.daemon_id_, line);
    audit.push_back(std::move(line));
  }

  // ---- spawning ----------------------------------------------------------

  void spawn_instance(const std::string & uuid, const dfspec::SubDataflow & sub)
  {
    if (instances.count(uuid) != 0 || finished.count(uuid) != 0) {
      fail(Errc::DuplicateDataflow, uuid);
    }
    Instance inst;
    inst.uuid = uuid;
    inst.sub = sub;
    std::set<std::string> local;
    for (const auto & node : sub.nodes) {
      if (!local.insert(node.id).second) {
        fail(Errc::InvalidArgument, "duplicate node id " + node.id);
      }
    }
    for (const auto & node : sub.nodes) {
      for (const auto & out : node.outputs) {
        inst.routes[{node.id, out}];
      }
      for (const auto & in : node.inputs) {
        if (const auto * src = std::get_if<dfspec::UserOutput>(&in.source)) {
          if (local.count(src->node_id) != 0) {
            inst.routes[{src->node_id, src->output_id}].local.push_back({node.id, in.id});
          }
        }
      }
    }
    for (const auto & ro : sub.remote_outputs) {
      auto & dest = inst.routes[{ro.node_id, ro.output_id}].remote;
      dest.insert(ro.destinations.begin(), ro.destinations.end());
    }
    for (const auto & ri : sub.remote_inputs) {
      inst.remote_inbound[{ri.source_node, ri.source_output}].push_back({ri.node_id, ri.input_id});
    }

    inst.order = dfspec::spawn_order(sub.nodes);
    std::vector<pid_t> spawned;
    try {
      for (const auto & id : inst.order) {
        const auto & spec = *std::find_if(
          sub.nodes.begin(), sub.nodes.end(), [&](const auto & n) {return n.id == id;});
        process::SpawnOptions opts;
        try {
          opts.args = process::split_command(spec.command);
        } catch (const Error & e) {
          fail(Errc::SpawnFailed, id + ": " + e.detail());
        }
        opts.env = spec.env;
        opts.env["MINIFLOW_NODE_ENDPOINT"] = self.node_endpoint();
        opts.env["MINIFLOW_DATAFLOW_ID"] = uuid;
        opts.env["MINIFLOW_NODE_ID"] = id;
        if (!sub.working_dir.empty()) {
          opts.cwd = sub.working_dir;
        }
        opts.log_path = config.run_dir / uuid / (id + ".log");
        opts.die_with_parent = true;
        process::Child child;
        try {
          child = process::spawn(opts);
        } catch (const Error & e) {
          fail(Errc::SpawnFailed, id + ": " + e.detail());
        }
        spawned.push_back(child.pid);
        NodeRt rt;
        rt.spec = spec;
        rt.pid = child.pid;
        rt.pidfd = std::move(child.pidfd);
        inst.nodes.emplace(id, std::move(rt));
      }
    } catch (...) {
      for (pid_t pid : spawned) {
        process::send_signal(pid, SIGKILL);
        process::wait(pid);
      }
      throw;
    }

    const auto now = Clock::now();
    inst.ready_deadline = now + config.readiness_timeout;
    auto [it, inserted] = instances.emplace(uuid, std::move(inst));
    note_audit("spawn " + uuid);
    spdlog::info("[{}] spawned dataflow {} ({} nodes)", self.daemon_id_, uuid, it->second.nodes.size());
    for (const auto & id : it->second.order) {
      report(proto::NodeStatus{uuid, id, proto::NodeState::Spawned, {}});
    }
    check_all_ready(it->second);
  }

  void check_all_ready(Instance & inst)
  {
    if (inst.spawn_reported || inst.stopping) {
      return;
    }
    for (const auto & [id, node] : inst.nodes) {
      if (!node.ready) {
        return;
      }
    }
    inst.spawn_reported = true;
    report(proto::SpawnResult{inst.uuid, true, {}});
  }

  void open_barrier(Instance & inst)
  {
    if (inst.barrier || inst.stopping) {
      return;
    }
    inst.barrier = true;
    ever_running.insert(inst.uuid);
    note_audit("barrier " + inst.uuid);
    const auto now = Clock::now();
    for (const auto & id : inst.order) {
      auto & node = inst.nodes.at(id);
      node.state = proto::NodeState::Running;
      report(proto::NodeStatus{inst.uuid, id, proto::NodeState::Running, {}});
      for (const auto & in : node.spec.inputs) {
        if (const auto * t = std::get_if<dfspec::Timer>(&in.source)) {
          inst.timers.push_back(
            {id, in.id, TimerSchedule(std::chrono::milliseconds(t->interval_ms), now)});
        }
      }
    }
    auto deferred = std::move(inst.deferred);
    for (auto & [node, msg] : deferred) {
      handle_node_data(inst, node, msg);
    }
    auto remote = std::move(inst.pending_remote);
    for (auto & msg : remote) {
      deliver_remote(inst, msg);
    }
    // Nodes whose producers already finished before the barrier.
    check_upstream_finished(inst);
    cv.notify_all();
  }

  // ---- delivery ----------------------------------------------------------

  void note_delivery(Instance & inst, NodeRt & node, const std::string & node_id,
    const std::string & input)
  {
    if (!inst.barrier) {
      ++counters.early_deliveries;
    }
    if (node.delivered_inputs.insert(input).second) {
      note_audit("deliver " + inst.uuid + " " + node_id + " " + input);
    }
  }

  void enqueue(Instance & inst, const std::string & node_id, Message msg)
  {
    auto & node = inst.nodes.at(node_id);
    node.queue.push_back(std::move(msg));
    if (config.event_queue_bound && node.queue.size() > *config.event_queue_bound) {
      auto oldest = std::move(node.queue.front());
      node.queue.pop_front();
      ++counters.queue_drops;
      if (const auto * ev = std::get_if<proto::Event>(&oldest)) {
        if (const auto * shm = std::get_if<proto::ShmData>(&ev->data)) {
          drop_reference(node_id, inst.uuid, shm->os_name, shm->generation);
        }
      }
    }
  }

  void deliver_inline(Instance & inst, const std::vector<Receiver> & receivers,
    std::span<const std::byte> envelope)
  {
    for (const auto & r : receivers) {
      auto & node = inst.nodes.at(r.node);
      if (!node.can_receive()) {
        continue;
      }
      note_delivery(inst, node, r.node, r.input);
      enqueue(inst, r.node, proto::Event{proto::EventKind::Input, r.input,
          proto::InlineData{{envelope.begin(), envelope.end()}}});
      ++counters.inline_deliveries;
    }
  }

  void deliver_block(Instance & inst, BlockUse & block, const std::string & os_name)
  {
    for (const auto & r : block.receivers) {
      auto & node = inst.nodes.at(r.node);
      auto pending = block.pending.find(r.node);
      if (pending == block.pending.end() || pending->second == 0 || !node.can_receive()) {
        continue;
      }
      note_delivery(inst, node, r.node, r.input);
      enqueue(inst, r.node, proto::Event{proto::EventKind::Input, r.input,
          proto::ShmData{os_name, 0, block.length, block.generation}});
      ++counters.shm_deliveries;
    }
  }

  std::vector<Receiver> live_receivers(Instance & inst, const std::vector<Receiver> & all)
  {
    std::vector<Receiver> out;
    for (const auto & r : all) {
      if (inst.nodes.at(r.node).can_receive()) {
        out.push_back(r);
      }
    }
    return out;
  }

  BlockUse & new_block(Instance & inst, std::uint64_t size, const std::vector<Receiver> & rcvs,
    bool sender_hold, std::string & os_name_out, std::span<std::byte> & region)
  {
    const auto refs = static_cast<std::uint32_t>(rcvs.size() + (sender_hold ? 1 : 0));
    auto lease = pool.acquire(size, refs);
    BlockUse use;
    use.block_id = lease.block.id;
    use.generation = next_generation++;
    use.length = size;
    use.uuid = inst.uuid;
    use.sender_hold = sender_hold;
    use.receivers = rcvs;
    for (const auto & r : rcvs) {
      ++use.pending[r.node];
    }
    os_name_out = lease.block.os_name;
    region = lease.region;
    auto [it, inserted] = blocks.insert_or_assign(lease.block.os_name, std::move(use));
    return it->second;
  }

  void release_one(std::map<std::string, BlockUse>::iterator it)
  {
    pool.release(it->second.block_id);
    if (it->second.references() == 0) {
      blocks.erase(it);
    }
  }

  void drop_reference(const std::string & node_id, const std::string & uuid,
    const std::string & os_name, std::uint64_t generation)
  {
    auto it = blocks.find(os_name);
    if (it == blocks.end() || it->second.generation != generation || it->second.uuid != uuid) {
      ++counters.unknown_drops;
      spdlog::debug("[{}] drop for unknown block {}#{}", self.daemon_id_, os_name, generation);
      return;
    }
    auto pending = it->second.pending.find(node_id);
    if (pending == it->second.pending.end() || pending->second == 0) {
      ++counters.unknown_drops;
      return;
    }
    --pending->second;
    release_one(it);
  }

  void force_release_node(Instance & inst, const std::string & node_id)
  {
    for (auto it = blocks.begin(); it != blocks.end(); ) {
      auto next = std::next(it);
      auto & use = it->second;
      if (use.uuid == inst.uuid) {
        std::uint32_t n = 0;
        if (auto p = use.pending.find(node_id); p != use.pending.end()) {
          n += p->second;
          p->second = 0;
        }
        if (use.sender == node_id && use.sender_hold) {
          // The sender died between grant and confirm: nobody will see it.
          use.sender_hold = false;
          ++n;
          for (auto & [rcv, count] : use.pending) {
            n += count;
            count = 0;
          }
        }
        for (std::uint32_t i = 0; i < n; ++i) {
          pool.release(use.block_id);
        }
        counters.forced_releases += n;
        if (use.references() == 0) {
          blocks.erase(it);
        }
      }
      it = next;
    }
  }

  void send_remote(Instance & inst, const std::string & node_id, const std::string & output_id,
    const std::set<std::string> & machines, std::span<const std::byte> envelope)
  {
    for (const auto & machine : machines) {
      auto * c = peer_conn(machine);
      if (c == nullptr) {
        ++counters.peer_failures;
        if (inst.unreachable_reported.insert(machine).second) {
          spdlog::warn("[{}] peer {} unreachable", self.daemon_id_, machine);
          report(proto::NodeStatus{inst.uuid, node_id, proto::NodeState::Running,
              "PeerUnreachable: " + machine});
        }
        continue;
      }
      c->link.send(proto::RemoteOutput{inst.uuid, node_id, output_id,
          {envelope.begin(), envelope.end()}});
      ++counters.remote_frames_sent;
    }
  }

  Conn * peer_conn(const std::string & machine)
  {
    if (auto it = peer_out.find(machine); it != peer_out.end()) {
      if (auto * c = conn(it->second)) {
        return c;
      }
      peer_out.erase(it);
    }
    auto addr = peer_addrs.find(machine);
    if (addr == peer_addrs.end()) {
      return nullptr;
    }
    try {
      auto fd = io::tcp_connect(addr->second, std::chrono::milliseconds(1000));
      const auto id = add_conn(Conn::Kind::PeerOut, std::move(fd));
      conns.at(id)->machine = machine;
      peer_out[machine] = id;
      return conns.at(id).get();
    } catch (const Error & e) {
      spdlog::warn("[{}] connect to peer {}: {}", self.daemon_id_, machine, e.detail());
      return nullptr;
    }
  }

  void handle_output_request(Instance & inst, const std::string & node_id,
    const proto::OutputRequest & req)
  {
    auto & node = inst.nodes.at(node_id);
    auto * c = conn(node.conn);
    if (c == nullptr) {
      return;
    }
    proto::BlockGrant grant;
    auto route = inst.routes.find({node_id, req.output_id});
    if (!node.spec.has_output(req.output_id) || route == inst.routes.end()) {
      grant.kind = proto::GrantKind::Rejected;
      grant.error = "UndeclaredOutput: " + req.output_id;
      c->link.send(grant);
      return;
    }
    auto receivers = live_receivers(inst, route->second.local);
    if (receivers.empty() && route->second.remote.empty()) {
      grant.kind = proto::GrantKind::Discard;
    } else if (req.size <= config.inline_threshold || receivers.empty()) {
      grant.kind = proto::GrantKind::Inline;
    } else {
      try {
        std::string os_name;
        std::span<std::byte> region;
        auto & use = new_block(inst, req.size, receivers, true, os_name, region);
        use.sender = node_id;
        use.output_id = req.output_id;
        grant.kind = proto::GrantKind::Shm;
        grant.block = proto::ShmData{os_name, 0, req.size, use.generation};
      } catch (const Error & e) {
        grant.kind = proto::GrantKind::Rejected;
        grant.error = error_text(e);
      }
    }
    c->link.send(grant);
  }

  void handle_send_output(Instance & inst, const std::string & node_id,
    const proto::SendOutput & out)
  {
    auto & node = inst.nodes.at(node_id);
    auto route = inst.routes.find({node_id, out.output_id});
    if (!node.spec.has_output(out.output_id) || route == inst.routes.end()) {
      spdlog::warn("[{}] UnknownRoute {}/{}", self.daemon_id_, node_id, out.output_id);
      return;
    }
    if (const auto * in = std::get_if<proto::InlineData>(&out.data)) {
      deliver_inline(inst, route->second.local, in->bytes);
      send_remote(inst, node_id, out.output_id, route->second.remote, in->bytes);
      return;
    }
    const auto & shm = std::get<proto::ShmData>(out.data);
    auto it = blocks.find(shm.os_name);
    if (it == blocks.end() || it->second.generation != shm.generation ||
      it->second.sender != node_id || !it->second.sender_hold)
    {
      spdlog::warn("[{}] confirm for unknown grant {}#{}", self.daemon_id_, shm.os_name,
        shm.generation);
      return;
    }
    auto & use = it->second;
    use.length = std::min(shm.length, use.length);
    deliver_block(inst, use, shm.os_name);
    if (!route->second.remote.empty()) {
      const auto bytes = pool.block_bytes(use.block_id).first(use.length);
      send_remote(inst, node_id, out.output_id, route->second.remote, bytes);
    }
    use.sender_hold = false;
    release_one(it);
  }

  void handle_node_data(Instance & inst, const std::string & node_id, const Message & msg)
  {
    if (const auto * req = std::get_if<proto::OutputRequest>(&msg)) {
      handle_output_request(inst, node_id, *req);
    } else if (const auto * out = std::get_if<proto::SendOutput>(&msg)) {
      handle_send_output(inst, node_id, *out);
    }
  }

  void deliver_remote(Instance & inst, const proto::RemoteOutput & msg)
  {
    auto it = inst.remote_inbound.find({msg.source_node, msg.output_id});
    if (it == inst.remote_inbound.end()) {
      spdlog::warn("[{}] UnknownRoute remote {}/{}", self.daemon_id_, msg.source_node,
        msg.output_id);
      return;
    }
    auto receivers = live_receivers(inst, it->second);
    if (receivers.empty()) {
      return;
    }
    if (msg.envelope.size() <= config.inline_threshold) {
      deliver_inline(inst, receivers, msg.envelope);
      return;
    }
    try {
      std::string os_name;
      std::span<std::byte> region;
      auto & use = new_block(inst, msg.envelope.size(), receivers, false, os_name, region);
      std::memcpy(region.data(), msg.envelope.data(), msg.envelope.size());
      deliver_block(inst, use, os_name);
    } catch (const Error & e) {
      spdlog::warn("[{}] remote delivery failed: {}", self.daemon_id_, error_text(e));
    }
  }

  void fire_timers(Instance & inst, Clock::time_point now)
  {
    for (auto & timer : inst.timers) {
      if (!timer.schedule.poll(now)) {
        continue;
      }
      auto & node = inst.nodes.at(timer.node);
      if (!node.can_receive()) {
        continue;
      }
      Metadata md;
      md.set(std::string(metadata_keys::kSendTimestamp), std::to_string(now_ns()));
      const auto env = encode(ElementType::U8, 0, md, {});
      note_delivery(inst, node, timer.node, timer.input);
      enqueue(inst, timer.node, proto::Event{proto::EventKind::Input, timer.input,
          proto::InlineData{env}});
      ++counters.timer_ticks;
    }
  }

  // ---- lifecycle ---------------------------------------------------------

  void send_stop(Instance & inst, const std::string & node_id)
  {
    auto & node = inst.nodes.at(node_id);
    if (node.stop_sent || node.exited) {
      return;
    }
    node.stop_sent = true;
    if (node.conn && !node.disconnected) {
      enqueue(inst, node_id, proto::Event{proto::EventKind::Stop, {}, proto::InlineData{}});
    } else {
      process::send_signal(node.pid, SIGTERM);
    }
  }

  void stop_instance(Instance & inst)
  {
    if (inst.stopping) {
      return;
    }
    inst.stopping = true;
    inst.stop_deadline = Clock::now() + config.stop_grace;
    note_audit("stop " + inst.uuid);
    for (const auto & id : inst.order) {
      send_stop(inst, id);
    }
    check_instance_done(inst.uuid);
  }

  void check_upstream_finished(Instance & inst)
  {
    if (!inst.barrier || inst.stopping) {
      return;
    }
    for (auto & [id, node] : inst.nodes) {
      if (node.stop_sent || node.exited || node.spec.inputs.empty()) {
        continue;
      }
      bool all_done = true;
      for (const auto & in : node.spec.inputs) {
        const auto * src = std::get_if<dfspec::UserOutput>(&in.source);
        auto up = src ? inst.nodes.find(src->node_id) : inst.nodes.end();
        if (up == inst.nodes.end() || !up->second.disconnected) {
          all_done = false;
          break;
        }
      }
      if (all_done) {
        send_stop(inst, id);
      }
    }
  }

  void on_node_disconnect(Instance & inst, const std::string & node_id)
  {
    auto & node = inst.nodes.at(node_id);
    if (node.disconnected) {
      return;
    }
    node.disconnected = true;
    node.queue.clear();
    force_release_node(inst, node_id);
    check_upstream_finished(inst);
  }

  void on_node_exit(Instance & inst, const std::string & node_id, const process::ExitStatus & st)
  {
    auto & node = inst.nodes.at(node_id);
    if (node.exited) {
      return;
    }
    node.exited = true;
    node.pidfd.reset();
    if (auto * c = conn(node.conn)) {
      c->closed = true;
    }
    on_node_disconnect(inst, node_id);
    const bool before_ready = !node.ready;
    if (st.success() && !node.killed && !(before_ready && !inst.stopping)) {
      node.state = proto::NodeState::Finished;
      node.detail = st.describe();
    } else {
      node.state = proto::NodeState::Failed;
      node.detail = node.killed ? "killed after stop grace period" : st.describe();
      if (before_ready && !inst.stopping) {
        node.detail = "exited before ready (" + node.detail + ")";
      }
    }
    spdlog::info("[{}] node {}/{} {}: {}", self.daemon_id_, inst.uuid, node_id,
      proto::to_string(node.state), node.detail);
    report(proto::NodeStatus{inst.uuid, node_id, node.state, node.detail});
    if (node.state == proto::NodeState::Failed && !inst.stopping) {
      if (!inst.spawn_reported) {
        inst.spawn_reported = true;
        inst.failure = "node " + node_id + " " + node.detail;
        report(proto::SpawnResult{inst.uuid, false, "SpawnFailed: " + inst.failure});
        stop_instance(inst);
      } else if (!config.coordinator && inst.failure.empty()) {
        inst.failure = "node " + node_id + " failed: " + node.detail;
      }
    }
    check_instance_done(inst.uuid);
  }

  void check_instance_done(std::string uuid)
  {
    auto it = instances.find(uuid);
    if (it == instances.end()) {
      return;
    }
    auto & inst = it->second;
    for (const auto & [id, node] : inst.nodes) {
      if (!node.exited) {
        return;
      }
    }
    for (const auto & [id, node] : inst.nodes) {
      force_release_node(inst, id);
    }
    DataflowOutcome outcome;
    outcome.ok = inst.failure.empty();
    outcome.error = inst.failure;
    for (const auto & [id, node] : inst.nodes) {
      outcome.nodes[id] = NodeOutcome{node.state, node.detail};
      if (node.state == proto::NodeState::Failed && outcome.ok) {
        outcome.ok = false;
        outcome.error = "node " + id + " failed: " + node.detail;
      }
    }
    for (auto & [cid, c] : conns) {
      if (c->kind == Conn::Kind::Node && c->uuid == uuid) {
        c->close_after_flush = true;
      }
    }
    finished[uuid] = std::move(outcome);
    note_audit("finished " + uuid);
    spdlog::info("[{}] dataflow {} finished", self.daemon_id_, uuid);
    instances.erase(it);
    report(proto::DataflowFinished{uuid});
    cv.notify_all();
  }

  // ---- message handling --------------------------------------------------

  void handle_node_message(std::uint64_t conn_id, Conn & c, Message msg)
  {
    if (c.uuid.empty()) {
      const auto * reg = std::get_if<proto::RegisterNode>(&msg);
      proto::NodeConfig reply;
      if (reg == nullptr) {
        reply.error = "expected RegisterNode";
      } else if (auto it = instances.find(reg->dataflow_uuid); it == instances.end()) {
        reply.error = "UnknownDataflow: " + reg->dataflow_uuid;
      } else if (auto n = it->second.nodes.find(reg->node_id); n == it->second.nodes.end()) {
        reply.error = "NotFound: node " + reg->node_id;
      } else if (n->second.registered) {
        reply.error = "node " + reg->node_id + " already registered";
      } else {
        n->second.registered = true;
        n->second.conn = conn_id;
        c.uuid = reg->dataflow_uuid;
        c.node = reg->node_id;
        reply.ok = true;
        reply.outputs = n->second.spec.outputs;
        reply.inline_threshold = config.inline_threshold;
      }
      c.link.send(reply);
      if (!reply.ok) {
        c.close_after_flush = true;
      }
      return;
    }
    auto it = instances.find(c.uuid);
    if (it == instances.end()) {
      return;
    }
    auto & inst = it->second;
    auto & node = inst.nodes.at(c.node);
    if (std::holds_alternative<proto::NodeReady>(msg)) {
      if (!node.ready) {
        node.ready = true;
        node.state = proto::NodeState::Ready;
        note_audit("ready " + inst.uuid + " " + c.node);
        report(proto::NodeStatus{inst.uuid, c.node, proto::NodeState::Ready, {}});
        check_all_ready(inst);
      }
    } else if (const auto * drop = std::get_if<proto::DataDropped>(&msg)) {
      drop_reference(c.node, inst.uuid, drop->os_name, drop->generation);
    } else if (std::holds_alternative<proto::OutputRequest>(msg) ||
      std::holds_alternative<proto::SendOutput>(msg))
    {
      if (!inst.barrier) {
        inst.deferred.emplace_back(c.node, std::move(msg));
      } else {
        handle_node_data(inst, c.node, msg);
      }
    } else {
      spdlog::warn("[{}] unexpected {} from node {}", self.daemon_id_, proto::name_of(msg), c.node);
    }
  }

  void handle_coordinator_message(const Message & msg)
  {
    if (const auto * spawn = std::get_if<proto::SpawnDataflow>(&msg)) {
      try {
        auto sub = dfspec::sub_dataflow_from_json(spawn->sub_dataflow);
        spawn_instance(spawn->dataflow_uuid, sub);
      } catch (const Error & e) {
        report(proto::SpawnResult{spawn->dataflow_uuid, false, error_text(e)});
      } catch (const std::exception & e) {
        report(proto::SpawnResult{spawn->dataflow_uuid, false, e.what()});
      }
    } else if (const auto * ready = std::get_if<proto::AllNodesReady>(&msg)) {
      if (auto it = instances.find(ready->dataflow_uuid); it != instances.end()) {
        open_barrier(it->second);
      }
    } else if (const auto * stop = std::get_if<proto::StopDataflow>(&msg)) {
      auto it = instances.find(stop->dataflow_uuid);
      if (it == instances.end()) {
        report(proto::DataflowFinished{stop->dataflow_uuid});
      } else {
        stop_instance(it->second);
      }
    } else if (const auto * logs = std::get_if<proto::LogsRequest>(&msg)) {
      report(read_logs(*logs));
    } else if (const auto * dir = std::get_if<proto::PeerDirectory>(&msg)) {
      for (const auto & peer : dir->peers) {
        if (peer.machine_id != config.machine_id) {
          peer_addrs[peer.machine_id] = io::HostPort{peer.host, peer.port};
        }
      }
    } else if (std::holds_alternative<proto::Shutdown>(msg)) {
      stop_requested = true;
    } else if (!std::holds_alternative<proto::Heartbeat>(msg)) {
      spdlog::warn("[{}] unexpected {} from coordinator", self.daemon_id_, proto::name_of(msg));
    }
  }

  proto::LogsReply read_logs(const proto::LogsRequest & req)
  {
    const auto path = config.run_dir / req.dataflow_uuid / (req.node_id + ".log");
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      return {req.request_id, false, "NotFound: no log for node " + req.node_id};
    }
    std::ostringstream text;
    text << in.rdbuf();
    return {req.request_id, true, text.str()};
  }

  void handle_remote_message(const Message & msg)
  {
    const auto * remote = std::get_if<proto::RemoteOutput>(&msg);
    if (remote == nullptr) {
      return;
    }
    ++counters.remote_frames_received;
    auto it = instances.find(remote->dataflow_uuid);
    if (it == instances.end()) {
      spdlog::warn("[{}] RemoteOutput for UnknownDataflow {}", self.daemon_id_,
        remote->dataflow_uuid);
      return;
    }
    if (!it->second.barrier) {
      it->second.pending_remote.push_back(*remote);
    } else {
      deliver_remote(it->second, *remote);
    }
  }

  void on_conn_closed(std::uint64_t id)
  {
    auto & c = *conns.at(id);
    c.closed = true;
    switch (c.kind) {
      case Conn::Kind::Node:
        if (auto it = instances.find(c.uuid); it != instances.end()) {
          on_node_disconnect(it->second, c.node);
        }
        break;
      case Conn::Kind::PeerOut:
        peer_out.erase(c.machine);
        break;
      case Conn::Kind::Coordinator:
        spdlog::warn("[{}] coordinator connection lost; shutting down", self.daemon_id_);
        coordinator_conn.reset();
        stop_requested = true;
        break;
      case Conn::Kind::PeerIn:
        break;
    }
  }

  void service_conn(std::uint64_t id, short revents)
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
          switch (c.kind) {
            case Conn::Kind::Node:
              handle_node_message(id, c, std::move(*msg));
              break;
            case Conn::Kind::Coordinator:
              handle_coordinator_message(*msg);
              break;
            default:
              handle_remote_message(*msg);
              break;
          }
          if (c.closed) {
            return;
          }
        }
      } catch (const Error & e) {
        spdlog::warn("[{}] protocol error: {}", self.daemon_id_, error_text(e));
        open = false;
      }
    }
    if (open && (revents & POLLOUT)) {
      open = c.link.flush();
    }
    if (!open) {
      on_conn_closed(id);
    }
  }

  void pump_queues()
  {
    for (auto & [uuid, inst] : instances) {
      for (auto & [id, node] : inst.nodes) {
        auto * c = conn(node.conn);
        if (c == nullptr) {
          continue;
        }
        while (!node.queue.empty() && c->link.queued_bytes() < (64u << 10)) {
          c->link.send(node.queue.front());
          node.queue.pop_front();
        }
      }
    }
    for (auto it = conns.begin(); it != conns.end(); ) {
      auto & c = *it->second;
      if (!c.closed && c.link.wants_write() && !c.link.flush()) {
        on_conn_closed(it->first);
      }
      if (!c.closed && c.close_after_flush && !c.link.wants_write()) {
        c.closed = true;
      }
      if (c.closed) {
        if (c.kind == Conn::Kind::Node) {
          if (auto inst = instances.find(c.uuid); inst != instances.end()) {
            if (auto n = inst->second.nodes.find(c.node); n != inst->second.nodes.end()) {
              on_node_disconnect(inst->second, c.node);
              n->second.conn.reset();
            }
          }
        }
        it = conns.erase(it);
      } else {
        ++it;
      }
    }
  }

  void on_time(Clock::time_point now)
  {
    std::vector<std::string> uuids;
    for (const auto & [uuid, inst] : instances) {
      uuids.push_back(uuid);
    }
    for (const auto & uuid : uuids) {
      auto it = instances.find(uuid);
      if (it == instances.end()) {
        continue;
      }
      auto & inst = it->second;
      if (!inst.spawn_reported && !inst.stopping && now >= inst.ready_deadline) {
        std::string missing;
        for (const auto & id : inst.order) {
          if (!inst.nodes.at(id).ready) {
            missing += (missing.empty() ? "" : ",") + id;
          }
        }
        inst.spawn_reported = true;
        inst.failure = "ReadinessTimeout: not ready: " + missing;
        spdlog::warn("[{}] dataflow {} {}", self.daemon_id_, uuid, inst.failure);
        report(proto::SpawnResult{uuid, false, inst.failure});
        for (auto & [id, node] : inst.nodes) {
          if (!node.ready && !node.exited) {
            node.killed = true;
            process::send_signal(node.pid, SIGKILL);
          }
        }
        stop_instance(inst);
        if (instances.count(uuid) == 0) {
          continue;
        }
      }
      if (inst.stopping && !inst.stragglers_killed && now >= inst.stop_deadline) {
        inst.stragglers_killed = true;
        for (auto & [id, node] : inst.nodes) {
          if (!node.exited) {
            spdlog::warn("[{}] killing node {}/{} after stop grace", self.daemon_id_, uuid, id);
            node.killed = true;
            process::send_signal(node.pid, SIGKILL);
          }
        }
      }
      if (inst.barrier && !inst.stopping) {
        fire_timers(inst, now);
      }
      // Children without a pidfd are polled.
      for (auto & [id, node] : inst.nodes) {
        if (!node.exited && !node.pidfd) {
          if (auto st = process::try_wait(node.pid)) {
            on_node_exit(inst, id, *st);
            if (instances.count(uuid) == 0) {
              break;
            }
          }
        }
      }
    }
    if (coordinator_conn && now >= next_heartbeat) {
      next_heartbeat = now + config.heartbeat_interval;
      report(proto::Heartbeat{});
    }
  }

  Clock::time_point next_wakeup(Clock::time_point now) const
  {
    auto next = now + std::chrono::milliseconds(500);
    for (const auto & [uuid, inst] : instances) {
      if (!inst.spawn_reported && !inst.stopping) {
        next = std::min(next, inst.ready_deadline);
      }
      if (inst.stopping && !inst.stragglers_killed) {
        next = std::min(next, inst.stop_deadline);
      }
      if (inst.barrier && !inst.stopping) {
        for (const auto & t : inst.timers) {
          next = std::min(next, t.schedule.deadline());
        }
      }
    }
    if (coordinator_conn) {
      next = std::min(next, next_heartbeat);
    }
    return next;
  }

  void loop()
  {
    std::unique_lock lock(mu);
    loop_running = true;
    cv.notify_all();
    struct Owner
    {
      enum class Kind {Waker, NodeListener, PeerListener, Conn, Child} kind;
      std::uint64_t conn = 0;
      std::string uuid;
      std::string node;
    };
    std::vector<pollfd> fds;
    std::vector<Owner> owners;
    for (;;) {
      while (!tasks.empty()) {
        auto task = std::move(tasks.front());
        tasks.pop_front();
        task();
      }
      if (stop_requested && !shutting_down) {
        shutting_down = true;
        for (auto & [uuid, inst] : instances) {
          stop_instance(inst);
        }
        // stop_instance may erase empty instances; re-check below.
      }
      if (shutting_down) {
        std::vector<std::string> uuids;
        for (const auto & [uuid, inst] : instances) {
          uuids.push_back(uuid);
        }
        for (const auto & uuid : uuids) {
          if (auto it = instances.find(uuid); it != instances.end()) {
            stop_instance(it->second);
          }
        }
        if (instances.empty()) {
          break;
        }
      }
      pump_queues();

      fds.clear();
      owners.clear();
      fds.push_back({waker.fd(), POLLIN, 0});
      owners.push_back({Owner::Kind::Waker});
      if (node_listener) {
        fds.push_back({node_listener.get(), POLLIN, 0});
        owners.push_back({Owner::Kind::NodeListener});
      }
      if (peer_listener) {
        fds.push_back({peer_listener.get(), POLLIN, 0});
        owners.push_back({Owner::Kind::PeerListener});
      }
      for (const auto & [id, c] : conns) {
        short events = POLLIN;
        if (c->link.wants_write()) {
          events |= POLLOUT;
        }
        fds.push_back({c->link.fd(), events, 0});
        owners.push_back({Owner::Kind::Conn, id});
      }
      for (const auto & [uuid, inst] : instances) {
        for (const auto & [id, node] : inst.nodes) {
          if (!node.exited && node.pidfd) {
            fds.push_back({node.pidfd.get(), POLLIN, 0});
            owners.push_back({Owner::Kind::Child, 0, uuid, id});
          }
        }
      }
      const auto now = Clock::now();
      const auto wake = next_wakeup(now);
      const auto wait_ms = std::max<long long>(0,
          std::chrono::duration_cast<std::chrono::milliseconds>(
            wake - now + std::chrono::microseconds(999)).count());

      lock.unlock();
      const int n = ::poll(fds.data(), fds.size(), static_cast<int>(wait_ms));
      lock.lock();

      if (n > 0) {
        for (std::size_t i = 0; i < fds.size(); ++i) {
          const auto revents = fds[i].revents;
          if (revents == 0) {
            continue;
          }
          const auto & owner = owners[i];
          switch (owner.kind) {
            case Owner::Kind::Waker:
              waker.drain();
              break;
            case Owner::Kind::NodeListener:
              while (auto fd = io::accept_nonblocking(node_listener.get())) {
                add_conn(Conn::Kind::Node, std::move(fd));
              }
              break;
            case Owner::Kind::PeerListener:
              while (auto fd = io::accept_nonblocking(peer_listener.get())) {
                add_conn(Conn::Kind::PeerIn, std::move(fd));
              }
              break;
            case Owner::Kind::Conn:
              if (conns.count(owner.conn) != 0) {
                service_conn(owner.conn, revents);
              }
              break;
            case Owner::Kind::Child:
              if (auto it = instances.find(owner.uuid); it != instances.end()) {
                auto node = it->second.nodes.find(owner.node);
                if (node != it->second.nodes.end() && !node->second.exited) {
                  on_node_exit(it->second, owner.node, process::wait(node->second.pid));
                }
              }
              break;
          }
        }
      }
      on_time(Clock::now());
      cv.notify_all();
    }
    if (auto * c = conn(coordinator_conn)) {
      c->link.drain_output(std::chrono::milliseconds(1000));
    }
    loop_running = false;
    cv.notify_all();
  }

  void kill_everything()
  {
    for (auto & [uuid, inst] : instances) {
      for (auto & [id, node] : inst.nodes) {
        if (!node.exited) {
          process::send_signal(node.pid, SIGKILL);
          process::wait(node.pid);
          node.exited = true;
        }
      }
      for (const auto & [id, node] : inst.nodes) {
        force_release_node(inst, id);
      }
    }
    instances.clear();
    conns.clear();
  }
};

Daemon::Daemon(DaemonConfig config)
: config_(std::move(config))
{
  init_logging();
  daemon_id_ = sanitize(config_.machine_id) + "." + std::to_string(::getpid()) + "." +
    std::to_string(g_daemon_count++);
  impl_ = std::make_unique<Impl>(*this, config_);
  impl_->peer_addrs = config_.peers;
  std::error_code ec;
  std::filesystem::create_directories(config_.run_dir, ec);
  impl_->node_listener = io::unix_listen_abstract("miniflow-node-" + daemon_id_);
  impl_->peer_listener = io::tcp_listen(config_.inter_daemon);
  inter_daemon_port_ = io::local_port(impl_->peer_listener.get());
  if (config_.coordinator) {
    const auto deadline = Clock::now() + std::chrono::seconds(5);
    io::UniqueFd fd;
    for (;;) {
      try {
        fd = io::tcp_connect(*config_.coordinator, std::chrono::milliseconds(1000));
        break;
      } catch (const Error &) {
        if (Clock::now() >= deadline) {
          throw;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
      }
    }
    const auto id = impl_->add_conn(Conn::Kind::Coordinator, std::move(fd));
    impl_->coordinator_conn = id;
    auto & link = impl_->conns.at(id)->link;
    link.send(proto::RegisterDaemon{config_.machine_id});
    auto host = config_.inter_daemon.host;
    if (host == "0.0.0.0" || host.empty()) {
      host = "127.0.0.1";
    }
    link.send(proto::DaemonEndpoint{host, inter_daemon_port_});
    impl_->next_heartbeat = Clock::now() + config_.heartbeat_interval;
  }
}

Daemon::~Daemon()
{
  shutdown();
  join();
  std::lock_guard lock(impl_->mu);
  impl_->kill_everything();
}

std::string Daemon::node_endpoint() const
{
  return "unix:@miniflow-node-" + daemon_id_;
}

void Daemon::start()
{
  thread_ = std::thread([this] {run();});
  std::unique_lock lock(impl_->mu);
  impl_->cv.wait(lock, [&] {return impl_->loop_running || impl_->shutting_down;});
}

void Daemon::run()
{
  impl_->loop();
}

void Daemon::shutdown()
{
  std::lock_guard lock(impl_->mu);
  impl_->stop_requested = true;
  impl_->waker.wake();
}

void Daemon::join()
{
  if (thread_.joinable()) {
    thread_.join();
  }
}

template<typename F>
auto Daemon::call(F && fn)
{
  using R = decltype(fn());
  std::unique_lock lock(impl_->mu);
  if (!impl_->loop_running) {
    return fn();
  }
  std::packaged_task<R()> task(std::forward<F>(fn));
  auto result = task.get_future();
  impl_->tasks.emplace_back([&task] {task();});
  impl_->waker.wake();
  lock.unlock();
  return result.get();
}

std::string Daemon::spawn_dataflow(const dfspec::SubDataflow & sub, std::string uuid)
{
  if (uuid.empty()) {
    uuid = proto::random_uuid();
  }
  return call([&] {
             impl_->spawn_instance(uuid, sub);
             return uuid;
           });
}

void Daemon::stop_dataflow(const std::string & uuid)
{
  call([&] {
      auto it = impl_->instances.find(uuid);
      if (it == impl_->instances.end() || it->second.stopping) {
        fail(Errc::UnknownDataflow, uuid);
      }
      impl_->stop_instance(it->second);
    });
}

bool Daemon::wait_running(const std::string & uuid, std::chrono::milliseconds timeout)
{
  std::unique_lock lock(impl_->mu);
  impl_->cv.wait_for(lock, timeout, [&] {
      return impl_->ever_running.count(uuid) != 0 || impl_->finished.count(uuid) != 0;
    });
  return impl_->ever_running.count(uuid) != 0;
}

std::optional<DataflowOutcome> Daemon::wait_finished(
  const std::string & uuid, std::chrono::milliseconds timeout)
{
  std::unique_lock lock(impl_->mu);
  impl_->cv.wait_for(lock, timeout, [&] {return impl_->finished.count(uuid) != 0;});
  if (auto it = impl_->finished.find(uuid); it != impl_->finished.end()) {
    return it->second;
  }
  return std::nullopt;
}

DaemonStats Daemon::stats() const
{
  std::lock_guard lock(impl_->mu);
  auto out = impl_->counters;
  out.pool = impl_->pool.stats();
  out.running_dataflows = impl_->instances.size();
  for (const auto & [uuid, inst] : impl_->instances) {
    for (const auto & [id, node] : inst.nodes) {
      out.live_children += node.exited ? 0 : 1;
    }
  }
  for (const auto & [name, use] : impl_->blocks) {
    out.outstanding[name] = use.references();
  }
  return out;
}

std::vector<std::string> Daemon::audit_log() const
{
  std::lock_guard lock(impl_->mu);
  return impl_->audit;
}

}  // namespace miniflow
