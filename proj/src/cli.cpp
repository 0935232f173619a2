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


#include "miniflow/cli.hpp"

#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "miniflow/daemon.hpp"
#include "miniflow/dfspec.hpp"
#include "miniflow/error.hpp"
#include "miniflow/log.hpp"
#include "miniflow/process.hpp"

namespace miniflow::cli
{

namespace
{

using namespace std::chrono_literals;
namespace fs = std::filesystem;

constexpr auto kCallTimeout = std::chrono::seconds(120);

/// Blocks SIGINT and SIGTERM for the process and invokes `on_signal` from a
/// watcher thread when one arrives. Must be created before other threads.
class SignalWatcher
{
public:
  explicit SignalWatcher(std::function<void()> on_signal)
  : on_signal_(std::move(on_signal))
  {
    sigemptyset(&set_);
    sigaddset(&set_, SIGINT);
    sigaddset(&set_, SIGTERM);
    ::pthread_sigmask(SIG_BLOCK, &set_, &old_);
    thread_ = std::thread([this] {
          const timespec tick{0, 100'000'000};
          while (!done_) {
            if (::sigtimedwait(&set_, nullptr, &tick) > 0) {
              fired_ = true;
              on_signal_();
            }
          }
        });
  }

  ~SignalWatcher()
  {
    done_ = true;
    thread_.join();
    ::pthread_sigmask(SIG_SETMASK, &old_, nullptr);
  }

  bool fired() const {return fired_;}

private:
  std::function<void()> on_signal_;
  sigset_t set_;
  sigset_t old_;
  std::atomic<bool> done_{false};
  std::atomic<bool> fired_{false};
  std::thread thread_;
};

std::string read_text(const fs::path & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    fail(Errc::BadSpec, "cannot read " + path.string());
  }
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

dfspec::DataflowSpec load_spec(const fs::path & path)
{
  const auto text = read_text(path);
  try {
    return dfspec::parse(text);
  } catch (const Error & e) {
    fail(Errc::BadSpec, path.string() + ": " + e.what());
  }
}

void require_valid(const dfspec::DataflowSpec & spec)
{
  const auto diags = dfspec::validate(spec);
  if (!dfspec::has_errors(diags)) {
    return;
  }
  std::string text;
  for (const auto & d : diags) {
    if (d.severity == dfspec::Severity::Error) {
      text += (text.empty() ? "" : "; ") + dfspec::format(d);
    }
  }
  fail(Errc::ValidationFailed, text);
}

proto::CliReply call(const CliConfig & config, proto::CliVerb verb, std::vector<std::string> args)
{
  auto reply = cli_call(config.coordinator, proto::CliRequest{verb, std::move(args)}, kCallTimeout);
  if (!reply.ok) {
    const auto text = reply.items.empty() ? std::string("unknown error") : reply.items.front();
    // Relay "Code: detail" verbatim when the code is known.
    const auto colon = text.find(": ");
    const auto head = text.substr(0, colon);
    for (int i = 0; i <= static_cast<int>(Errc::Timeout); ++i) {
      if (to_string(static_cast<Errc>(i)) == head) {
        fail(static_cast<Errc>(i), colon == std::string::npos ? std::string() : text.substr(colon + 2));
      }
    }
    fail(Errc::IoError, text);
  }
  return reply;
}

std::string html_escape(const std::string & text)
{
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

void write_file(const fs::path & path, const std::string & text)
{
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) {
    fail(Errc::IoError, "cannot write " + path.string());
  }
}

bool on_path(const std::string & program)
{
  const char * path = std::getenv("PATH");
  if (path == nullptr) {
    return false;
  }
  std::stringstream dirs(path);
  std::string dir;
  while (std::getline(dirs, dir, ':')) {
    if (!dir.empty() && ::access((fs::path(dir) / program).c_str(), X_OK) == 0) {
      return true;
    }
  }
  return false;
}

int run_local(const fs::path & spec_path, std::ostream & err)
{
  const auto spec = load_spec(spec_path);
  require_valid(spec);
  for (const auto & node : spec.nodes) {
    if (node.machine) {
      fail(Errc::MachinesRequireCoordinator,
        "node " + node.id + " names machine " + *node.machine + "; use start");
    }
  }
  auto subs = dfspec::partition(spec, "local");
  if (subs.empty()) {
    fail(Errc::BadSpec, "the dataflow has no nodes");
  }
  auto sub = subs.begin()->second;
  sub.working_dir = fs::absolute(spec_path).parent_path().string();

  std::atomic<bool> interrupted{false};
  SignalWatcher signals([&] {interrupted = true;});
  DaemonConfig config;
  config.inter_daemon.port = 0;
  Daemon daemon(config);
  daemon.start();
  const auto uuid = daemon.spawn_dataflow(sub);
  err << "dataflow " << uuid << " started; node logs in " <<
    (config.run_dir / uuid).string() << std::endl;
  bool stop_sent = false;
  std::optional<DataflowOutcome> outcome;
  while (!(outcome = daemon.wait_finished(uuid, 100ms))) {
    if (interrupted && !stop_sent) {
      stop_sent = true;
      err << "interrupted; stopping dataflow" << std::endl;
      try {
        daemon.stop_dataflow(uuid);
      } catch (const Error &) {
        // Already stopping.
      }
    }
  }
  for (const auto & [id, node] : outcome->nodes) {
    err << "  " << id << ": " << proto::to_string(node.state);
    if (!node.detail.empty()) {
      err << " (" << node.detail << ")";
    }
    err << std::endl;
  }
  if (stop_sent) {
    return 130;
  }
  if (!outcome->ok) {
    fail(Errc::NodeFailed, outcome->error);
  }
  return 0;
}

int run_coordinator(CoordinatorConfig config, std::ostream & err)
{
  std::atomic<Coordinator *> active{nullptr};
  SignalWatcher signals([&] {
      if (auto * c = active.load()) {
        c->shutdown();
      }
    });
  Coordinator coordinator(std::move(config));
  active = &coordinator;
  err << "coordinator listening on " << coordinator.address().str() << std::endl;
  coordinator.run();
  active = nullptr;
  return 0;
}

int run_daemon(DaemonConfig config, std::ostream & err)
{
  std::atomic<Daemon *> active{nullptr};
  SignalWatcher signals([&] {
      if (auto * d = active.load()) {
        d->shutdown();
      }
    });
  Daemon daemon(std::move(config));
  active = &daemon;
  err << "daemon " << daemon.daemon_id() << " serving peers on port " <<
    daemon.inter_daemon_port() << std::endl;
  daemon.run();
  active = nullptr;
  return 0;
}

const char * kNodeTemplate = R"(#include <iostream>

#include "miniflow/node_api.hpp"

using miniflow::node::Event;
using miniflow::node::NextEvent;
using miniflow::node::Node;

int main()
{
  auto node = Node::init();
  for (;;) {
    auto next = node.next_event();
    if (next.status() != NextEvent::Status::Event ||
      next.event().kind() == Event::Kind::Stop)
    {
      break;
    }
    const auto & event = next.event();
    std::cout << "input " << event.id() << ": " << event.data().payload.size() << " bytes" <<
      std::endl;
    // Publish with node.send_output("out", type, payload, metadata).
  }
  return 0;
}
)";

const char * kNodeCMake = R"(cmake_minimum_required(VERSION 3.20)
project(@NAME@ LANGUAGES CXX)
set(CMAKE_CXX_STANDARD 20)

# Point MINIFLOW_DIR at a miniflow checkout with a build/ tree.
set(MINIFLOW_DIR "" CACHE PATH "miniflow source tree")
find_package(Threads REQUIRED)
find_package(yaml-cpp REQUIRED)
find_package(spdlog REQUIRED)

add_executable(@NAME@ main.cpp)
target_include_directories(@NAME@ PRIVATE ${MINIFLOW_DIR}/include)
target_link_libraries(@NAME@ PRIVATE
  ${MINIFLOW_DIR}/build/src/libminiflow.a yaml-cpp spdlog::spdlog Threads::Threads rt)
)";

std::string replace_all(std::string text, const std::string & from, const std::string & to)
{
  for (auto pos = text.find(from); pos != std::string::npos; pos = text.find(from, pos + to.size())) {
    text.replace(pos, from.size(), to);
  }
  return text;
}

}  // namespace

io::HostPort default_coordinator_address()
{
  if (const char * env = std::getenv("MINIFLOW_COORDINATOR_ADDR"); env != nullptr && *env != '\0') {
    return io::parse_host_port(env);
  }
  return {"127.0.0.1", kDefaultCoordinatorPort};
}

Liveness check(const CliConfig & config)
{
  Liveness out;
  try {
    const auto reply = cli_call(config.coordinator, {proto::CliVerb::Check, {}}, 3s);
    out.coordinator = reply.ok;
    if (reply.ok && !reply.items.empty()) {
      out.daemons = nlohmann::json::parse(reply.items.front()).at("daemons")
        .get<std::vector<std::string>>();
    }
  } catch (const std::exception &) {
    out.coordinator = false;
  }
  return out;
}

void up(const CliConfig & config, const fs::path & log_dir)
{
  if (check(config).coordinator) {
    fail(Errc::AlreadyRunning, "a coordinator answers on " + config.coordinator.str());
  }
  std::error_code ec;
  fs::create_directories(log_dir, ec);
  const auto self = process::self_executable().string();
  const auto addr = config.coordinator.str();

  process::SpawnOptions coordinator;
  coordinator.args = {self, "coordinator", "--bind-addr", config.coordinator.host,
    "--port", std::to_string(config.coordinator.port)};
  coordinator.log_path = log_dir / "coordinator.log";
  coordinator.new_session = true;
  auto c = process::spawn(coordinator);

  const auto deadline = std::chrono::steady_clock::now() + 10s;
  while (!check(config).coordinator) {
    if (process::try_wait(c.pid)) {
      fail(Errc::SpawnFailed, "coordinator exited; see " + coordinator.log_path.string());
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      fail(Errc::Timeout, "coordinator did not come up");
    }
    std::this_thread::sleep_for(50ms);
  }

  process::SpawnOptions daemon;
  daemon.args = {self, "--coordinator-addr", addr, "daemon", "--inter-daemon-port", "0"};
  daemon.log_path = log_dir / "daemon.log";
  daemon.new_session = true;
  auto d = process::spawn(daemon);
  while (!check(config).all()) {
    if (process::try_wait(d.pid)) {
      fail(Errc::SpawnFailed, "daemon exited; see " + daemon.log_path.string());
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      fail(Errc::Timeout, "daemon did not register");
    }
    std::this_thread::sleep_for(50ms);
  }
}

void destroy(const CliConfig & config)
{
  if (!check(config).coordinator) {
    fail(Errc::NotRunning, "no coordinator answers on " + config.coordinator.str());
  }
  call(config, proto::CliVerb::Destroy, {});
  const auto deadline = std::chrono::steady_clock::now() + 10s;
  while (check(config).coordinator) {
    if (std::chrono::steady_clock::now() >= deadline) {
      fail(Errc::Timeout, "coordinator still running");
    }
    std::this_thread::sleep_for(50ms);
  }
}

std::string start(const CliConfig & config, const fs::path & spec, const std::string & name)
{
  const auto text = read_text(spec);
  const auto dir = fs::absolute(spec).parent_path().string();
  return call(config, proto::CliVerb::Start, {text, name, dir}).items.at(0);
}

void stop(const CliConfig & config, const std::string & uuid_or_name)
{
  call(config, proto::CliVerb::Stop, {uuid_or_name});
}

std::vector<DataflowRow> list(const CliConfig & config)
{
  std::vector<DataflowRow> rows;
  for (const auto & item : call(config, proto::CliVerb::List, {}).items) {
    rows.push_back(dataflow_row_from_json(item));
  }
  return rows;
}

std::string logs(const CliConfig & config, const std::string & uuid_or_name, const std::string & node)
{
  return call(config, proto::CliVerb::Logs, {uuid_or_name, node}).items.at(0);
}

std::string format_rows(const std::vector<DataflowRow> & rows, Format format)
{
  std::ostringstream out;
  if (format == Format::JsonLines) {
    for (const auto & row : rows) {
      out << to_json(row) << '\n';
    }
    return out.str();
  }
  std::vector<std::vector<std::string>> table{{"UUID", "NAME", "PHASE", "MACHINES", "STARTED"}};
  for (const auto & row : rows) {
    std::string machines;
    for (const auto & m : row.machines) {
      machines += (machines.empty() ? "" : ",") + m;
    }
    table.push_back({row.uuid, row.name.empty() ? "-" : row.name,
        std::string(to_string(row.phase)), machines, format_utc(row.started_at)});
  }
  std::vector<std::size_t> width(5, 0);
  for (const auto & line : table) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      width[i] = std::max(width[i], line[i].size());
    }
  }
  for (const auto & line : table) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      out << line[i];
      if (i + 1 < line.size()) {
        out << std::string(width[i] - line[i].size() + 2, ' ');
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string format_liveness(const Liveness & liveness, const CliConfig & config, Format format)
{
  std::ostringstream out;
  if (format == Format::JsonLines) {
    nlohmann::json c{{"component", "coordinator"}, {"running", liveness.coordinator},
      {"address", config.coordinator.str()}};
    nlohmann::json d{{"component", "daemon"}, {"running", !liveness.daemons.empty()},
      {"machines", liveness.daemons}};
    out << c.dump() << '\n' << d.dump() << '\n';
    return out.str();
  }
  out << "coordinator: " << (liveness.coordinator ? "running" : "not running") <<
    " (" << config.coordinator.str() << ")\n";
  out << "daemon: ";
  if (liveness.daemons.empty()) {
    out << "not running\n";
  } else {
    out << "running (";
    for (std::size_t i = 0; i < liveness.daemons.size(); ++i) {
      out << (i ? ", " : "") << liveness.daemons[i];
    }
    out << ")\n";
  }
  return out.str();
}

std::string graph_html(const std::string & mermaid, const std::string & title)
{
  std::ostringstream out;
  out << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>" <<
    html_escape(title) << "</title>\n</head>\n<body>\n<pre class=\"mermaid\">\n" <<
    html_escape(mermaid) << "</pre>\n<script type=\"module\">\n"
    "import mermaid from 'https://cdn.jsdelivr.net/npm/mermaid@10/dist/mermaid.esm.min.mjs';\n"
    "mermaid.initialize({startOnLoad: true});\n</script>\n</body>\n</html>\n";
  return out.str();
}

void scaffold(TemplateKind kind, const fs::path & dir, const fs::path & example_node)
{
  if (fs::exists(dir)) {
    fail(Errc::TemplateExists, dir.string());
  }
  fs::create_directories(dir);
  const auto name = dir.filename().string();
  if (kind == TemplateKind::Node) {
    write_file(dir / "main.cpp", kNodeTemplate);
    write_file(dir / "CMakeLists.txt", replace_all(kNodeCMake, "@NAME@", name));
    return;
  }
  const auto example = example_node.string();
  write_file(dir / "dataflow.yml",
    "# Dataflow " + name + ": a timer-driven publisher and a subscriber.\n"
    "nodes:\n"
    "  - id: publisher\n"
    "    path: " + example + " publisher --count 25\n"
    "    inputs:\n"
    "      tick: dora/timer/millis/20\n"
    "    outputs:\n"
    "      - data\n"
    "\n"
    "  - id: subscriber\n"
    "    path: " + example + " subscriber\n"
    "    inputs:\n"
    "      data: publisher/data\n");
  fs::create_directories(dir / "node");
  write_file(dir / "node" / "main.cpp", kNodeTemplate);
  write_file(dir / "node" / "CMakeLists.txt", replace_all(kNodeCMake, "@NAME@", name + "_node"));
}

void build(const fs::path & spec_path, std::ostream & out)
{
  const auto spec = load_spec(spec_path);
  const auto dir = fs::absolute(spec_path).parent_path();
  for (const auto & node : spec.nodes) {
    if (!node.build) {
      continue;
    }
    out << "building " << node.id << ": " << *node.build << std::endl;
    process::SpawnOptions options;
    options.args = {"/bin/sh", "-c", *node.build};
    options.cwd = dir;
    auto child = process::spawn(options);
    const auto status = process::wait(child.pid);
    if (!status.success()) {
      fail(Errc::BuildFailed, "node " + node.id + ": " + status.describe());
    }
  }
}

int main(const std::vector<std::string> & args, std::ostream & out, std::ostream & err)
{
  CLI::App app{"miniflow: dataflow middleware command line", "miniflow"};
  app.require_subcommand(1);
  app.fallthrough();

  CliConfig config;
  std::string addr;
  std::string format = "table";
  app.add_option("--coordinator-addr", addr, "coordinator host:port (env MINIFLOW_COORDINATOR_ADDR)");
  app.add_option("--format", format, "output format for list and check")
  ->check(CLI::IsMember({"table", "json-lines"}));

  auto * up_cmd = app.add_subcommand("up", "Spawn coordinator and daemon in local mode");
  auto * destroy_cmd = app.add_subcommand("destroy", "Destroy running coordinator and daemon");
  auto * check_cmd = app.add_subcommand("check", "Check if the coordinator and the daemon are running");

  auto * coord_cmd = app.add_subcommand("coordinator", "Run coordinator");
  CoordinatorConfig coord_config;
  std::string audit_log;
  coord_cmd->add_option("--port", coord_config.bind.port, "control port");
  coord_cmd->add_option("--bind-addr", coord_config.bind.host, "listen address");
  coord_cmd->add_flag("--keep-running", coord_config.keep_running,
    "keep a dataflow running after a node fails");
  coord_cmd->add_option("--audit-log", audit_log, "append audit records to this file");

  auto * daemon_cmd = app.add_subcommand("daemon", "Run daemon");
  DaemonConfig daemon_config;
  std::string run_dir;
  std::vector<std::string> peers;
  daemon_cmd->add_option("--machine-id", daemon_config.machine_id, "machine id");
  daemon_cmd->add_option("--inter-daemon-port", daemon_config.inter_daemon.port,
    "peer data port (0: any free port)");
  daemon_cmd->add_option("--inter-daemon-host", daemon_config.inter_daemon.host,
    "peer data listen address");
  daemon_cmd->add_option("--run-dir", run_dir, "directory for node logs");
  daemon_cmd->add_option("--max-free-bytes", daemon_config.max_free_bytes,
    "cap on idle shared-memory bytes");
  daemon_cmd->add_option("--peer", peers, "static peer, machine=host:port");

  auto * new_cmd = app.add_subcommand("new", "Generate a new project or node");
  std::string new_name;
  std::string new_kind = "dataflow";
  new_cmd->add_option("name", new_name, "directory to create")->required();
  new_cmd->add_option("--kind", new_kind, "template kind")
  ->check(CLI::IsMember({"dataflow", "node"}));

  std::string path;
  auto * build_cmd = app.add_subcommand("build", "Run build commands provided in the given dataflow");
  build_cmd->add_option("path", path, "dataflow specification")->required();

  auto * run_cmd = app.add_subcommand("run", "Run a dataflow locally");
  run_cmd->add_option("path", path, "dataflow specification")->required();

  std::string name;
  auto * start_cmd = app.add_subcommand("start", "Start the given dataflow path");
  start_cmd->add_option("path", path, "dataflow specification")->required();
  start_cmd->add_option("--name", name, "name to attach to the running dataflow");

  std::string target;
  auto * stop_cmd = app.add_subcommand("stop", "Stop the given dataflow UUID or name");
  stop_cmd->add_option("dataflow", target, "uuid or name")->required();

  auto * list_cmd = app.add_subcommand("list", "List running dataflows");

  std::string node;
  auto * logs_cmd = app.add_subcommand("logs", "Show logs of a given dataflow and node");
  logs_cmd->add_option("dataflow", target, "uuid or name")->required();
  logs_cmd->add_option("node", node, "node id")->required();

  bool open = false;
  auto * graph_cmd = app.add_subcommand("graph", "Generate a visualization of the given graph using mermaid.js");
  graph_cmd->add_option("path", path, "dataflow specification")->required();
  graph_cmd->add_flag("--open", open, "write an HTML page and open it");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError & e) {
    return app.exit(e, out, err);
  }

  try {
    config.coordinator = addr.empty() ? default_coordinator_address() : io::parse_host_port(addr);
    config.format = format == "json-lines" ? Format::JsonLines : Format::Table;

    if (*up_cmd) {
      up(config, default_run_dir());
      out << format_liveness(check(config), config, config.format);
    } else if (*destroy_cmd) {
      destroy(config);
    } else if (*check_cmd) {
      const auto live = check(config);
      out << format_liveness(live, config, config.format);
      return live.all() ? 0 : 1;
    } else if (*coord_cmd) {
      if (!audit_log.empty()) {
        coord_config.audit_file = audit_log;
      }
      return run_coordinator(coord_config, err);
    } else if (*daemon_cmd) {
      daemon_config.coordinator = config.coordinator;
      if (!run_dir.empty()) {
        daemon_config.run_dir = run_dir;
      }
      for (const auto & peer : peers) {
        const auto eq = peer.find('=');
        if (eq == std::string::npos) {
          fail(Errc::InvalidArgument, "--peer expects machine=host:port");
        }
        daemon_config.peers[peer.substr(0, eq)] = io::parse_host_port(peer.substr(eq + 1));
      }
      return run_daemon(daemon_config, err);
    } else if (*new_cmd) {
      const auto example = process::self_executable().parent_path() / "miniflow-example-node";
      scaffold(new_kind == "node" ? TemplateKind::Node : TemplateKind::Dataflow, new_name, example);
      out << "created " << new_name << std::endl;
    } else if (*build_cmd) {
      build(path, out);
    } else if (*run_cmd) {
      return run_local(path, err);
    } else if (*start_cmd) {
      out << start(config, path, name) << std::endl;
    } else if (*stop_cmd) {
      stop(config, target);
    } else if (*list_cmd) {
      out << format_rows(list(config), config.format);
    } else if (*logs_cmd) {
      out << logs(config, target, node);
    } else if (*graph_cmd) {
      const auto mermaid = dfspec::graph_export(load_spec(path));
      if (!open) {
        out << mermaid;
      } else {
        const auto page = fs::absolute(path).replace_extension(".html");
        write_file(page, graph_html(mermaid, fs::path(path).stem().string()));
        out << page.string() << std::endl;
        if (on_path("xdg-open")) {
          process::SpawnOptions viewer;
          viewer.args = {"xdg-open", page.string()};
          viewer.new_session = true;
          viewer.log_path = "/dev/null";
          try {
            process::spawn(viewer);
          } catch (const Error &) {
            // The page path is already printed.
          }
        }
      }
    }
    out.flush();
    return 0;
  } catch (const Error & e) {
    err << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception & e) {
    err << "error: " << e.what() << std::endl;
    return 1;
  }
}

}  // namespace miniflow::cli
