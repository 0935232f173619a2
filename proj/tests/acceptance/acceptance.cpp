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


// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. Arguments select a subset, e.g.
// "acceptance 1 3 9".

#define DOCTEST_CONFIG_DISABLE

#include <signal.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "daemon_fixture.hpp"
#include "miniflow/bench.hpp"
#include "miniflow/control_proto.hpp"
#include "miniflow/coordinator.hpp"
#include "miniflow/daemon.hpp"
#include "miniflow/dfspec.hpp"
#include "miniflow/envelope.hpp"
#include "miniflow/error.hpp"
#include "miniflow/io.hpp"
#include "miniflow/log.hpp"
#include "miniflow/node_api.hpp"
#include "miniflow/process.hpp"
#include "miniflow/shm_pool.hpp"
#include "pool_oracle.hpp"
#include "proto_gen.hpp"
#include "spec_gen.hpp"
#include "test_util.hpp"

using namespace std::chrono_literals;
using namespace miniflow;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace
{

struct Outcome
{
  bool pass = true;
  std::string detail;
};

/// Collects failed expectations for one criterion.
class Checker
{
public:
  void expect(bool ok, const std::string & what)
  {
    if (!ok && failures_.size() < 5) {
      failures_.push_back(what);
    }
    pass_ = pass_ && ok;
  }

  Outcome finish(const std::string & summary) const
  {
    std::string detail = summary;
    for (const auto & f : failures_) {
      detail += (detail.empty() ? "" : "; ") + f;
    }
    return {pass_, detail};
  }

private:
  bool pass_ = true;
  std::vector<std::string> failures_;
};

double seconds_since(Clock::time_point start)
{
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string ms(double ns)
{
  std::ostringstream out;
  out.precision(3);
  out << std::fixed << ns / 1e6 << " ms";
  return out.str();
}

std::string num(double value, int digits = 2)
{
  std::ostringstream out;
  out.precision(digits);
  out << std::fixed << value;
  return out.str();
}

// ---- 1. envelope round trip -----------------------------------------------

Outcome envelope_round_trip()
{
  const auto start = Clock::now();
  Checker c;
  std::mt19937_64 rng(1);
  constexpr int kCases = 2000;
  for (int i = 0; i < kCases; ++i) {
    const auto type = static_cast<ElementType>(rng() % 10);
    const std::uint64_t count = rng() % 4096;
    Metadata md;
    for (std::uint64_t n = rng() % 6, k = 0; k < n; ++k) {
      std::string value(rng() % 48, 'x');
      for (auto & ch : value) {
        ch = static_cast<char>(' ' + rng() % 95);
      }
      md.append("key" + std::to_string(k) + "_" + std::to_string(rng() % 100), value);
    }
    const auto payload = test_util::random_bytes(rng, count * element_width(type));
    const auto buf = encode(type, count, md, payload);
    const auto env = decode(buf);
    const bool same = env.element_type == type && env.element_count == count &&
      env.metadata == md &&
      std::equal(env.payload.begin(), env.payload.end(), payload.begin(), payload.end());
    c.expect(same, "decode(encode(x)) != x at case " + std::to_string(i));
    c.expect(encode(env.element_type, env.element_count, env.metadata, env.payload) == buf,
      "re-encode differs at case " + std::to_string(i));
  }
  const auto elapsed = seconds_since(start);
  c.expect(elapsed < 10, "took " + num(elapsed) + " s");
  return c.finish(std::to_string(kCases) + " triples in " + num(elapsed) + " s");
}

// ---- 2. zero deserialization ----------------------------------------------

std::optional<bench::BenchReport> g_sweep_4m;

Outcome zero_deserialization(const bench::BenchReport & profile)
{
  Checker c;
  test_util::LocalDaemon daemon([] {
      DaemonConfig config;
      config.stop_grace = 300ms;
      return config;
    }());
  const auto stall = test_util::test_node("stall");
  const auto uuid = daemon.spawn(
    "nodes:\n"
    "  - id: pub\n"
    "    path: " + stall + "\n"
    "    outputs: [data]\n"
    "  - id: sub\n"
    "    path: " + stall + "\n"
    "    inputs:\n"
    "      data: pub/data\n");
  auto open = [&](const std::string & id) {
      return node::Node::open(node::NodeParams{daemon->node_endpoint(), uuid, id});
    };
  auto pub = open("pub");
  auto sub = open("sub");
  c.expect(daemon->wait_running(uuid, 10s), "in-process dataflow did not start");
  std::string copies;
  for (const std::size_t size : {std::size_t{256} << 10, std::size_t{4} << 20,
      std::size_t{32} << 20})
  {
    std::vector<std::byte> payload(size);
    for (std::size_t i = 0; i < size; ++i) {
      payload[i] = static_cast<std::byte>((i * 7) & 0xFF);
    }
    pub.send_output("data", ElementType::U8, payload);
    const auto before = instrument::payload_copies();
    auto next = sub.next_event(10s);
    if (next.status() != node::NextEvent::Status::Event) {
      c.expect(false, "no event at " + std::to_string(size));
      continue;
    }
    auto & ev = next.event();
    const auto view = ev.data().payload;
    const auto after = instrument::payload_copies();
    const auto passes = after.passes - before.passes;
    copies += (copies.empty() ? "" : "/") + std::to_string(passes);
    c.expect(passes == 0 && after.bytes == before.bytes,
      std::to_string(size) + " B read path copied");
    c.expect(ev.shm_backed(), std::to_string(size) + " B not shm-backed");
    const auto region = ev.mapped_region();
    c.expect(view.data() >= region.data() && view.data() + view.size() <= region.data() +
      region.size(), "payload does not alias the mapping");
    c.expect(view.size() == size && std::memcmp(view.data(), payload.data(), size) == 0,
      "payload bytes differ");
  }
  const auto ratio = profile.producer_cpu_pct > 0 ?
    profile.consumer_cpu_pct / profile.producer_cpu_pct : 1.0;
  c.expect(profile.producer_cpu_pct > 0, "producer CPU not measured");
  c.expect(ratio < 0.2, "consumer/producer CPU ratio " + num(ratio, 3));
  return c.finish("read-path copies " + copies + "; CPU producer " +
    num(profile.producer_cpu_pct) + "% consumer " + num(profile.consumer_cpu_pct) +
    "% (ratio " + num(ratio, 3) + ")");
}

// ---- 3. allocator oracle ----------------------------------------------------

Outcome allocator_oracle()
{
  const auto start = Clock::now();
  Checker c;
  constexpr int kSeeds = 120;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    // Alternate between a roomy and a tight cap so eviction is exercised.
    const auto cap = seed % 2 ? (24ull << 20) : (64ull << 10);
    const auto max_size = seed % 2 ? (8ull << 20) : (16ull << 10);
    const auto r = pool_oracle::replay_random_trace(seed, 10000, max_size, cap);
    c.expect(r.ok, r.failure);
    c.expect(r.operations == 10000 || !r.ok, "trace cut short");
  }
  auto factory = std::make_shared<HeapShmFactory>();
  Pool pool({256ull << 20, factory, "acceptance"});
  for (int i = 0; i < 1000; ++i) {
    const auto lease = pool.acquire(921600, 1);
    pool.release(lease.block.id);
  }
  c.expect(pool.stats().created_total == 1,
    "steady-state loop created " + std::to_string(pool.stats().created_total) + " blocks");
  const auto elapsed = seconds_since(start);
  c.expect(elapsed < 60, "took " + num(elapsed) + " s");
  return c.finish(std::to_string(kSeeds) + " seeds x 10000 ops in " + num(elapsed) + " s");
}

// ---- 4/5/6. latency --------------------------------------------------------

bench::RunOptions bench_options()
{
  bench::RunOptions o;
  o.bench_node = MINIFLOW_BENCH_NODE;
  return o;
}

std::map<std::uint64_t, bench::BenchReport> & size_sweep_results()
{
  static std::map<std::uint64_t, bench::BenchReport> results;
  if (results.empty()) {
    bench::Scenario base;
    base.frequency_hz = 50;
    base.duration_s = 10;
    base.warmup_s = 2;
    const auto rows = bench::size_sweep(
      {256ull << 10, 1ull << 20, 4ull << 20, 32ull << 20}, base, bench_options());
    for (const auto & row : rows) {
      results[static_cast<std::uint64_t>(row.key)] = row.report;
    }
  }
  return results;
}

Outcome local_latency()
{
  Checker c;
  const auto & r = size_sweep_results();
  const auto & m4 = r.at(4ull << 20);
  const auto & m32 = r.at(32ull << 20);
  c.expect(m4.aggregate.count >= 490, "4 MiB samples " + std::to_string(m4.aggregate.count));
  c.expect(m32.aggregate.count >= 490, "32 MiB samples " + std::to_string(m32.aggregate.count));
  c.expect(m4.aggregate.mean_ns < 5e6, "4 MiB mean too high");
  c.expect(m32.aggregate.mean_ns < 20e6, "32 MiB mean too high");
  return c.finish("4 MiB mean " + ms(m4.aggregate.mean_ns) + " (" +
    std::to_string(m4.aggregate.count) + " samples), 32 MiB mean " +
    ms(m32.aggregate.mean_ns));
}

Outcome sublinear_growth()
{
  Checker c;
  const auto & r = size_sweep_results();
  const auto small = r.at(256ull << 10).aggregate.mean_ns;
  const auto large = r.at(32ull << 20).aggregate.mean_ns;
  const auto factor = small > 0 ? large / small : 0;
  c.expect(small > 0 && factor < 20, "growth factor " + num(factor, 1) + "x is not < 20x");
  std::string row;
  for (const auto & [size, report] : r) {
    row += (row.empty() ? "" : ", ") + std::to_string(size >> 10) + " KiB " +
      ms(report.aggregate.mean_ns);
  }
  return c.finish("growth " + num(factor, 1) + "x (" + row + ")");
}

Outcome fanout_fairness()
{
  Checker c;
  std::string detail;
  for (const std::uint32_t consumers : {4u, 8u}) {
    bench::Scenario s;
    s.consumers = consumers;
    s.payload_bytes = 4ull << 20;
    s.frequency_hz = 50;
    s.duration_s = 10;
    const auto report = bench::run_scenario(s, bench_options());
    const auto tag = "1->" + std::to_string(consumers);
    c.expect(report.per_consumer.size() == consumers, tag + " missing consumers");
    c.expect(report.fairness_ratio <= 2.0, tag + " max/min " + num(report.fairness_ratio));
    c.expect(report.aggregate.mean_ns < 10e6, tag + " aggregate mean too high");
    detail += (detail.empty() ? "" : "; ") + tag + " mean " + ms(report.aggregate.mean_ns) +
      " max/min " + num(report.fairness_ratio);
  }
  return c.finish(detail);
}

// ---- 7. distributed barrier ------------------------------------------------

Outcome distributed_barrier()
{
  const auto start = Clock::now();
  Checker c;
  test_util::TempDir dir;
  CoordinatorConfig cc;
  cc.bind.port = 0;
  Coordinator coordinator(cc);
  coordinator.start();
  auto make = [&](const std::string & machine) {
      DaemonConfig config;
      config.machine_id = machine;
      config.coordinator = coordinator.address();
      config.inter_daemon.port = 0;
      config.run_dir = dir.path() / machine;
      auto d = std::make_unique<Daemon>(config);
      d->start();
      return d;
    };
  auto d1 = make("daemon-1");
  c.expect(coordinator.wait_daemons(1, 5s), "daemon-1 did not register");
  auto d2 = make("daemon-2");
  c.expect(coordinator.wait_daemons(2, 5s), "daemon-2 did not register");
  const auto spec =
    "nodes:\n"
    "  - id: A\n"
    "    path: " + test_util::test_node("publisher --size 100000") + "\n"
    "    machine: daemon-1\n"
    "    inputs: {tick: dora/timer/millis/10}\n"
    "    outputs: [data]\n"
    "  - id: B\n"
    "    path: " + test_util::test_node("echo") + "\n"
    "    machine: daemon-1\n"
    "    inputs: {data: A/data}\n"
    "    outputs: [out]\n"
    "  - id: C\n"
    "    path: " + test_util::test_node("subscriber") + "\n"
    "    machine: daemon-2\n"
    "    inputs: {data: B/out}\n";
  const auto call = [&](proto::CliVerb verb, std::vector<std::string> args) {
      return cli_call(coordinator.address(), proto::CliRequest{verb, std::move(args)});
    };
  const auto started = call(proto::CliVerb::Start, {spec});
  std::string uuid;
  if (!started.ok) {
    c.expect(false, "start failed: " + (started.items.empty() ? "" : started.items[0]));
  } else {
    uuid = started.items.at(0);
    c.expect(test_util::wait_until([&] {return d2->stats().remote_frames_received >= 50;}),
      "C received too few messages");
    c.expect(call(proto::CliVerb::Stop, {uuid}).ok, "stop failed");
    c.expect(coordinator.wait_phase(uuid, Phase::Finished, 15s) == Phase::Finished,
      "dataflow did not finish cleanly");
    const auto log = call(proto::CliVerb::Logs, {uuid, "C"});
    c.expect(log.ok && log.items.at(0).find("in order") != std::string::npos,
      "B->C messages out of order");
  }
  const auto s1 = d1->stats();
  const auto s2 = d2->stats();
  c.expect(s1.early_deliveries == 0 && s2.early_deliveries == 0,
    "input delivered before AllNodesReady");
  c.expect(s1.live_children == 0 && s2.live_children == 0, "child processes left behind");
  c.expect(s1.pool.in_use_blocks == 0 && s2.pool.in_use_blocks == 0, "blocks still in use");
  d1.reset();
  d2.reset();
  coordinator.shutdown();
  coordinator.join();
  const auto elapsed = seconds_since(start);
  c.expect(elapsed < 30, "took " + num(elapsed) + " s");
  return c.finish(std::to_string(s2.remote_frames_received) + " remote frames, " +
    num(elapsed) + " s");
}

// ---- 8. dataflow specifications ---------------------------------------------

Outcome dfspec_suite()
{
  using namespace dfspec;
  Checker c;
  const auto golden = parse_file(MINIFLOW_SOURCE_DIR "/tests/data/pubsub.yml");
  c.expect(golden.nodes.size() == 2, "golden spec node count");
  c.expect(validate(golden).empty(), "golden spec has diagnostics");
  c.expect(parse(serialize(golden)) == golden, "golden spec does not round-trip");

  auto first_error = [](const DataflowSpec & spec) -> std::optional<DiagnosticKind> {
      for (const auto & d : validate(spec)) {
        if (d.severity == Severity::Error) {
          return d.kind;
        }
      }
      return std::nullopt;
    };
  c.expect(first_error(parse("nodes:\n  - {id: a, path: x, inputs: {d: ghost/data}}")) ==
    DiagnosticKind::DanglingReference, "dangling reference diagnostic");
  c.expect(first_error(parse("nodes:\n  - {id: a, path: x}\n  - {id: a, path: y}")) ==
    DiagnosticKind::DuplicateNodeId, "duplicate id diagnostic");
  std::optional<Errc> timer_error;
  try {
    parse("nodes:\n  - {id: a, path: x, inputs: {t: dora/timer/millis/fast}}");
  } catch (const Error & e) {
    timer_error = e.code();
  }
  c.expect(timer_error == Errc::BadTimerSyntax, "bad timer grammar diagnostic");

  std::mt19937_64 rng(8);
  int passed = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto spec = spec_gen::random_spec(rng, 20, 3, false);
    const auto problem = spec_gen::check_partition(spec, "local");
    c.expect(problem.empty(), "partition case " + std::to_string(i) + ": " + problem);
    passed += problem.empty() ? 1 : 0;
  }
  return c.finish("partition property " + std::to_string(passed) + "/1000");
}

// ---- 9. protocol fuzz --------------------------------------------------------

Outcome protocol_fuzz()
{
  Checker c;
  proto_gen::Gen gen(9);
  auto & rng = gen.rng();
  std::size_t decoded = 0;
  for (int i = 0; i < 100000; ++i) {
    // Half pure noise, half bit-flipped or truncated valid encodings.
    auto buf = test_util::random_bytes(rng, rng() % 256);
    if (i % 2 == 1) {
      buf = proto::encode_message(gen.message());
      for (auto flips = 1 + rng() % 3; flips > 0 && !buf.empty(); --flips) {
        buf[rng() % buf.size()] ^= static_cast<std::byte>(1u << (rng() % 8));
      }
      if (rng() % 4 == 0) {
        buf.resize(rng() % (buf.size() + 1));
      }
    }
    try {
      const auto m = proto::decode_message(buf);
      c.expect(proto::encode_message(m) == buf, "accepted buffer does not re-encode");
      ++decoded;
    } catch (const Error & e) {
      const auto code = e.code();
      c.expect(code == Errc::UnknownTag || code == Errc::Truncated ||
        code == Errc::MalformedMessage, "unexpected error " + std::string(to_string(code)));
    }
  }
  for (int i = 0; i < 10000; ++i) {
    const auto m = gen.message();
    const auto bytes = proto::encode_message(m);
    c.expect(proto::decode_message(bytes) == m, "valid message does not round-trip");
  }
  return c.finish("100000 random buffers (" + std::to_string(decoded) +
    " decoded), 10000 valid messages round-tripped");
}

// ---- 10. CLI lifecycle ----------------------------------------------------------

struct CliResult
{
  int code = -1;
  std::string output;
};

CliResult run_cli(
  const std::vector<std::string> & args, const fs::path & cwd,
  const std::map<std::string, std::string> & env)
{
  test_util::TempDir scratch;
  process::SpawnOptions options;
  options.args = {MINIFLOW_CLI};
  options.args.insert(options.args.end(), args.begin(), args.end());
  options.cwd = cwd;
  options.env = env;
  options.log_path = scratch.path() / "out.txt";
  auto child = process::spawn(options);
  CliResult r;
  r.code = process::wait(child.pid).code;
  r.output = test_util::read_file(options.log_path);
  return r;
}

Outcome cli_lifecycle()
{
  const auto start = Clock::now();
  Checker c;
  test_util::TempDir dir;
  fs::create_symlink(MINIFLOW_EXAMPLE_NODE, dir.path() / "publisher");
  fs::create_symlink(MINIFLOW_EXAMPLE_NODE, dir.path() / "subscriber");
  fs::copy_file(MINIFLOW_SOURCE_DIR "/tests/data/pubsub.yml", dir.path() / "pubsub.yml");
  const auto port = [] {
      auto fd = io::tcp_listen({"127.0.0.1", 0});
      return io::local_port(fd.get());
    }();
  const std::map<std::string, std::string> env{
    {"MINIFLOW_COORDINATOR_ADDR", "127.0.0.1:" + std::to_string(port)},
    {"XDG_RUNTIME_DIR", dir.path().string()}};
  auto cli = [&](std::vector<std::string> args) {return run_cli(args, dir.path(), env);};
  auto has = [](const CliResult & r, const std::string & part) {
      return r.output.find(part) != std::string::npos;
    };

  c.expect(cli({"check"}).code != 0, "check before up returned 0");
  c.expect(cli({"up"}).code == 0, "up failed");
  c.expect(cli({"check"}).code == 0, "check after up is not 0");
  auto r = cli({"start", "pubsub.yml"});
  c.expect(r.code == 0, "start failed: " + r.output);
  const auto uuid = r.output.substr(0, r.output.find('\n'));
  r = cli({"list"});
  c.expect(r.code == 0 && has(r, uuid) && has(r, "running"), "list does not show running");
  c.expect(test_util::wait_until([&] {
      const auto logs = cli({"logs", uuid, "subscriber"});
      return logs.code == 0 && has(logs, "received");
    }, 20s), "logs empty");
  c.expect(cli({"stop", uuid}).code == 0, "stop failed");
  c.expect(cli({"destroy"}).code == 0, "destroy failed");
  r = cli({"check"});
  c.expect(r.code != 0, "check after destroy returned 0");
  const auto elapsed = seconds_since(start);
  c.expect(elapsed < 60, "took " + num(elapsed) + " s");
  return c.finish("dataflow " + uuid + ", " + num(elapsed) + " s");
}

struct Criterion
{
  int number;
  std::string title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char ** argv)
{
  init_logging();
  set_log_level("warn");
  ::signal(SIGPIPE, SIG_IGN);

  const std::vector<Criterion> criteria{
    {1, "envelope round trip", envelope_round_trip},
    {2, "zero deserialization", [] {
        return zero_deserialization(size_sweep_results().at(4ull << 20));
      }},
    {3, "allocator oracle equivalence", allocator_oracle},
    {4, "local latency", local_latency},
    {5, "sub-linear latency growth", sublinear_growth},
    {6, "fan-out fairness", fanout_fairness},
    {7, "distributed barrier", distributed_barrier},
    {8, "dataflow specification suite", dfspec_suite},
    {9, "protocol fuzz", protocol_fuzz},
    {10, "CLI lifecycle", cli_lifecycle},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    selected.insert(std::atoi(argv[i]));
  }

  bool all = true;
  for (const auto & criterion : criteria) {
    if (!selected.empty() && selected.count(criterion.number) == 0) {
      continue;
    }
    Outcome outcome;
    try {
      outcome = criterion.run();
    } catch (const std::exception & e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    all = all && outcome.pass;
    std::cout << "criterion " << criterion.number << ": " << (outcome.pass ? "PASS" : "FAIL") <<
      " - " << criterion.title << " (" << outcome.detail << ")" << std::endl;
  }
  return all ? 0 : 1;
}
