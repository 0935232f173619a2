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


#include "miniflow/bench.hpp"

#include <stdlib.h>
#include <time.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "miniflow/daemon.hpp"
#include "miniflow/dfspec.hpp"
#include "miniflow/error.hpp"
#include "miniflow/log.hpp"
#include "miniflow/process.hpp"

namespace miniflow::bench
{

namespace
{

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

std::string quote(const std::string & text)
{
  std::string out = "'";
  for (char c : text) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  return out + "'";
}

// YAML double-quoted scalar.
std::string yaml_string(const std::string & text)
{
  std::string out = "\"";
  for (char c : text) {
    if (c == '"' || c == '\\') {
      out += '\\';
    }
    out += c;
  }
  return out + "\"";
}

std::string read_text(const fs::path & path)
{
  std::ifstream in(path, std::ios::binary);
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

std::string fixed(double value, int digits)
{
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << value;
  return out.str();
}

fs::path make_temp_dir()
{
  std::string pattern = (fs::temp_directory_path() / "miniflow-bench-XXXXXX").string();
  if (::mkdtemp(pattern.data()) == nullptr) {
    fail(Errc::IoError, "cannot create a scratch directory");
  }
  return pattern;
}

std::string producer_id(std::uint32_t i) {return "p" + std::to_string(i);}
std::string consumer_id(std::uint32_t i) {return "c" + std::to_string(i);}

}  // namespace

void Scenario::validate() const
{
  if (producers < 1 || consumers < 1) {
    fail(Errc::InvalidArgument, "a scenario needs at least one producer and one consumer");
  }
  if (!(frequency_hz > 0) || !(duration_s > 0) || warmup_s < 0) {
    fail(Errc::InvalidArgument, "frequency and duration must be positive");
  }
  if (frequency_hz * duration_s > 1e7) {
    fail(Errc::InvalidArgument, "frequency x duration exceeds 10^7 samples");
  }
  if (transport == Transport::ForceInline && payload_bytes > (48u << 20)) {
    fail(Errc::InvalidArgument, "inline transport is limited to 48 MiB payloads");
  }
}

std::uint64_t Scenario::messages_per_producer() const
{
  return static_cast<std::uint64_t>(std::llround(frequency_hz * (warmup_s + duration_s)));
}

std::uint64_t Scenario::warmup_messages() const
{
  return static_cast<std::uint64_t>(std::llround(frequency_hz * warmup_s));
}

std::uint64_t Scenario::timer_interval_ms() const
{
  return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(1000.0 / frequency_hz)));
}

std::uint64_t nearest_rank(const std::vector<std::uint64_t> & sorted, double percentile)
{
  if (sorted.empty()) {
    return 0;
  }
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

Summary summarize(std::vector<std::uint64_t> latencies)
{
  Summary s;
  if (latencies.empty()) {
    return s;
  }
  std::sort(latencies.begin(), latencies.end());
  s.count = latencies.size();
  long double total = 0;
  for (auto v : latencies) {
    total += v;
  }
  s.mean_ns = static_cast<double>(total / latencies.size());
  s.min_ns = latencies.front();
  s.p50_ns = nearest_rank(latencies, 50);
  s.p90_ns = nearest_rank(latencies, 90);
  s.p99_ns = nearest_rank(latencies, 99);
  s.max_ns = latencies.back();
  return s;
}

BenchReport aggregate(const Scenario & scenario, const std::vector<LatencySample> & samples)
{
  BenchReport report;
  report.scenario = scenario;
  report.samples = samples;
  std::vector<std::uint64_t> all;
  std::map<std::string, std::vector<std::uint64_t>> by_consumer;
  for (const auto & s : samples) {
    all.push_back(s.latency_ns());
    by_consumer[s.consumer].push_back(s.latency_ns());
  }
  report.aggregate = summarize(std::move(all));
  double lo = 0;
  double hi = 0;
  for (auto & [consumer, values] : by_consumer) {
    const auto summary = summarize(std::move(values));
    report.per_consumer[consumer] = summary;
    lo = lo == 0 ? summary.mean_ns : std::min(lo, summary.mean_ns);
    hi = std::max(hi, summary.mean_ns);
  }
  report.fairness_ratio = lo > 0 ? hi / lo : 1;
  return report;
}

std::string dataflow_yaml(
  const Scenario & scenario, const fs::path & bench_node, const fs::path & out_dir)
{
  const bool split = scenario.topology == Topology::TwoDaemonLocalhost;
  std::ostringstream y;
  y << "nodes:\n";
  for (std::uint32_t p = 0; p < scenario.producers; ++p) {
    const auto command = quote(bench_node.string()) + " producer --size " +
      std::to_string(scenario.payload_bytes) + " --count " +
      std::to_string(scenario.messages_per_producer()) + " --out " + quote(out_dir.string());
    y << "  - id: " << producer_id(p) << "\n"
      << "    path: " << yaml_string(command) << "\n"
      << "    inputs:\n"
      << "      tick: dora/timer/millis/" << scenario.timer_interval_ms() << "\n"
      << "    outputs: [data]\n";
    if (split) {
      y << "    machine: a\n";
    }
  }
  for (std::uint32_t c = 0; c < scenario.consumers; ++c) {
    const auto command = quote(bench_node.string()) + " consumer --out " +
      quote(out_dir.string());
    y << "  - id: " << consumer_id(c) << "\n"
      << "    path: " << yaml_string(command) << "\n"
      << "    inputs:\n";
    for (std::uint32_t p = 0; p < scenario.producers; ++p) {
      y << "      " << producer_id(p) << ": " << producer_id(p) << "/data\n";
    }
    if (split) {
      y << "    machine: b\n";
    }
  }
  return y.str();
}

// ---- CPU accounting ---------------------------------------------------------

std::chrono::nanoseconds process_cpu_time(pid_t pid)
{
  clockid_t clock;
  timespec ts{};
  if (::clock_getcpuclockid(pid, &clock) == 0 && ::clock_gettime(clock, &ts) == 0) {
    return std::chrono::seconds(ts.tv_sec) + std::chrono::nanoseconds(ts.tv_nsec);
  }
  // Fall back to the tick counters in /proc.
  std::ifstream in("/proc/" + std::to_string(pid) + "/stat");
  std::string text;
  if (!in || !std::getline(in, text)) {
    fail(Errc::AccountingUnavailable, "cannot read CPU time of pid " + std::to_string(pid));
  }
  const auto close = text.rfind(')');
  std::istringstream fields(text.substr(close + 2));
  std::string field;
  std::uint64_t utime = 0;
  std::uint64_t stime = 0;
  // Fields after the command name start at "state" (field 3).
  for (int i = 3; i <= 15 && fields >> field; ++i) {
    if (i == 14) {
      utime = std::stoull(field);
    } else if (i == 15) {
      stime = std::stoull(field);
    }
  }
  const auto hz = static_cast<std::uint64_t>(::sysconf(_SC_CLK_TCK));
  return std::chrono::nanoseconds((utime + stime) * 1'000'000'000ull / hz);
}

struct CpuSampler::Impl
{
  struct Point
  {
    Clock::time_point at;
    std::chrono::nanoseconds cpu;
  };

  std::chrono::milliseconds period;
  mutable std::mutex mu;
  std::condition_variable cv;
  std::map<std::string, pid_t> pids;
  std::map<std::string, std::vector<Point>> points;
  bool stopping = false;
  std::thread thread;

  void sample_once()
  {
    const auto now = Clock::now();
    for (const auto & [name, pid] : pids) {
      try {
        points[name].push_back({now, process_cpu_time(pid)});
      } catch (const Error &) {
        // The process has exited.
      }
    }
  }
};

CpuSampler::CpuSampler(std::chrono::milliseconds period)
: impl_(std::make_unique<Impl>())
{
  impl_->period = period;
}

CpuSampler::~CpuSampler()
{
  stop();
}

void CpuSampler::watch(const std::string & name, pid_t pid)
{
  std::lock_guard lock(impl_->mu);
  impl_->pids[name] = pid;
}

void CpuSampler::start()
{
  impl_->thread = std::thread([this] {
        std::unique_lock lock(impl_->mu);
        auto next = Clock::now();
        while (!impl_->stopping) {
          impl_->sample_once();
          next += impl_->period;
          impl_->cv.wait_until(lock, next, [&] {return impl_->stopping;});
        }
      });
}

void CpuSampler::stop()
{
  {
    std::lock_guard lock(impl_->mu);
    impl_->stopping = true;
  }
  impl_->cv.notify_all();
  if (impl_->thread.joinable()) {
    impl_->thread.join();
  }
}

std::optional<double> CpuSampler::utilization(
  const std::string & name, Clock::time_point from, Clock::time_point to) const
{
  std::lock_guard lock(impl_->mu);
  auto it = impl_->points.find(name);
  if (it == impl_->points.end()) {
    return std::nullopt;
  }
  const Impl::Point * first = nullptr;
  const Impl::Point * last = nullptr;
  for (const auto & p : it->second) {
    if (p.at >= from && first == nullptr) {
      first = &p;
    }
    if (p.at <= to) {
      last = &p;
    }
  }
  if (first == nullptr || last == nullptr || last->at <= first->at) {
    return std::nullopt;
  }
  const double cpu = std::chrono::duration<double>(last->cpu - first->cpu).count();
  const double wall = std::chrono::duration<double>(last->at - first->at).count();
  return 100.0 * cpu / wall;
}

// ---- running ----------------------------------------------------------------

BenchReport run_scenario(const Scenario & scenario, const RunOptions & options)
{
  scenario.validate();
  init_logging();
  process_cpu_time(::getpid());

  const auto bench_node = options.bench_node.empty() ?
    process::self_executable().parent_path() / "miniflow-bench-node" : options.bench_node;
  const bool own_dir = options.work_dir.empty();
  const auto work = own_dir ? make_temp_dir() : options.work_dir;
  struct Cleanup
  {
    fs::path dir;
    ~Cleanup()
    {
      std::error_code ec;
      if (!dir.empty()) {
        fs::remove_all(dir, ec);
      }
    }
  } cleanup{own_dir ? work : fs::path()};
  const auto out_dir = work / "samples";
  fs::remove_all(out_dir);
  fs::create_directories(out_dir);

  const auto spec = dfspec::parse(dataflow_yaml(scenario, bench_node, out_dir));
  const bool split = scenario.topology == Topology::TwoDaemonLocalhost;
  auto subs = dfspec::partition(spec, split ? "a" : "local");
  for (auto & [machine, sub] : subs) {
    sub.working_dir = work.string();
  }

  auto config_for = [&](const std::string & machine) {
      DaemonConfig c;
      c.machine_id = machine;
      c.run_dir = work / "run" / machine;
      c.inter_daemon.port = 0;
      c.max_free_bytes = std::max<std::uint64_t>(c.max_free_bytes,
          4 * (scenario.payload_bytes + (1u << 20)) * std::max(scenario.consumers, scenario.producers));
      switch (scenario.transport) {
        case Transport::ForceInline:
          c.inline_threshold = UINT64_MAX;
          break;
        case Transport::ForceShm:
          c.inline_threshold = 0;
          break;
        case Transport::Auto:
          break;
      }
      return c;
    };

  std::vector<std::unique_ptr<Daemon>> daemons;
  if (split) {
    daemons.push_back(std::make_unique<Daemon>(config_for("b")));
    auto a = config_for("a");
    a.peers["b"] = io::HostPort{"127.0.0.1", daemons[0]->inter_daemon_port()};
    daemons.push_back(std::make_unique<Daemon>(a));
  } else {
    daemons.push_back(std::make_unique<Daemon>(config_for("local")));
  }
  for (auto & d : daemons) {
    d->start();
  }
  const auto uuid = proto::random_uuid();
  for (auto & d : daemons) {
    d->spawn_dataflow(subs.at(d->config().machine_id), uuid);
  }
  for (auto & d : daemons) {
    if (!d->wait_running(uuid, std::chrono::seconds(60))) {
      fail(Errc::ReadinessTimeout, "benchmark dataflow did not start");
    }
  }
  const auto t_start = Clock::now();

  CpuSampler sampler;
  std::vector<std::string> names;
  for (const auto & node : spec.nodes) {
    names.push_back(node.id);
  }
  for (const auto & name : names) {
    const auto pid_file = out_dir / (name + ".pid");
    const auto deadline = Clock::now() + std::chrono::seconds(5);
    while (!fs::exists(pid_file) && Clock::now() < deadline) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    pid_t pid = 0;
    std::ifstream(pid_file) >> pid;
    if (pid > 0) {
      sampler.watch(name, pid);
    }
  }
  sampler.start();

  const auto total = std::chrono::duration<double>(scenario.warmup_s + scenario.duration_s);
  const auto limit = std::chrono::duration_cast<std::chrono::milliseconds>(total * 3) +
    std::chrono::seconds(30);
  BenchReport report;
  bool finished = true;
  for (auto & d : daemons) {
    if (!d->wait_finished(uuid, limit)) {
      finished = false;
    }
  }
  if (!finished) {
    for (auto & d : daemons) {
      try {
        d->stop_dataflow(uuid);
      } catch (const Error &) {
      }
    }
    for (auto & d : daemons) {
      d->wait_finished(uuid, std::chrono::seconds(30));
    }
  }
  sampler.stop();
  std::uint64_t queue_drops = 0;
  for (auto & d : daemons) {
    queue_drops += d->stats().queue_drops;
  }
  daemons.clear();

  std::vector<LatencySample> samples;
  std::uint64_t drops = 0;
  const auto expected = scenario.messages_per_producer() * scenario.producers;
  for (std::uint32_t c = 0; c < scenario.consumers; ++c) {
    const auto name = consumer_id(c);
    auto mine = parse_samples_csv(read_text(out_dir / (name + ".csv")));
    drops += expected > mine.size() ? expected - mine.size() : 0;
    for (auto & s : mine) {
      if (s.seq >= scenario.warmup_messages()) {
        samples.push_back(std::move(s));
      }
    }
  }
  report = aggregate(scenario, samples);
  report.drops = drops;
  report.queue_drops = queue_drops;

  const auto from = t_start + std::chrono::duration_cast<Clock::duration>(
    std::chrono::duration<double>(scenario.warmup_s));
  const auto to = from + std::chrono::duration_cast<Clock::duration>(
    std::chrono::duration<double>(scenario.duration_s));
  double producer_total = 0;
  double consumer_total = 0;
  for (const auto & name : names) {
    const auto pct = sampler.utilization(name, from, to);
    if (!pct) {
      continue;
    }
    report.cpu_pct[name] = *pct;
    (name[0] == 'p' ? producer_total : consumer_total) += *pct;
  }
  report.producer_cpu_pct = producer_total / scenario.producers;
  report.consumer_cpu_pct = consumer_total / scenario.consumers;

  if (!options.raw_csv.empty()) {
    std::ofstream(options.raw_csv) << samples_csv(report.samples);
  }
  return report;
}

CpuProfile cpu_profile(const Scenario & scenario, const RunOptions & options)
{
  const auto report = run_scenario(scenario, options);
  return {report.producer_cpu_pct, report.consumer_cpu_pct};
}

std::vector<SweepRow> size_sweep(
  const std::vector<std::uint64_t> & sizes, const Scenario & base, const RunOptions & options)
{
  std::vector<SweepRow> rows;
  for (const auto size : sizes) {
    auto scenario = base;
    scenario.payload_bytes = size;
    rows.push_back({static_cast<double>(size), run_scenario(scenario, options)});
  }
  return rows;
}

std::vector<SweepRow> frequency_sweep(
  const std::vector<double> & frequencies, const Scenario & base, const RunOptions & options)
{
  std::vector<SweepRow> rows;
  for (const auto hz : frequencies) {
    auto scenario = base;
    scenario.frequency_hz = hz;
    rows.push_back({hz, run_scenario(scenario, options)});
  }
  return rows;
}

// ---- CSV --------------------------------------------------------------------

std::string sweep_csv(const std::vector<SweepRow> & rows, const std::string & key_column)
{
  std::ostringstream out;
  out << key_column << ",mean_ns,p50_ns,p90_ns,p99_ns,max_ns,samples\n";
  for (const auto & row : rows) {
    const auto & s = row.report.aggregate;
    const bool integral = row.key == std::floor(row.key);
    out << (integral ? std::to_string(static_cast<std::uint64_t>(row.key)) : fixed(row.key, 3)) <<
      ',' << fixed(s.mean_ns, 1) << ',' << s.p50_ns << ',' << s.p90_ns << ',' << s.p99_ns <<
      ',' << s.max_ns << ',' << s.count << '\n';
  }
  return out.str();
}

std::string consumers_csv(const BenchReport & report)
{
  std::ostringstream out;
  out << "consumer,mean_ns,p50_ns,p90_ns,p99_ns,max_ns,samples\n";
  auto line = [&](const std::string & name, const Summary & s) {
      out << name << ',' << fixed(s.mean_ns, 1) << ',' << s.p50_ns << ',' << s.p90_ns << ',' <<
        s.p99_ns << ',' << s.max_ns << ',' << s.count << '\n';
    };
  for (const auto & [name, s] : report.per_consumer) {
    line(name, s);
  }
  line("all", report.aggregate);
  return out.str();
}

std::string cpu_csv(const BenchReport & report)
{
  std::ostringstream out;
  out << "node,cpu_pct\n";
  for (const auto & [name, pct] : report.cpu_pct) {
    out << name << ',' << fixed(pct, 2) << '\n';
  }
  out << "producers," << fixed(report.producer_cpu_pct, 2) << '\n';
  out << "consumers," << fixed(report.consumer_cpu_pct, 2) << '\n';
  return out.str();
}

std::string samples_csv(const std::vector<LatencySample> & samples)
{
  std::ostringstream out;
  out << "seq,consumer,send_ts_ns,recv_ts_ns\n";
  for (const auto & s : samples) {
    out << s.seq << ',' << s.consumer << ',' << s.send_ts_ns << ',' << s.recv_ts_ns << '\n';
  }
  return out.str();
}

std::vector<LatencySample> parse_samples_csv(const std::string & text)
{
  std::vector<LatencySample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty() || (number == 1 && line.rfind("seq,", 0) == 0)) {
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream fields(line);
    std::string col;
    while (std::getline(fields, col, ',')) {
      cols.push_back(col);
    }
    try {
      if (cols.size() != 4) {
        throw std::invalid_argument("column count");
      }
      out.push_back({std::stoull(cols[0]), cols[1], std::stoull(cols[2]), std::stoull(cols[3])});
    } catch (const std::exception &) {
      fail(Errc::MalformedMessage, "bad sample line " + std::to_string(number) + ": " + line);
    }
  }
  return out;
}

}  // namespace miniflow::bench
