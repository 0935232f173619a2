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


#ifndef MINIFLOW__BENCH_HPP_
#define MINIFLOW__BENCH_HPP_

#include <sys/types.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace miniflow::bench
{

enum class Transport {Auto, ForceInline, ForceShm};
enum class Topology {Local, TwoDaemonLocalhost};

struct Scenario
{
  std::uint32_t producers = 1;
  std::uint32_t consumers = 1;
  std::uint64_t payload_bytes = 4u << 20;
  double frequency_hz = 50;
  double duration_s = 10;
  /// Leading window whose samples are discarded.
  double warmup_s = 2;
  Transport transport = Transport::Auto;
  Topology topology = Topology::Local;

  /// Throws Error(InvalidArgument).
  void validate() const;
  /// Messages each producer publishes, warm-up included.
  std::uint64_t messages_per_producer() const;
  std::uint64_t warmup_messages() const;
  /// Timer period driving the producers.
  std::uint64_t timer_interval_ms() const;
};

struct LatencySample
{
  std::uint64_t seq = 0;
  std::string consumer;
  std::uint64_t send_ts_ns = 0;
  std::uint64_t recv_ts_ns = 0;

  std::uint64_t latency_ns() const {return recv_ts_ns - send_ts_ns;}
  bool operator==(const LatencySample &) const = default;
};

struct Summary
{
  std::uint64_t count = 0;
  double mean_ns = 0;
  std::uint64_t min_ns = 0;
  std::uint64_t p50_ns = 0;
  std::uint64_t p90_ns = 0;
  std::uint64_t p99_ns = 0;
  std::uint64_t max_ns = 0;

  bool operator==(const Summary &) const = default;
};

/// Nearest-rank percentile of an ascending sequence: the value at rank
/// ceil(p/100 * n), with p = 0 giving the first value. Empty input gives 0.
std::uint64_t nearest_rank(const std::vector<std::uint64_t> & sorted, double percentile);
Summary summarize(std::vector<std::uint64_t> latencies);

struct BenchReport
{
  Scenario scenario;
  Summary aggregate;
  std::map<std::string, Summary> per_consumer;
  /// Messages published but never received, summed over consumers.
  std::uint64_t drops = 0;
  /// Events dropped by bounded daemon queues.
  std::uint64_t queue_drops = 0;
  /// Mean CPU over the measurement window; one saturated core is 100.
  std::map<std::string, double> cpu_pct;
  double producer_cpu_pct = 0;
  double consumer_cpu_pct = 0;
  /// max/min of per-consumer mean latencies (1 for a single consumer).
  double fairness_ratio = 1;
  std::vector<LatencySample> samples;
};

/// Builds the report from raw samples (warm-up already removed).
BenchReport aggregate(const Scenario & scenario, const std::vector<LatencySample> & samples);

struct RunOptions
{
  /// The benchmark node executable; next to the running program when empty.
  std::filesystem::path bench_node;
  /// Scratch directory for samples and logs; a fresh temp dir when empty.
  std::filesystem::path work_dir;
  /// Raw samples are also written here when set.
  std::filesystem::path raw_csv;
};

/// Dataflow specification for a scenario, writing samples into `out_dir`.
std::string dataflow_yaml(
  const Scenario & scenario, const std::filesystem::path & bench_node,
  const std::filesystem::path & out_dir);

/// Runs one scenario end to end on in-process daemons.
/// Throws Error(InvalidArgument | SpawnFailed | AccountingUnavailable | Timeout).
BenchReport run_scenario(const Scenario & scenario, const RunOptions & options = {});

struct CpuProfile
{
  double producer_cpu_pct = 0;
  double consumer_cpu_pct = 0;
};

CpuProfile cpu_profile(const Scenario & scenario, const RunOptions & options = {});

struct SweepRow
{
  double key = 0;  // payload bytes or frequency
  BenchReport report;
};

std::vector<SweepRow> size_sweep(
  const std::vector<std::uint64_t> & sizes, const Scenario & base, const RunOptions & options = {});
std::vector<SweepRow> frequency_sweep(
  const std::vector<double> & frequencies, const Scenario & base, const RunOptions & options = {});

// CSV

/// Header "size_bytes,mean_ns,p50_ns,p90_ns,p99_ns,max_ns,samples"
/// (first column "frequency_hz" for frequency sweeps).
std::string sweep_csv(const std::vector<SweepRow> & rows, const std::string & key_column);
/// One row per consumer plus an "all" row.
std::string consumers_csv(const BenchReport & report);
std::string cpu_csv(const BenchReport & report);
std::string samples_csv(const std::vector<LatencySample> & samples);
/// Throws Error(MalformedMessage) on a bad line.
std::vector<LatencySample> parse_samples_csv(const std::string & text);

/// Cumulative user+system CPU time of a process. Throws Error(AccountingUnavailable).
std::chrono::nanoseconds process_cpu_time(pid_t pid);

/// Samples process CPU times at a fixed rate on a background thread.
class CpuSampler
{
public:
  explicit CpuSampler(std::chrono::milliseconds period = std::chrono::milliseconds(100));
  ~CpuSampler();
  CpuSampler(const CpuSampler &) = delete;
  CpuSampler & operator=(const CpuSampler &) = delete;

  void watch(const std::string & name, pid_t pid);
  void start();
  void stop();
  /// Utilization of `name` between the samples nearest to [from, to].
  std::optional<double> utilization(
    const std::string & name, std::chrono::steady_clock::time_point from,
    std::chrono::steady_clock::time_point to) const;

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace miniflow::bench

#endif  // MINIFLOW__BENCH_HPP_
