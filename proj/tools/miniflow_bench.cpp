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


// Benchmark driver.
//
//   miniflow-bench size-sweep --sizes 256KiB,4MiB,32MiB --freq 50 --duration 10 --out sizes.csv
//   miniflow-bench freq-sweep --freq 20,50,200 --size 4MiB --out freqs.csv
//   miniflow-bench fanout --consumers 8 --size 4MiB --out fanout.csv
//   miniflow-bench fanin --producers 4 --size 4MiB --out fanin.csv
//   miniflow-bench cpu --size 4MiB --freq 50 --out cpu.csv
//
// Raw samples go to <out stem>.samples.csv next to the summary.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "miniflow/bench.hpp"
#include "miniflow/error.hpp"

namespace bench = miniflow::bench;
namespace fs = std::filesystem;

namespace
{

std::uint64_t parse_size(const std::string & text)
{
  std::size_t end = 0;
  const auto value = std::stod(text, &end);
  std::string unit = text.substr(end);
  for (auto & c : unit) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  double scale = 1;
  if (unit == "k" || unit == "kib" || unit == "kb") {
    scale = 1024;
  } else if (unit == "m" || unit == "mib" || unit == "mb") {
    scale = 1024.0 * 1024;
  } else if (unit == "g" || unit == "gib" || unit == "gb") {
    scale = 1024.0 * 1024 * 1024;
  } else if (!unit.empty() && unit != "b") {
    throw std::invalid_argument("unknown size unit: " + text);
  }
  return static_cast<std::uint64_t>(value * scale);
}

void write_file(const fs::path & path, const std::string & text)
{
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out << text;
}

fs::path samples_path(const fs::path & out)
{
  if (out.empty() || out == "-") {
    return "samples.csv";
  }
  return out.parent_path() / (out.stem().string() + ".samples.csv");
}

void print_report(const std::string & label, const bench::BenchReport & r)
{
  std::cerr << label << ": samples=" << r.aggregate.count <<
    " mean_ms=" << r.aggregate.mean_ns / 1e6 <<
    " p99_ms=" << static_cast<double>(r.aggregate.p99_ns) / 1e6 <<
    " drops=" << r.drops << " queue_drops=" << r.queue_drops << std::endl;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"miniflow benchmark harness"};
  app.require_subcommand(1);

  std::vector<std::string> sizes = {"256KiB", "1MiB", "4MiB", "16MiB", "32MiB"};
  std::string size = "4MiB";
  std::vector<double> freqs;
  double duration = 10;
  double warmup = 2;
  std::uint32_t consumers = 4;
  std::uint32_t producers = 4;
  std::string transport = "auto";
  std::string topology = "local";
  fs::path out;

  auto common = [&](CLI::App * sub) {
      sub->add_option("--freq", freqs, "publish frequency in Hz (list for freq-sweep)")
      ->delimiter(',');
      sub->add_option("--duration", duration, "measured seconds per run");
      sub->add_option("--warmup", warmup, "discarded leading seconds");
      sub->add_option("--transport", transport)
      ->check(CLI::IsMember({"auto", "force-inline", "force-shm"}));
      sub->add_option("--topology", topology)
      ->check(CLI::IsMember({"local", "two-daemon-localhost"}));
      sub->add_option("--out", out, "summary CSV (stdout when omitted)");
    };
  auto * size_cmd = app.add_subcommand("size-sweep", "latency versus payload size");
  size_cmd->add_option("--sizes", sizes, "payload sizes, e.g. 256KiB,4MiB")->delimiter(',');
  common(size_cmd);
  auto * freq_cmd = app.add_subcommand("freq-sweep", "latency versus frequency");
  freq_cmd->add_option("--size", size, "payload size");
  common(freq_cmd);
  auto * fanout_cmd = app.add_subcommand("fanout", "one producer, N consumers");
  fanout_cmd->add_option("--consumers", consumers);
  fanout_cmd->add_option("--size", size, "payload size");
  common(fanout_cmd);
  auto * fanin_cmd = app.add_subcommand("fanin", "N producers, one consumer");
  fanin_cmd->add_option("--producers", producers);
  fanin_cmd->add_option("--size", size, "payload size");
  common(fanin_cmd);
  auto * cpu_cmd = app.add_subcommand("cpu", "producer and consumer CPU utilization");
  cpu_cmd->add_option("--size", size, "payload size");
  common(cpu_cmd);
  CLI11_PARSE(app, argc, argv);

  try {
    bench::Scenario base;
    base.duration_s = duration;
    base.warmup_s = warmup;
    base.frequency_hz = freqs.empty() ? 50 : freqs.front();
    base.payload_bytes = parse_size(size);
    base.transport = transport == "force-inline" ? bench::Transport::ForceInline :
      transport == "force-shm" ? bench::Transport::ForceShm : bench::Transport::Auto;
    base.topology = topology == "two-daemon-localhost" ?
      bench::Topology::TwoDaemonLocalhost : bench::Topology::Local;

    std::vector<bench::LatencySample> raw;
    auto keep = [&](const bench::BenchReport & r) {
        raw.insert(raw.end(), r.samples.begin(), r.samples.end());
      };

    if (size_cmd->parsed()) {
      std::vector<std::uint64_t> bytes;
      for (const auto & s : sizes) {
        bytes.push_back(parse_size(s));
      }
      std::vector<bench::SweepRow> rows;
      for (const auto b : bytes) {
        auto rows_one = bench::size_sweep({b}, base);
        print_report(std::to_string(b) + " B", rows_one[0].report);
        keep(rows_one[0].report);
        rows.push_back(std::move(rows_one[0]));
      }
      write_file(out, bench::sweep_csv(rows, "size_bytes"));
    } else if (freq_cmd->parsed()) {
      if (freqs.empty()) {
        freqs = {20, 50, 200};
      }
      std::vector<bench::SweepRow> rows;
      for (const auto hz : freqs) {
        auto rows_one = bench::frequency_sweep({hz}, base);
        print_report(std::to_string(hz) + " Hz", rows_one[0].report);
        keep(rows_one[0].report);
        rows.push_back(std::move(rows_one[0]));
      }
      write_file(out, bench::sweep_csv(rows, "frequency_hz"));
    } else if (fanout_cmd->parsed() || fanin_cmd->parsed()) {
      auto scenario = base;
      if (fanout_cmd->parsed()) {
        scenario.consumers = consumers;
      } else {
        scenario.producers = producers;
      }
      const auto report = bench::run_scenario(scenario);
      print_report(fanout_cmd->parsed() ? "fanout" : "fanin", report);
      std::cerr << "fairness max/min=" << report.fairness_ratio << std::endl;
      keep(report);
      write_file(out, bench::consumers_csv(report));
    } else {
      const auto report = bench::run_scenario(base);
      print_report("cpu", report);
      keep(report);
      write_file(out, bench::cpu_csv(report));
    }
    write_file(samples_path(out), bench::samples_csv(raw));
    return 0;
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
