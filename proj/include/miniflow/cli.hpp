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


#ifndef MINIFLOW__CLI_HPP_
#define MINIFLOW__CLI_HPP_

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "miniflow/coordinator.hpp"
#include "miniflow/io.hpp"

namespace miniflow::cli
{

enum class Format {Table, JsonLines};

struct CliConfig
{
  io::HostPort coordinator{"127.0.0.1", 53290};
  Format format = Format::Table;
};

/// 127.0.0.1:53290 unless MINIFLOW_COORDINATOR_ADDR is set.
/// Throws Error(InvalidArgument) for an unparseable override.
io::HostPort default_coordinator_address();

/// Entry point of the `miniflow` executable; `args` excludes the program
/// name. Data goes to `out`, diagnostics to `err`; returns the exit code.
int main(const std::vector<std::string> & args, std::ostream & out, std::ostream & err);

// Commands. Failures throw Error; codes are relayed from the coordinator.

struct Liveness
{
  bool coordinator = false;
  std::vector<std::string> daemons;
  bool all() const {return coordinator && !daemons.empty();}
};

Liveness check(const CliConfig & config);
/// Throws Error(AlreadyRunning | Timeout | SpawnFailed).
void up(const CliConfig & config, const std::filesystem::path & log_dir);
/// Throws Error(NotRunning | Timeout).
void destroy(const CliConfig & config);
/// Returns the new dataflow's uuid. Throws Error(BadSpec | coordinator codes).
std::string start(const CliConfig & config, const std::filesystem::path & spec, const std::string & name);
void stop(const CliConfig & config, const std::string & uuid_or_name);
std::vector<DataflowRow> list(const CliConfig & config);
std::string logs(const CliConfig & config, const std::string & uuid_or_name, const std::string & node);

std::string format_rows(const std::vector<DataflowRow> & rows, Format format);
std::string format_liveness(const Liveness & liveness, const CliConfig & config, Format format);

/// Mermaid text, or the HTML page wrapping it.
std::string graph_html(const std::string & mermaid, const std::string & title);

enum class TemplateKind {Dataflow, Node};
/// Creates `dir` with a runnable template. Throws Error(TemplateExists).
void scaffold(TemplateKind kind, const std::filesystem::path & dir,
  const std::filesystem::path & example_node);
/// Runs each node's build command in order. Throws Error(BuildFailed).
void build(const std::filesystem::path & spec, std::ostream & out);

}  // namespace miniflow::cli

#endif  // MINIFLOW__CLI_HPP_
