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

#ifndef MINIFLOW__DFSPEC_HPP_
#define MINIFLOW__DFSPEC_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace miniflow::dfspec
{

struct UserOutput
{
  std::string node_id;
  std::string output_id;

  bool operator==(const UserOutput &) const = default;
};

struct Timer
{
  std::uint64_t interval_ms = 0;

  bool operator==(const Timer &) const = default;
};

using InputSource = std::variant<UserOutput, Timer>;

inline constexpr std::string_view kTimerPrefix = "dora/timer/millis/";

/// "dora/timer/millis/<N>" -> Timer{N}; "<node>/<output>" -> UserOutput.
/// Throws Error(BadTimerSyntax) or Error(SyntaxError).
InputSource parse_input_source(std::string_view text);
std::string to_string(const InputSource & source);

struct InputBinding
{
  std::string id;
  InputSource source;

  bool operator==(const InputBinding &) const = default;
};

struct NodeSpec
{
  std::string id;
  std::string command;
  std::optional<std::string> build;
  std::optional<std::string> machine;
  std::map<std::string, std::string> env;
  std::vector<InputBinding> inputs;
  std::vector<std::string> outputs;

  bool operator==(const NodeSpec &) const = default;
  const InputBinding * find_input(std::string_view id) const;
  bool has_output(std::string_view id) const;
};

struct DataflowSpec
{
  std::vector<NodeSpec> nodes;

  bool operator==(const DataflowSpec &) const = default;
  const NodeSpec * find(std::string_view node_id) const;
};

/// Maps a YAML document onto a DataflowSpec. Unknown keys are rejected.
/// Throws Error(SyntaxError | UnknownKey | MissingField | BadTimerSyntax).
DataflowSpec parse(std::string_view yaml_text);
DataflowSpec parse_file(const std::string & path);
/// Canonical YAML text; parse(serialize(s)) == s.
std::string serialize(const DataflowSpec & spec);

enum class Severity {Error, Warning};

enum class DiagnosticKind
{
  DuplicateNodeId,
  DuplicateInputId,
  DuplicateOutputId,
  DanglingReference,
  SelfReference,
  CycleDetected,
  UnconsumedOutput,
};

std::string_view to_string(DiagnosticKind kind);

struct Diagnostic
{
  Severity severity = Severity::Error;
  DiagnosticKind kind = DiagnosticKind::DanglingReference;
  std::string node_id;
  std::string message;
};

std::vector<Diagnostic> validate(const DataflowSpec & spec);
bool has_errors(const std::vector<Diagnostic> & diagnostics);
std::string format(const Diagnostic & diagnostic);

struct RemoteInput
{
  std::string node_id;
  std::string input_id;
  std::string source_machine;
  std::string source_node;
  std::string source_output;

  bool operator==(const RemoteInput &) const = default;
};

struct RemoteOutput
{
  std::string node_id;
  std::string output_id;
  std::set<std::string> destinations;

  bool operator==(const RemoteOutput &) const = default;
};

/// The part of a dataflow that runs on one machine.
struct SubDataflow
{
  std::string machine;
  std::vector<NodeSpec> nodes;
  std::vector<RemoteInput> remote_inputs;
  std::vector<RemoteOutput> remote_outputs;
  /// Directory node commands are resolved against and run in.
  std::string working_dir;

  bool operator==(const SubDataflow &) const = default;
};

std::string machine_of(const NodeSpec & node, const std::string & default_machine);

/// Splits a validated spec by machine placement.
std::map<std::string, SubDataflow> partition(
  const DataflowSpec & spec, const std::string & default_machine);

std::string to_json(const SubDataflow & sub);
SubDataflow sub_dataflow_from_json(std::string_view json_text);

/// Node ids ordered producers-first over the acyclic part of the graph;
/// nodes on cycles follow in id order.
std::vector<std::string> spawn_order(const std::vector<NodeSpec> & nodes);

/// Mermaid flowchart of the graph, deterministic for a given spec.
std::string graph_export(const DataflowSpec & spec);

}  // namespace miniflow::dfspec

#endif  // MINIFLOW__DFSPEC_HPP_
