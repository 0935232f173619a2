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

#include "miniflow/dfspec.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <queue>
#include <sstream>

#include "json.hpp"
#include "miniflow/error.hpp"

namespace miniflow::dfspec
{

namespace
{

std::string describe(const YAML::Mark & mark)
{
  if (mark.is_null()) {
    return {};
  }
  return " (line " + std::to_string(mark.line + 1) + ")";
}

std::string scalar(const YAML::Node & node, const std::string & what)
{
  if (!node.IsScalar()) {
    fail(Errc::SyntaxError, what + " must be a scalar" + describe(node.Mark()));
  }
  return node.Scalar();
}

void reject_duplicate_keys(const YAML::Node & map, const std::string & where)
{
  std::set<std::string> seen;
  for (const auto & kv : map) {
    const auto key = scalar(kv.first, where + " key");
    if (!seen.insert(key).second) {
      fail(Errc::SyntaxError, "duplicate key '" + key + "' in " + where + describe(kv.first.Mark()));
    }
  }
}

NodeSpec parse_node(const YAML::Node & yaml, std::size_t index)
{
  const std::string where = "nodes[" + std::to_string(index) + "]";
  if (!yaml.IsMap()) {
    fail(Errc::SyntaxError, where + " must be a mapping" + describe(yaml.Mark()));
  }
  reject_duplicate_keys(yaml, where);

  NodeSpec node;
  bool has_id = false;
  bool has_path = false;
  for (const auto & kv : yaml) {
    const auto key = kv.first.Scalar();
    const YAML::Node & value = kv.second;
    if (key == "id") {
      node.id = scalar(value, where + ".id");
      has_id = !node.id.empty();
    } else if (key == "path") {
      node.command = scalar(value, where + ".path");
      has_path = !node.command.empty();
    } else if (key == "build") {
      if (!value.IsNull()) {
        node.build = scalar(value, where + ".build");
      }
    } else if (key == "machine") {
      if (!value.IsNull()) {
        node.machine = scalar(value, where + ".machine");
      }
    } else if (key == "env") {
      if (value.IsNull()) {
        continue;
      }
      if (!value.IsMap()) {
        fail(Errc::SyntaxError, where + ".env must be a mapping" + describe(value.Mark()));
      }
      reject_duplicate_keys(value, where + ".env");
      for (const auto & e : value) {
        node.env[e.first.Scalar()] = scalar(e.second, where + ".env value");
      }
    } else if (key == "inputs") {
      if (value.IsNull()) {
        continue;
      }
      if (!value.IsMap()) {
        fail(Errc::SyntaxError, where + ".inputs must be a mapping" + describe(value.Mark()));
      }
      // Duplicate input ids are kept and reported by validate().
      for (const auto & in : value) {
        node.inputs.push_back(
          {scalar(in.first, where + ".inputs key"),
            parse_input_source(scalar(in.second, where + ".inputs value"))});
      }
    } else if (key == "outputs") {
      if (value.IsNull()) {
        continue;
      }
      if (!value.IsSequence()) {
        fail(Errc::SyntaxError, where + ".outputs must be a list" + describe(value.Mark()));
      }
      for (const auto & out : value) {
        node.outputs.push_back(scalar(out, where + ".outputs entry"));
      }
    } else {
      fail(Errc::UnknownKey, where + "." + key + describe(kv.first.Mark()));
    }
  }
  if (!has_id) {
    fail(Errc::MissingField, where + ".id");
  }
  if (!has_path) {
    fail(Errc::MissingField, "nodes '" + node.id + "'.path");
  }
  return node;
}

}  // namespace

InputSource parse_input_source(std::string_view text)
{
  if (text.rfind("dora/", 0) == 0) {
    if (text.rfind(kTimerPrefix, 0) != 0) {
      fail(Errc::BadTimerSyntax, std::string{text});
    }
    const auto digits = text.substr(kTimerPrefix.size());
    std::uint64_t interval = 0;
    const auto * first = digits.data();
    const auto * last = digits.data() + digits.size();
    const auto [ptr, ec] = std::from_chars(first, last, interval);
    if (digits.empty() || ec != std::errc{} || ptr != last || interval == 0 ||
      !std::all_of(first, last, [](char c) {return c >= '0' && c <= '9';}))
    {
      fail(Errc::BadTimerSyntax, std::string{text});
    }
    return Timer{interval};
  }
  const auto slash = text.find('/');
  if (slash == std::string_view::npos || slash == 0 || slash + 1 == text.size()) {
    fail(Errc::SyntaxError, "input source '" + std::string{text} + "' is not <node>/<output>");
  }
  return UserOutput{std::string{text.substr(0, slash)}, std::string{text.substr(slash + 1)}};
}

std::string to_string(const InputSource & source)
{
  if (const auto * timer = std::get_if<Timer>(&source)) {
    return std::string{kTimerPrefix} + std::to_string(timer->interval_ms);
  }
  const auto & user = std::get<UserOutput>(source);
  return user.node_id + "/" + user.output_id;
}

const InputBinding * NodeSpec::find_input(std::string_view input_id) const
{
  for (const auto & in : inputs) {
    if (in.id == input_id) {
      return &in;
    }
  }
  return nullptr;
}

bool NodeSpec::has_output(std::string_view output_id) const
{
  return std::find(outputs.begin(), outputs.end(), output_id) != outputs.end();
}

const NodeSpec * DataflowSpec::find(std::string_view node_id) const
{
  for (const auto & node : nodes) {
    if (node.id == node_id) {
      return &node;
    }
  }
  return nullptr;
}

DataflowSpec parse(std::string_view yaml_text)
{
  YAML::Node root;
  try {
    root = YAML::Load(std::string{yaml_text});
  } catch (const YAML::Exception & e) {
    fail(Errc::SyntaxError, e.what());
  }
  if (!root.IsMap()) {
    fail(Errc::SyntaxError, "document must be a mapping with a 'nodes' key");
  }
  reject_duplicate_keys(root, "document");
  DataflowSpec spec;
  bool has_nodes = false;
  try {
    for (const auto & kv : root) {
      const auto key = kv.first.Scalar();
      if (key != "nodes") {
        fail(Errc::UnknownKey, key + describe(kv.first.Mark()));
      }
      has_nodes = true;
      if (kv.second.IsNull()) {
        continue;
      }
      if (!kv.second.IsSequence()) {
        fail(Errc::SyntaxError, "'nodes' must be a list" + describe(kv.second.Mark()));
      }
      std::size_t index = 0;
      for (const auto & node : kv.second) {
        spec.nodes.push_back(parse_node(node, index++));
      }
    }
  } catch (const YAML::Exception & e) {
    fail(Errc::SyntaxError, e.what());
  }
  if (!has_nodes) {
    fail(Errc::MissingField, "nodes");
  }
  return spec;
}

DataflowSpec parse_file(const std::string & path)
{
  std::ifstream in(path);
  if (!in) {
    fail(Errc::IoError, "cannot read " + path);
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

std::string serialize(const DataflowSpec & spec)
{
  YAML::Emitter out;
  out << YAML::BeginMap << YAML::Key << "nodes" << YAML::Value;
  if (spec.nodes.empty()) {
    out << YAML::Flow;
  }
  out << YAML::BeginSeq;
  for (const auto & node : spec.nodes) {
    out << YAML::BeginMap;
    out << YAML::Key << "id" << YAML::Value << YAML::DoubleQuoted << node.id;
    out << YAML::Key << "path" << YAML::Value << YAML::DoubleQuoted << node.command;
    if (node.build) {
      out << YAML::Key << "build" << YAML::Value << YAML::DoubleQuoted << *node.build;
    }
    if (node.machine) {
      out << YAML::Key << "machine" << YAML::Value << YAML::DoubleQuoted << *node.machine;
    }
    if (!node.env.empty()) {
      out << YAML::Key << "env" << YAML::Value << YAML::BeginMap;
      for (const auto & [k, v] : node.env) {
        out << YAML::Key << YAML::DoubleQuoted << k << YAML::Value << YAML::DoubleQuoted << v;
      }
      out << YAML::EndMap;
    }
    if (!node.inputs.empty()) {
      out << YAML::Key << "inputs" << YAML::Value << YAML::BeginMap;
      for (const auto & in : node.inputs) {
        out << YAML::Key << YAML::DoubleQuoted << in.id;
        out << YAML::Value << YAML::DoubleQuoted << to_string(in.source);
      }
      out << YAML::EndMap;
    }
    if (!node.outputs.empty()) {
      out << YAML::Key << "outputs" << YAML::Value << YAML::BeginSeq;
      for (const auto & o : node.outputs) {
        out << YAML::DoubleQuoted << o;
      }
      out << YAML::EndSeq;
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq << YAML::EndMap;
  return std::string{out.c_str()} + "\n";
}

std::string_view to_string(DiagnosticKind kind)
{
  switch (kind) {
    case DiagnosticKind::DuplicateNodeId: return "DuplicateNodeId";
    case DiagnosticKind::DuplicateInputId: return "DuplicateInputId";
    case DiagnosticKind::DuplicateOutputId: return "DuplicateOutputId";
    case DiagnosticKind::DanglingReference: return "DanglingReference";
    case DiagnosticKind::SelfReference: return "SelfReference";
    case DiagnosticKind::CycleDetected: return "CycleDetected";
    case DiagnosticKind::UnconsumedOutput: return "UnconsumedOutput";
  }
  return "Unknown";
}

namespace
{

// Strongly connected components with more than one member (Tarjan).
std::vector<std::vector<std::string>> find_cycles(const DataflowSpec & spec)
{
  std::map<std::string, std::vector<std::string>> edges;
  for (const auto & node : spec.nodes) {
    edges[node.id];
    for (const auto & in : node.inputs) {
      const auto * user = std::get_if<UserOutput>(&in.source);
      if (user != nullptr && user->node_id != node.id && spec.find(user->node_id) != nullptr) {
        edges[user->node_id].push_back(node.id);
      }
    }
  }
  std::map<std::string, int> index;
  std::map<std::string, int> low;
  std::set<std::string> on_stack;
  std::vector<std::string> stack;
  std::vector<std::vector<std::string>> components;
  int counter = 0;

  std::function<void(const std::string &)> visit = [&](const std::string & v) {
      index[v] = low[v] = counter++;
      stack.push_back(v);
      on_stack.insert(v);
      for (const auto & w : edges[v]) {
        if (!index.count(w)) {
          visit(w);
          low[v] = std::min(low[v], low[w]);
        } else if (on_stack.count(w)) {
          low[v] = std::min(low[v], index[w]);
        }
      }
      if (low[v] == index[v]) {
        std::vector<std::string> component;
        std::string w;
        do {
          w = stack.back();
          stack.pop_back();
          on_stack.erase(w);
          component.push_back(w);
        } while (w != v);
        if (component.size() > 1) {
          std::sort(component.begin(), component.end());
          components.push_back(std::move(component));
        }
      }
    };
  for (const auto & [v, _] : edges) {
    if (!index.count(v)) {
      visit(v);
    }
  }
  std::sort(components.begin(), components.end());
  return components;
}

}  // namespace

std::vector<Diagnostic> validate(const DataflowSpec & spec)
{
  std::vector<Diagnostic> out;
  auto emit = [&](Severity sev, DiagnosticKind kind, const std::string & node, std::string msg) {
      out.push_back({sev, kind, node, std::move(msg)});
    };

  std::set<std::string> ids;
  for (const auto & node : spec.nodes) {
    if (!ids.insert(node.id).second) {
      emit(Severity::Error, DiagnosticKind::DuplicateNodeId, node.id, "node id '" + node.id + "' is declared more than once");
    }
    std::set<std::string> inputs;
    for (const auto & in : node.inputs) {
      if (!inputs.insert(in.id).second) {
        emit(Severity::Error, DiagnosticKind::DuplicateInputId, node.id, "input '" + in.id + "' is declared more than once");
      }
    }
    std::set<std::string> outputs;
    for (const auto & o : node.outputs) {
      if (!outputs.insert(o).second) {
        emit(Severity::Error, DiagnosticKind::DuplicateOutputId, node.id, "output '" + o + "' is declared more than once");
      }
    }
  }

  std::set<std::pair<std::string, std::string>> consumed;
  for (const auto & node : spec.nodes) {
    for (const auto & in : node.inputs) {
      const auto * user = std::get_if<UserOutput>(&in.source);
      if (user == nullptr) {
        continue;
      }
      consumed.insert({user->node_id, user->output_id});
      const auto * source = spec.find(user->node_id);
      if (source == nullptr || !source->has_output(user->output_id)) {
        emit(
          Severity::Error, DiagnosticKind::DanglingReference, node.id,
          "input '" + in.id + "' references " + to_string(in.source) +
          (source == nullptr ? ", but no such node exists" : ", but that node declares no such output"));
      } else if (user->node_id == node.id) {
        emit(
          Severity::Warning, DiagnosticKind::SelfReference, node.id,
          "input '" + in.id + "' consumes the node's own output '" + user->output_id + "'");
      }
    }
  }

  for (const auto & cycle : find_cycles(spec)) {
    std::string members;
    for (const auto & id : cycle) {
      members += (members.empty() ? "" : ", ") + id;
    }
    emit(Severity::Warning, DiagnosticKind::CycleDetected, cycle.front(), "cycle through " + members);
  }

  for (const auto & node : spec.nodes) {
    for (const auto & o : node.outputs) {
      if (!consumed.count({node.id, o})) {
        emit(Severity::Warning, DiagnosticKind::UnconsumedOutput, node.id, "output '" + o + "' has no consumers");
      }
    }
  }
  return out;
}

bool has_errors(const std::vector<Diagnostic> & diagnostics)
{
  return std::any_of(
    diagnostics.begin(), diagnostics.end(),
    [](const Diagnostic & d) {return d.severity == Severity::Error;});
}

std::string format(const Diagnostic & d)
{
  return std::string{d.severity == Severity::Error ? "error" : "warning"} + "[" +
         std::string{to_string(d.kind)} + "] " + d.node_id + ": " + d.message;
}

std::string machine_of(const NodeSpec & node, const std::string & default_machine)
{
  return node.machine.value_or(default_machine);
}

std::map<std::string, SubDataflow> partition(
  const DataflowSpec & spec, const std::string & default_machine)
{
  std::map<std::string, SubDataflow> parts;
  std::map<std::string, std::string> placement;
  for (const auto & node : spec.nodes) {
    const auto machine = machine_of(node, default_machine);
    placement[node.id] = machine;
    auto & sub = parts[machine];
    sub.machine = machine;
    sub.nodes.push_back(node);
  }
  for (const auto & node : spec.nodes) {
    const auto & here = placement.at(node.id);
    for (const auto & in : node.inputs) {
      const auto * user = std::get_if<UserOutput>(&in.source);
      if (user == nullptr) {
        continue;
      }
      const auto source_machine = placement.find(user->node_id);
      if (source_machine == placement.end() || source_machine->second == here) {
        continue;
      }
      parts[here].remote_inputs.push_back(
        {node.id, in.id, source_machine->second, user->node_id, user->output_id});
      auto & outs = parts[source_machine->second].remote_outputs;
      auto existing = std::find_if(
        outs.begin(), outs.end(), [&](const RemoteOutput & r) {
          return r.node_id == user->node_id && r.output_id == user->output_id;
        });
      if (existing == outs.end()) {
        outs.push_back({user->node_id, user->output_id, {here}});
      } else {
        existing->destinations.insert(here);
      }
    }
  }
  return parts;
}

namespace
{

nlohmann::json node_to_json(const NodeSpec & node)
{
  nlohmann::json j;
  j["id"] = node.id;
  j["path"] = node.command;
  if (node.build) {
    j["build"] = *node.build;
  }
  if (node.machine) {
    j["machine"] = *node.machine;
  }
  j["env"] = node.env;
  j["inputs"] = nlohmann::json::array();
  for (const auto & in : node.inputs) {
    j["inputs"].push_back({in.id, to_string(in.source)});
  }
  j["outputs"] = node.outputs;
  return j;
}

NodeSpec node_from_json(const nlohmann::json & j)
{
  NodeSpec node;
  node.id = j.at("id").get<std::string>();
  node.command = j.at("path").get<std::string>();
  if (j.contains("build")) {
    node.build = j["build"].get<std::string>();
  }
  if (j.contains("machine")) {
    node.machine = j["machine"].get<std::string>();
  }
  node.env = j.at("env").get<std::map<std::string, std::string>>();
  for (const auto & in : j.at("inputs")) {
    node.inputs.push_back({in.at(0).get<std::string>(), parse_input_source(in.at(1).get<std::string>())});
  }
  node.outputs = j.at("outputs").get<std::vector<std::string>>();
  return node;
}

}  // namespace

std::string to_json(const SubDataflow & sub)
{
  nlohmann::json j;
  j["machine"] = sub.machine;
  j["working_dir"] = sub.working_dir;
  j["nodes"] = nlohmann::json::array();
  for (const auto & node : sub.nodes) {
    j["nodes"].push_back(node_to_json(node));
  }
  j["remote_inputs"] = nlohmann::json::array();
  for (const auto & r : sub.remote_inputs) {
    j["remote_inputs"].push_back(
      {r.node_id, r.input_id, r.source_machine, r.source_node, r.source_output});
  }
  j["remote_outputs"] = nlohmann::json::array();
  for (const auto & r : sub.remote_outputs) {
    j["remote_outputs"].push_back({r.node_id, r.output_id, r.destinations});
  }
  return j.dump();
}

SubDataflow sub_dataflow_from_json(std::string_view json_text)
{
  try {
    const auto j = nlohmann::json::parse(json_text);
    SubDataflow sub;
    sub.machine = j.at("machine").get<std::string>();
    sub.working_dir = j.at("working_dir").get<std::string>();
    for (const auto & n : j.at("nodes")) {
      sub.nodes.push_back(node_from_json(n));
    }
    for (const auto & r : j.at("remote_inputs")) {
      sub.remote_inputs.push_back(
        {r.at(0).get<std::string>(), r.at(1).get<std::string>(), r.at(2).get<std::string>(),
          r.at(3).get<std::string>(), r.at(4).get<std::string>()});
    }
    for (const auto & r : j.at("remote_outputs")) {
      sub.remote_outputs.push_back(
        {r.at(0).get<std::string>(), r.at(1).get<std::string>(),
          r.at(2).get<std::set<std::string>>()});
    }
    return sub;
  } catch (const nlohmann::json::exception & e) {
    fail(Errc::SyntaxError, std::string{"sub-dataflow: "} + e.what());
  }
}

std::vector<std::string> spawn_order(const std::vector<NodeSpec> & nodes)
{
  std::map<std::string, std::set<std::string>> downstream;
  std::map<std::string, int> indegree;
  for (const auto & node : nodes) {
    indegree[node.id];
  }
  for (const auto & node : nodes) {
    for (const auto & in : node.inputs) {
      const auto * user = std::get_if<UserOutput>(&in.source);
      if (user == nullptr || user->node_id == node.id || !indegree.count(user->node_id)) {
        continue;
      }
      if (downstream[user->node_id].insert(node.id).second) {
        ++indegree[node.id];
      }
    }
  }
  std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
  for (const auto & [id, deg] : indegree) {
    if (deg == 0) {
      ready.push(id);
    }
  }
  std::vector<std::string> order;
  std::set<std::string> placed;
  while (!ready.empty()) {
    const auto id = ready.top();
    ready.pop();
    order.push_back(id);
    placed.insert(id);
    for (const auto & next : downstream[id]) {
      if (--indegree[next] == 0) {
        ready.push(next);
      }
    }
  }
  for (const auto & [id, deg] : indegree) {
    if (!placed.count(id)) {
      order.push_back(id);
    }
  }
  return order;
}

namespace
{

std::string vertex_id(std::string_view raw)
{
  std::string id;
  for (const char c : raw) {
    const bool plain = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
    id += plain ? c : '_';
  }
  return id;
}

std::string label(std::string_view text)
{
  std::string out;
  for (const char c : text) {
    out += c == '"' ? '\'' : c;
  }
  return "\"" + out + "\"";
}

}  // namespace

std::string graph_export(const DataflowSpec & spec)
{
  std::vector<const NodeSpec *> nodes;
  for (const auto & node : spec.nodes) {
    nodes.push_back(&node);
  }
  std::stable_sort(
    nodes.begin(), nodes.end(),
    [](const NodeSpec * a, const NodeSpec * b) {return a->id < b->id;});

  std::set<std::uint64_t> timers;
  for (const auto * node : nodes) {
    for (const auto & in : node->inputs) {
      if (const auto * t = std::get_if<Timer>(&in.source)) {
        timers.insert(t->interval_ms);
      }
    }
  }

  std::ostringstream out;
  out << "flowchart TB\n";
  for (const auto * node : nodes) {
    out << "  " << vertex_id("node_" + node->id) << "[" << label(node->id) << "]\n";
  }
  for (const auto interval : timers) {
    const auto text = to_string(InputSource{Timer{interval}});
    out << "  " << vertex_id(text) << "([" << label(text) << "])\n";
  }
  for (const auto * node : nodes) {
    auto inputs = node->inputs;
    std::stable_sort(
      inputs.begin(), inputs.end(),
      [](const InputBinding & a, const InputBinding & b) {return a.id < b.id;});
    for (const auto & in : inputs) {
      std::string from;
      std::string text = in.id;
      if (const auto * user = std::get_if<UserOutput>(&in.source)) {
        from = vertex_id("node_" + user->node_id);
        if (user->output_id != in.id) {
          text = user->output_id + " as " + in.id;
        }
      } else {
        from = vertex_id(to_string(in.source));
      }
      out << "  " << from << " -- " << label(text) << " --> " << vertex_id("node_" + node->id) << "\n";
    }
  }
  return out.str();
}

}  // namespace miniflow::dfspec
