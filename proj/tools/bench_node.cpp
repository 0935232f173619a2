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


// Benchmark node.
//
//   miniflow-bench-node producer --size BYTES --count N --out DIR
//   miniflow-bench-node consumer --out DIR
//
// Both roles write DIR/<node>.pid at startup. The producer sends one message
// per "tick" input until N messages are out and writes DIR/<node>.sent. The
// consumer records "seq,input,send_ts_ns,recv_ts_ns" rows to DIR/<node>.csv.

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "miniflow/clock.hpp"
#include "miniflow/error.hpp"
#include "miniflow/node_api.hpp"

using miniflow::node::Event;
using miniflow::node::NextEvent;
using miniflow::node::Node;

namespace
{

struct Row
{
  std::uint64_t seq;
  std::string input;
  std::uint64_t send_ts_ns;
  std::uint64_t recv_ts_ns;
};

int producer(Node & node, std::uint64_t size, std::uint64_t count, const std::filesystem::path & out)
{
  std::vector<std::uint8_t> payload(size);
  for (std::size_t i = 0; i < payload.size(); ++i) {
    payload[i] = static_cast<std::uint8_t>(i);
  }
  std::uint64_t sent = 0;
  while (sent < count) {
    auto next = node.next_event();
    if (next.status() != NextEvent::Status::Event || next.event().kind() == Event::Kind::Stop) {
      break;
    }
    if (next.event().id() != "tick") {
      continue;
    }
    next.event().release();
    node.send_values<std::uint8_t>("data", payload);
    ++sent;
  }
  std::ofstream(out / (node.node_id() + ".sent")) << sent << '\n';
  return 0;
}

int consumer(Node & node, const std::filesystem::path & out)
{
  std::vector<Row> rows;
  rows.reserve(1 << 16);
  for (;;) {
    auto next = node.next_event();
    if (next.status() != NextEvent::Status::Event) {
      break;
    }
    auto & ev = next.event();
    if (ev.kind() == Event::Kind::Stop) {
      break;
    }
    const auto recv = miniflow::now_ns();
    const auto seq = ev.metadata().get("seq");
    const auto ts = ev.metadata().get("ts_send_ns");
    if (seq && ts) {
      rows.push_back({std::stoull(std::string(*seq)), ev.id(),
          std::stoull(std::string(*ts)), recv});
    }
    ev.release();
  }
  std::ofstream csv(out / (node.node_id() + ".csv"));
  csv << "seq,consumer,send_ts_ns,recv_ts_ns\n";
  for (const auto & r : rows) {
    csv << r.seq << ',' << node.node_id() << ',' << r.send_ts_ns << ',' << r.recv_ts_ns << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"miniflow benchmark node"};
  std::string role;
  std::uint64_t size = 0;
  std::uint64_t count = 0;
  std::filesystem::path out = ".";
  app.add_option("role", role)->required()->check(CLI::IsMember({"producer", "consumer"}));
  app.add_option("--size", size, "payload bytes per message");
  app.add_option("--count", count, "messages to send");
  app.add_option("--out", out, "output directory");
  CLI11_PARSE(app, argc, argv);

  if (const char * id = std::getenv("MINIFLOW_NODE_ID")) {
    std::ofstream(out / (std::string(id) + ".pid")) << ::getpid() << '\n';
  }
  try {
    auto node = Node::init();
    return role == "producer" ? producer(node, size, count, out) : consumer(node, out);
  } catch (const miniflow::Error & e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
