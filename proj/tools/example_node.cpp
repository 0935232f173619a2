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


// Example publisher/subscriber pair.
//
//   miniflow-example-node publisher [--size BYTES] [--count N]
//   miniflow-example-node subscriber
//
// The role may also come from the program name, so links named
// "publisher" and "subscriber" run the matching role.

#include <filesystem>
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

int publisher(Node & node, std::uint64_t size, std::uint64_t count)
{
  std::vector<std::uint8_t> payload(size);
  std::uint64_t sent = 0;
  for (;;) {
    auto next = node.next_event();
    if (next.status() != NextEvent::Status::Event) {
      break;
    }
    const auto & ev = next.event();
    if (ev.kind() == Event::Kind::Stop) {
      break;
    }
    if (ev.id() != "tick") {
      continue;
    }
    for (std::size_t i = 0; i < payload.size(); ++i) {
      payload[i] = static_cast<std::uint8_t>(sent + i);
    }
    node.send_values<std::uint8_t>("data", payload);
    ++sent;
    if (sent % 50 == 0 || sent == count) {
      std::cout << "published " << sent << " messages" << std::endl;
    }
    if (count != 0 && sent == count) {
      break;
    }
  }
  std::cout << "publisher done after " << sent << " messages" << std::endl;
  return 0;
}

int subscriber(Node & node)
{
  std::uint64_t received = 0;
  for (;;) {
    auto next = node.next_event();
    if (next.status() != NextEvent::Status::Event) {
      break;
    }
    const auto & ev = next.event();
    if (ev.kind() == Event::Kind::Stop) {
      break;
    }
    ++received;
    const auto now = miniflow::now_ns();
    const auto ts = ev.metadata().get("ts_send_ns");
    const auto seq = ev.metadata().get("seq");
    std::cout << "received " << ev.id() << " seq=" << (seq ? std::string(*seq) : "-") <<
      " bytes=" << ev.data().payload.size();
    if (ts) {
      std::cout << " latency_us=" << (now - std::stoull(std::string(*ts))) / 1000;
    }
    std::cout << std::endl;
  }
  std::cout << "subscriber done after " << received << " messages" << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"miniflow example node"};
  std::string role = std::filesystem::path(argv[0]).filename().string();
  std::uint64_t size = 8;
  std::uint64_t count = 0;
  const bool named = role == "publisher" || role == "subscriber";
  if (!named) {
    app.add_option("role", role)->required()->check(CLI::IsMember({"publisher", "subscriber"}));
  }
  app.add_option("--size", size, "payload bytes per message");
  app.add_option("--count", count, "stop after N messages (0: until stopped)");
  CLI11_PARSE(app, argc, argv);
  try {
    auto node = Node::init();
    return role == "publisher" ? publisher(node, size, count) : subscriber(node);
  } catch (const miniflow::Error & e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
