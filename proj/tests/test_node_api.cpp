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

#include <chrono>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "daemon_fixture.hpp"
#include "doctest.h"
#include "miniflow/clock.hpp"
#include "miniflow/envelope.hpp"
#include "miniflow/error.hpp"
#include "miniflow/node_api.hpp"

using namespace std::chrono_literals;
using miniflow::DaemonConfig;
using miniflow::ElementType;
using miniflow::Errc;
using miniflow::node::NextEvent;
using miniflow::node::Node;
using miniflow::node::NodeParams;
using test_util::LocalDaemon;
using test_util::test_node;

namespace
{

/// A dataflow whose nodes are placeholders that never register, so the test
/// process itself can register in their place.
struct InProcess
{
  explicit InProcess(const std::string & topology)
  : daemon(config())
  {
    uuid = daemon.spawn(topology);
  }

  static DaemonConfig config()
  {
    DaemonConfig c;
    c.stop_grace = 300ms;
    return c;
  }

  Node open(const std::string & node_id)
  {
    return Node::open(NodeParams{daemon->node_endpoint(), uuid, node_id});
  }

  LocalDaemon daemon;
  std::string uuid;
};

std::string placeholder_pair()
{
  return "nodes:\n"
         "  - id: pub\n"
         "    path: " + test_node("stall") + "\n"
         "    outputs: [data, other]\n"
         "  - id: sub\n"
         "    path: " + test_node("stall") + "\n"
         "    inputs:\n"
         "      data: pub/data\n";
}

NextEvent next_input(Node & node)
{
  return node.next_event(10s);
}

}  // namespace

TEST_CASE("init requires the environment")
{
  ::unsetenv("MINIFLOW_NODE_ENDPOINT");
  ::unsetenv("MINIFLOW_DATAFLOW_ID");
  ::unsetenv("MINIFLOW_NODE_ID");
  CHECK_ERRC(Node::init(), Errc::MissingEnv);
}

TEST_CASE("open fails for an unreachable endpoint or unknown node")
{
  CHECK_ERRC(
    Node::open(NodeParams{"unix:@miniflow-no-such-daemon", "x", "y", 200ms}),
    Errc::ConnectFailed);
  InProcess df(placeholder_pair());
  CHECK_ERRC(df.open("nobody"), Errc::ConnectFailed);
}

TEST_CASE("init succeeds once per process")
{
  InProcess df(placeholder_pair());
  ::setenv("MINIFLOW_NODE_ENDPOINT", df.daemon->node_endpoint().c_str(), 1);
  ::setenv("MINIFLOW_DATAFLOW_ID", df.uuid.c_str(), 1);
  ::setenv("MINIFLOW_NODE_ID", "pub", 1);
  {
    auto first = Node::init();
    CHECK(first.node_id() == "pub");
    CHECK(first.dataflow_id() == df.uuid);
    CHECK(first.outputs() == std::vector<std::string>{"data", "other"});
    CHECK(first.inline_threshold() == 4096);
    CHECK_ERRC(Node::init(), Errc::SecondInit);
  }
  CHECK_ERRC(Node::init(), Errc::SecondInit);
}

TEST_CASE("inline output round trip with metadata, seq and timestamps")
{
  InProcess df(placeholder_pair());
  auto pub = df.open("pub");
  auto sub = df.open("sub");
  REQUIRE(df.daemon->wait_running(df.uuid, 10s));

  const std::vector<std::uint32_t> values{1, 2, 3, 4};
  miniflow::Metadata md;
  md.set("frame", std::string("left"));
  for (int i = 0; i < 3; ++i) {
    pub.send_values<std::uint32_t>("data", values, md);
  }
  for (std::uint64_t i = 0; i < 3; ++i) {
    auto next = next_input(sub);
    REQUIRE(next.status() == NextEvent::Status::Event);
    auto & ev = next.event();
    CHECK(ev.kind() == miniflow::node::Event::Kind::Input);
    CHECK(ev.id() == "data");
    CHECK_FALSE(ev.shm_backed());
    CHECK(ev.data().element_type == ElementType::U32);
    CHECK(ev.data().element_count == 4);
    REQUIRE(ev.data().payload.size() == 16);
    std::uint32_t got[4];
    std::memcpy(got, ev.data().payload.data(), 16);
    CHECK(std::vector<std::uint32_t>(got, got + 4) == values);
    CHECK(ev.metadata().get("frame") == "left");
    CHECK(ev.metadata().get("seq") == std::to_string(i));
    const auto ts = ev.metadata().get("ts_send_ns");
    REQUIRE(ts);
    CHECK(std::stoull(std::string(*ts)) <= miniflow::now_ns());
  }
  CHECK(next_input(sub).status() == NextEvent::Status::TimedOut);
  CHECK(df.daemon->stats().inline_deliveries == 3);
}

TEST_CASE("send_output rejects undeclared outputs and mismatched payloads")
{
  InProcess df(placeholder_pair());
  auto pub = df.open("pub");
  auto sub = df.open("sub");
  REQUIRE(df.daemon->wait_running(df.uuid, 10s));
  const std::vector<std::byte> bytes(10);
  CHECK_ERRC(pub.send_output("nope", ElementType::U8, bytes), Errc::UndeclaredOutput);
  CHECK_ERRC(pub.send_output("data", ElementType::U32, bytes), Errc::PayloadSizeMismatch);
  // An output with no receivers is accepted and discarded.
  CHECK_NOTHROW(pub.send_output("other", ElementType::U8, bytes));
}

TEST_CASE("large loopback outputs are copied exactly once and aliased on receive")
{
  InProcess df(placeholder_pair());
  auto pub = df.open("pub");
  auto sub = df.open("sub");
  REQUIRE(df.daemon->wait_running(df.uuid, 10s));

  for (const std::size_t size : {std::size_t{256} << 10, std::size_t{4} << 20, std::size_t{32} << 20}) {
    CAPTURE(size);
    std::vector<std::byte> payload(size);
    for (std::size_t i = 0; i < size; ++i) {
      payload[i] = static_cast<std::byte>((i * 131) & 0xFF);
    }
    const auto before = miniflow::instrument::payload_copies();
    pub.send_output("data", ElementType::U8, payload);
    auto next = next_input(sub);
    REQUIRE(next.status() == NextEvent::Status::Event);
    auto & ev = next.event();
    const auto after = miniflow::instrument::payload_copies();
    CHECK(after.passes - before.passes == 1);
    CHECK(after.bytes - before.bytes == size);
    REQUIRE(ev.shm_backed());
    const auto region = ev.mapped_region();
    const auto view = ev.data().payload;
    CHECK(view.data() >= region.data());
    CHECK(view.data() + view.size() <= region.data() + region.size());
    REQUIRE(view.size() == size);
    CHECK(std::memcmp(view.data(), payload.data(), size) == 0);
    CHECK(miniflow::validate(region.first(*miniflow::declared_size(region))).empty());
  }
  CHECK(df.daemon->stats().shm_deliveries == 3);
}

TEST_CASE("send_output_with writes in place without a library copy")
{
  InProcess df(placeholder_pair());
  auto pub = df.open("pub");
  auto sub = df.open("sub");
  REQUIRE(df.daemon->wait_running(df.uuid, 10s));
  const std::uint64_t count = 1 << 20;
  const auto before = miniflow::instrument::payload_copies();
  pub.send_output_with(
    "data", ElementType::U32, count, [](std::span<std::byte> out) {
      auto * p = reinterpret_cast<std::uint32_t *>(out.data());
      std::iota(p, p + out.size() / 4, 0u);
    });
  auto next = next_input(sub);
  REQUIRE(next.status() == NextEvent::Status::Event);
  CHECK(miniflow::instrument::payload_copies().passes == before.passes);
  const auto & data = next.event().data();
  REQUIRE(data.element_count == count);
  const auto * p = reinterpret_cast<const std::uint32_t *>(data.payload.data());
  CHECK(p[0] == 0);
  CHECK(p[count - 1] == count - 1);
}

TEST_CASE("released events free the block; destroying the node releases the rest")
{
  InProcess df(placeholder_pair());
  auto pub = df.open("pub");
  std::optional<Node> sub = df.open("sub");
  REQUIRE(df.daemon->wait_running(df.uuid, 10s));
  const std::vector<std::byte> payload(1 << 20);
  pub.send_output("data", ElementType::U8, payload);
  pub.send_output("data", ElementType::U8, payload);
  auto first = next_input(*sub).take();
  auto second = next_input(*sub).take();
  REQUIRE(test_util::wait_until([&] {return df.daemon->stats().pool.in_use_blocks == 2;}));
  first.release();
  first.release();
  REQUIRE(test_util::wait_until([&] {return df.daemon->stats().pool.in_use_blocks == 1;}));
  sub.reset();
  REQUIRE(test_util::wait_until([&] {return df.daemon->stats().pool.in_use_blocks == 0;}));
  CHECK(df.daemon->stats().unknown_drops == 0);
}

TEST_CASE("stop event closes the channel")
{
  InProcess df(placeholder_pair());
  auto pub = df.open("pub");
  auto sub = df.open("sub");
  REQUIRE(df.daemon->wait_running(df.uuid, 10s));
  df.daemon->stop_dataflow(df.uuid);
  auto next = next_input(sub);
  REQUIRE(next.status() == NextEvent::Status::Event);
  CHECK(next.event().kind() == miniflow::node::Event::Kind::Stop);
  CHECK(next_input(sub).status() == NextEvent::Status::ChannelClosed);
  CHECK(sub.next_event(10ms).status() == NextEvent::Status::ChannelClosed);
}
