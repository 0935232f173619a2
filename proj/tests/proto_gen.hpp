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


#ifndef PROTO_GEN_HPP_
#define PROTO_GEN_HPP_

#include <cstdint>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "miniflow/control_proto.hpp"
#include "test_util.hpp"

namespace proto_gen
{

using namespace miniflow::proto;

/// Random control messages covering every kind.
class Gen
{
public:
  explicit Gen(std::uint64_t seed)
  : rng_(seed) {}

  std::string text(std::size_t max = 40)
  {
    std::string s(rng_() % (max + 1), '\0');
    for (auto & c : s) {
      c = static_cast<char>(rng_() & 0xFF);
    }
    return s;
  }

  std::vector<std::byte> blob(std::size_t max = 300)
  {
    return test_util::random_bytes(rng_, rng_() % (max + 1));
  }

  std::vector<std::string> texts()
  {
    std::vector<std::string> out(rng_() % 5);
    for (auto & s : out) {
      s = text();
    }
    return out;
  }

  bool flag() {return rng_() & 1;}
  std::uint64_t u64() {return rng_();}
  std::uint16_t u16() {return static_cast<std::uint16_t>(rng_());}
  template<typename E>
  E pick(E max) {return static_cast<E>(rng_() % (static_cast<unsigned>(max) + 1));}

  ShmData shm() {return ShmData{text(), u64(), u64(), u64()};}

  DataLocation location()
  {
    if (flag()) {
      return InlineData{blob()};
    }
    return shm();
  }

  Message message()
  {
    switch (rng_() % std::variant_size_v<Message>) {
      case 0: return RegisterDaemon{text()};
      case 1: return SpawnDataflow{text(), text(400)};
      case 2: return SpawnResult{text(), flag(), text()};
      case 3: return AllNodesReady{text()};
      case 4: return NodeStatus{text(), text(), pick(NodeState::Failed), text()};
      case 5: return StopDataflow{text()};
      case 6: return DataflowFinished{text()};
      case 7: return RemoteOutput{text(), text(), text(), blob()};
      case 8: return RegisterNode{text(), text()};
      case 9: return NodeReady{};
      case 10:
        if (flag()) {
          return Event{EventKind::Stop, {}, {}};
        }
        return Event{EventKind::Input, text(), location()};
      case 11: return SendOutput{text(), location()};
      case 12: return DataDropped{text(), u64()};
      case 13: return CliRequest{pick(CliVerb::Check), texts()};
      case 14: return CliReply{flag(), texts()};
      case 15: return OutputRequest{text(), u64()};
      case 16: {
          BlockGrant g;
          g.kind = pick(GrantKind::Rejected);
          if (g.kind == GrantKind::Shm) {
            g.block = shm();
          } else if (g.kind == GrantKind::Rejected) {
            g.error = text();
          }
          return g;
        }
      case 17: {
          NodeConfig c;
          c.ok = flag();
          if (c.ok) {
            c.outputs = texts();
            c.inline_threshold = u64();
          } else {
            c.error = text();
          }
          return c;
        }
      case 18: return LogsRequest{u64(), text(), text()};
      case 19: return LogsReply{u64(), flag(), text(500)};
      case 20: return Heartbeat{};
      case 21: return DaemonEndpoint{text(), u16()};
      case 22: {
          PeerDirectory d{text(), {}};
          for (auto n = rng_() % 4; n > 0; --n) {
            d.peers.push_back(Peer{text(), text(), u16()});
          }
          return d;
        }
      default: return Shutdown{};
    }
  }

  std::mt19937_64 & rng() {return rng_;}

private:
  std::mt19937_64 rng_;
};

}  // namespace proto_gen

#endif  // PROTO_GEN_HPP_
