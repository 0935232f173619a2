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

#include <cstring>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "miniflow/control_proto.hpp"
#include "miniflow/envelope.hpp"
#include "proto_gen.hpp"
#include "test_util.hpp"

using namespace miniflow::proto;
using miniflow::Errc;
using proto_gen::Gen;

namespace
{

std::vector<std::byte> bytes(std::initializer_list<int> values)
{
  std::vector<std::byte> out;
  for (int v : values) {
    out.push_back(static_cast<std::byte>(v));
  }
  return out;
}

void append_text(std::vector<std::byte> & out, const std::string & s)
{
  out.push_back(static_cast<std::byte>(s.size() & 0xFF));
  out.push_back(static_cast<std::byte>(s.size() >> 8));
  for (char c : s) {
    out.push_back(static_cast<std::byte>(c));
  }
}

}  // namespace

TEST_CASE("AllNodesReady round-trips and matches the hand-built layout")
{
  const std::string uuid = "00000000-0000-0000-0000-000000000000";
  const Message msg = AllNodesReady{uuid};
  auto expected = bytes({4});
  append_text(expected, uuid);
  CHECK(encode_message(msg) == expected);
  CHECK(decode_message(expected) == msg);
}

TEST_CASE("hand-built layouts for representative messages")
{
  SUBCASE("NodeReady is a bare tag") {
    CHECK(encode_message(NodeReady{}) == bytes({10}));
  }
  SUBCASE("Event stop carries only the kind") {
    CHECK(encode_message(Event{EventKind::Stop, {}, {}}) == bytes({11, 1}));
  }
  SUBCASE("SendOutput with shm location") {
    auto expected = bytes({12});
    append_text(expected, "o");
    expected.push_back(std::byte{1});
    append_text(expected, "n");
    for (std::uint64_t v : {64ull, 0x0102030405060708ull, 7ull}) {
      for (int i = 0; i < 8; ++i) {
        expected.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
      }
    }
    const Message msg = SendOutput{"o", ShmData{"n", 64, 0x0102030405060708ull, 7}};
    CHECK(encode_message(msg) == expected);
    CHECK(decode_message(expected) == msg);
  }
  SUBCASE("DataDropped") {
    auto expected = bytes({13});
    append_text(expected, "b");
    for (int i = 0; i < 8; ++i) {
      expected.push_back(std::byte{i == 0 ? std::byte{9} : std::byte{0}});
    }
    CHECK(encode_message(DataDropped{"b", 9}) == expected);
  }
  SUBCASE("CliReply items are 4-byte length blobs") {
    const auto expected = bytes({15, 1, 1, 0, 2, 0, 0, 0, 'h', 'i'});
    CHECK(encode_message(CliReply{true, {"hi"}}) == expected);
  }
  SUBCASE("frame prefix is the body length, little-endian") {
    const auto frame = encode_frame(RegisterDaemon{"m"});
    CHECK(frame == bytes({4, 0, 0, 0, 1, 1, 0, 'm'}));
  }
}

TEST_CASE("every message kind round-trips")
{
  Gen gen(7);
  std::vector<bool> seen(std::variant_size_v<Message>, false);
  for (int i = 0; i < 2000; ++i) {
    const auto msg = gen.message();
    seen[msg.index()] = true;
    const auto body = encode_message(msg);
    CHECK(static_cast<std::size_t>(body[0]) == msg.index() + 1);
    const auto back = decode_message(body);
    REQUIRE(back == msg);
    CHECK(encode_message(back) == body);
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    CHECK_MESSAGE(seen[i], "kind " << i << " never generated");
  }
}

TEST_CASE("decode errors")
{
  CHECK_ERRC(decode_message(bytes({})), Errc::Truncated);
  CHECK_ERRC(decode_message(bytes({0})), Errc::UnknownTag);
  CHECK_ERRC(decode_message(bytes({25})), Errc::UnknownTag);
  CHECK_ERRC(decode_message(bytes({255})), Errc::UnknownTag);
  CHECK_ERRC(decode_message(bytes({1, 5, 0, 'a'})), Errc::Truncated);
  CHECK_ERRC(decode_message(bytes({10, 0})), Errc::MalformedMessage);
  CHECK_ERRC(decode_message(bytes({11, 2})), Errc::MalformedMessage);
  CHECK_ERRC(decode_message(bytes({3, 0, 0, 2, 0, 0})), Errc::MalformedMessage);
  CHECK_ERRC(decode_message(bytes({12, 0, 0, 5})), Errc::MalformedMessage);
}

TEST_CASE("oversize text fields are rejected at encode time")
{
  CHECK_ERRC(encode_message(RegisterDaemon{std::string(70000, 'x')}), Errc::InvalidArgument);
  CHECK_NOTHROW(encode_message(RegisterDaemon{std::string(65535, 'x')}));
}

TEST_CASE("frame declaring length 2^32-1 is OversizeFrame")
{
  MemoryStream stream;
  stream.append(bytes({0xFF, 0xFF, 0xFF, 0xFF, 4}));
  CHECK_ERRC(read_frame(stream), Errc::OversizeFrame);

  FrameDecoder dec;
  dec.feed(bytes({0xFF, 0xFF, 0xFF, 0xFF}));
  CHECK_ERRC(dec.next(), Errc::OversizeFrame);
}

TEST_CASE("frame limit is configurable")
{
  const Message big = RemoteOutput{"u", "n", "o", std::vector<std::byte>(2000)};
  CHECK_ERRC(encode_frame(big, 1000), Errc::OversizeFrame);
  MemoryStream stream;
  write_frame(stream, big);
  CHECK_ERRC(read_frame(stream, 1000), Errc::OversizeFrame);
}

TEST_CASE("RemoteOutput carries a valid envelope verbatim")
{
  miniflow::Metadata md;
  md.set("seq", "1");
  md.set("ts_send_ns", "123");
  std::vector<std::byte> payload(4 * 100);
  for (std::size_t i = 0; i < payload.size(); ++i) {
    payload[i] = static_cast<std::byte>(i);
  }
  const auto env = miniflow::encode(miniflow::ElementType::F32, 100, md, payload);
  REQUIRE(miniflow::validate(env).empty());

  MemoryStream stream;
  write_frame(stream, RemoteOutput{"uuid", "cam", "image", env});
  const auto msg = read_frame(stream);
  const auto & out = std::get<RemoteOutput>(msg);
  CHECK(out.envelope == env);
  CHECK(miniflow::validate(out.envelope).empty());
  const auto decoded = miniflow::decode(out.envelope);
  CHECK(decoded.element_count == 100);
  CHECK(decoded.metadata == md);
}

TEST_CASE("stream ordering and closure")
{
  SUBCASE("three messages arrive in write order") {
    MemoryStream stream(3);
    write_frame(stream, RegisterDaemon{"a"});
    write_frame(stream, NodeReady{});
    write_frame(stream, StopDataflow{"z"});
    CHECK(read_frame(stream) == Message{RegisterDaemon{"a"}});
    CHECK(read_frame(stream) == Message{NodeReady{}});
    CHECK(read_frame(stream) == Message{StopDataflow{"z"}});
    CHECK_ERRC(read_frame(stream), Errc::ConnectionClosed);
  }
  SUBCASE("peer closes mid-frame") {
    const auto frame = encode_frame(SpawnResult{"u", false, "boom"});
    for (std::size_t cut = 1; cut < frame.size(); ++cut) {
      MemoryStream stream;
      stream.append(std::span(frame).first(cut));
      CHECK_ERRC(read_frame(stream), Errc::Truncated);
    }
  }
}

TEST_CASE("1000 random messages round-trip over a chunked in-memory stream")
{
  Gen gen(1234);
  std::vector<Message> sent;
  MemoryStream stream(7);
  for (int i = 0; i < 1000; ++i) {
    sent.push_back(gen.message());
    write_frame(stream, sent.back());
  }
  for (const auto & m : sent) {
    REQUIRE(read_frame(stream) == m);
  }
  CHECK(stream.buffered() == 0);
}

TEST_CASE("FrameDecoder splits arbitrary chunkings identically")
{
  Gen gen(99);
  std::vector<Message> sent;
  std::vector<std::byte> wire;
  for (int i = 0; i < 500; ++i) {
    sent.push_back(gen.message());
    const auto f = encode_frame(sent.back());
    wire.insert(wire.end(), f.begin(), f.end());
  }
  FrameDecoder dec;
  std::vector<Message> got;
  std::size_t at = 0;
  while (at < wire.size()) {
    const auto n = std::min<std::size_t>(1 + gen.rng()() % 97, wire.size() - at);
    dec.feed(std::span(wire).subspan(at, n));
    at += n;
    while (auto m = dec.next()) {
      got.push_back(std::move(*m));
    }
  }
  CHECK_FALSE(dec.partial());
  REQUIRE(got.size() == sent.size());
  CHECK(got == sent);
}

TEST_CASE("decode_message never over-reads arbitrary input")
{
  // Random buffers plus mutated valid encodings, each decoded from an exact
  // heap copy so sanitizers would flag any read past the end.
  Gen gen(2024);
  auto & rng = gen.rng();
  std::size_t decoded = 0;
  std::size_t rejected = 0;
  for (int i = 0; i < 100000; ++i) {
    std::vector<std::byte> buf;
    if (i % 2 == 0) {
      buf = test_util::random_bytes(rng, rng() % 64);
      if (!buf.empty()) {
        buf[0] = static_cast<std::byte>(rng() % 26);
      }
    } else {
      buf = encode_message(gen.message());
      const auto flips = 1 + rng() % 3;
      for (std::size_t f = 0; f < flips && !buf.empty(); ++f) {
        buf[rng() % buf.size()] ^= static_cast<std::byte>(1u << (rng() % 8));
      }
      if (rng() % 4 == 0) {
        buf.resize(rng() % (buf.size() + 1));
      }
    }
    try {
      const auto m = decode_message(buf);
      CHECK(encode_message(m) == buf);
      ++decoded;
    } catch (const miniflow::Error & e) {
      const auto c = e.code();
      const bool expected = c == Errc::UnknownTag || c == Errc::Truncated ||
        c == Errc::MalformedMessage;
      if (!expected) {
        FAIL("unexpected error " << miniflow::to_string(c));
      }
      ++rejected;
    }
  }
  CHECK(decoded > 1000);
  CHECK(rejected > 1000);
}

TEST_CASE("random_uuid is version 4 and unique")
{
  std::set<std::string> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto u = random_uuid();
    REQUIRE(u.size() == 36);
    CHECK(u[8] == '-');
    CHECK(u[14] == '4');
    CHECK(std::string("89ab").find(u[19]) != std::string::npos);
    seen.insert(u);
  }
  CHECK(seen.size() == 1000);
}
