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

#include "miniflow/control_proto.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <random>
#include <type_traits>

#include "miniflow/detail/bytes.hpp"
#include "miniflow/error.hpp"

namespace miniflow::proto
{

namespace
{

using detail::ByteReader;
using detail::ByteWriter;
using detail::as_bytes;
using detail::load_le;
using detail::store_le;

constexpr std::size_t kMaxText = std::numeric_limits<std::uint16_t>::max();
constexpr std::size_t kMaxList = std::numeric_limits<std::uint16_t>::max();
constexpr std::size_t kMaxBlob = std::numeric_limits<std::uint32_t>::max();

class Encoder
{
public:
  explicit Encoder(std::vector<std::byte> & out)
  : w_(out) {}

  void u8(std::uint8_t v) {w_.put(v);}
  void u16(std::uint16_t v) {w_.put(v);}
  void u64(std::uint64_t v) {w_.put(v);}
  void flag(bool v) {w_.put<std::uint8_t>(v ? 1 : 0);}

  template<typename E>
  void enumeration(E v, E /*max*/) {w_.put(static_cast<std::uint8_t>(v));}

  void text(const std::string & s)
  {
    if (s.size() > kMaxText) {
      fail(Errc::InvalidArgument, "text field longer than 65535 bytes");
    }
    w_.put(static_cast<std::uint16_t>(s.size()));
    w_.put_bytes(std::string_view(s));
  }

  void blob(std::span<const std::byte> b)
  {
    if (b.size() > kMaxBlob) {
      fail(Errc::InvalidArgument, "blob field longer than 4 GiB");
    }
    w_.put(static_cast<std::uint32_t>(b.size()));
    w_.put_bytes(b);
  }

  void blob(const std::vector<std::byte> & b) {blob(std::span<const std::byte>(b));}
  void blob(const std::string & s) {blob(as_bytes(s));}

  template<typename T, typename F>
  void list(const std::vector<T> & items, F && each)
  {
    if (items.size() > kMaxList) {
      fail(Errc::InvalidArgument, "list longer than 65535 entries");
    }
    w_.put(static_cast<std::uint16_t>(items.size()));
    for (const auto & item : items) {
      each(item);
    }
  }

  void location(const DataLocation & loc)
  {
    if (const auto * in = std::get_if<InlineData>(&loc)) {
      u8(0);
      blob(in->bytes);
    } else {
      u8(1);
      shm(std::get<ShmData>(loc));
    }
  }

  void shm(const ShmData & s)
  {
    text(s.os_name);
    u64(s.offset);
    u64(s.length);
    u64(s.generation);
  }

private:
  ByteWriter w_;
};

class Decoder
{
public:
  explicit Decoder(std::span<const std::byte> in)
  : r_(in) {}

  void u8(std::uint8_t & v) {need(r_.get(v));}
  void u16(std::uint16_t & v) {need(r_.get(v));}
  void u64(std::uint64_t & v) {need(r_.get(v));}

  void flag(bool & v)
  {
    std::uint8_t raw = 0;
    u8(raw);
    if (raw > 1) {
      fail(Errc::MalformedMessage, "flag byte " + std::to_string(raw));
    }
    v = raw == 1;
  }

  template<typename E>
  void enumeration(E & v, E max)
  {
    std::uint8_t raw = 0;
    u8(raw);
    if (raw > static_cast<std::uint8_t>(max)) {
      fail(Errc::MalformedMessage, "enum value " + std::to_string(raw) + " out of range");
    }
    v = static_cast<E>(raw);
  }

  void text(std::string & s)
  {
    std::uint16_t n = 0;
    u16(n);
    need(r_.get_string(n, s));
  }

  void blob(std::vector<std::byte> & b)
  {
    std::span<const std::byte> raw;
    need(r_.get_bytes(blob_len(), raw));
    b.assign(raw.begin(), raw.end());
  }

  void blob(std::string & s) {need(r_.get_string(blob_len(), s));}

  template<typename T, typename F>
  void list(std::vector<T> & items, F && each)
  {
    std::uint16_t n = 0;
    u16(n);
    items.clear();
    for (std::uint16_t i = 0; i < n; ++i) {
      each(items.emplace_back());
    }
  }

  void location(DataLocation & loc)
  {
    std::uint8_t kind = 0;
    u8(kind);
    if (kind == 0) {
      InlineData in;
      blob(in.bytes);
      loc = std::move(in);
    } else if (kind == 1) {
      ShmData s;
      shm(s);
      loc = std::move(s);
    } else {
      fail(Errc::MalformedMessage, "data location kind " + std::to_string(kind));
    }
  }

  void shm(ShmData & s)
  {
    text(s.os_name);
    u64(s.offset);
    u64(s.length);
    u64(s.generation);
  }

  void finish() const
  {
    if (r_.remaining() != 0) {
      fail(Errc::MalformedMessage, std::to_string(r_.remaining()) + " trailing bytes");
    }
  }

private:
  static void need(bool ok)
  {
    if (!ok) {
      fail(Errc::Truncated, "message body ends inside a field");
    }
  }

  std::size_t blob_len()
  {
    std::uint32_t n = 0;
    need(r_.get(n));
    return n;
  }

  ByteReader r_;
};

// One field list per message, shared by Encoder (const M) and Decoder.
template<typename IO, typename M>
void fields(IO & io, M & m)
{
  using T = std::remove_const_t<M>;
  if constexpr (std::is_same_v<T, RegisterDaemon>) {
    io.text(m.machine_id);
  } else if constexpr (std::is_same_v<T, SpawnDataflow>) {
    io.text(m.dataflow_uuid);
    io.blob(m.sub_dataflow);
  } else if constexpr (std::is_same_v<T, SpawnResult>) {
    io.text(m.dataflow_uuid);
    io.flag(m.ok);
    io.text(m.error);
  } else if constexpr (std::is_same_v<T, AllNodesReady> ||
    std::is_same_v<T, StopDataflow> || std::is_same_v<T, DataflowFinished>)
  {
    io.text(m.dataflow_uuid);
  } else if constexpr (std::is_same_v<T, NodeStatus>) {
    io.text(m.dataflow_uuid);
    io.text(m.node_id);
    io.enumeration(m.state, NodeState::Failed);
    io.text(m.detail);
  } else if constexpr (std::is_same_v<T, RemoteOutput>) {
    io.text(m.dataflow_uuid);
    io.text(m.source_node);
    io.text(m.output_id);
    io.blob(m.envelope);
  } else if constexpr (std::is_same_v<T, RegisterNode>) {
    io.text(m.dataflow_uuid);
    io.text(m.node_id);
  } else if constexpr (std::is_same_v<T, Event>) {
    io.enumeration(m.kind, EventKind::Stop);
    if (m.kind == EventKind::Input) {
      io.text(m.input_id);
      io.location(m.data);
    }
  } else if constexpr (std::is_same_v<T, SendOutput>) {
    io.text(m.output_id);
    io.location(m.data);
  } else if constexpr (std::is_same_v<T, DataDropped>) {
    io.text(m.os_name);
    io.u64(m.generation);
  } else if constexpr (std::is_same_v<T, CliRequest>) {
    io.enumeration(m.verb, CliVerb::Check);
    io.list(m.args, [&](auto & s) {io.text(s);});
  } else if constexpr (std::is_same_v<T, CliReply>) {
    io.flag(m.ok);
    io.list(m.items, [&](auto & s) {io.blob(s);});
  } else if constexpr (std::is_same_v<T, OutputRequest>) {
    io.text(m.output_id);
    io.u64(m.size);
  } else if constexpr (std::is_same_v<T, BlockGrant>) {
    io.enumeration(m.kind, GrantKind::Rejected);
    if (m.kind == GrantKind::Shm) {
      io.shm(m.block);
    } else if (m.kind == GrantKind::Rejected) {
      io.text(m.error);
    }
  } else if constexpr (std::is_same_v<T, NodeConfig>) {
    io.flag(m.ok);
    if (m.ok) {
      io.list(m.outputs, [&](auto & s) {io.text(s);});
      io.u64(m.inline_threshold);
    } else {
      io.text(m.error);
    }
  } else if constexpr (std::is_same_v<T, LogsRequest>) {
    io.u64(m.request_id);
    io.text(m.dataflow_uuid);
    io.text(m.node_id);
  } else if constexpr (std::is_same_v<T, LogsReply>) {
    io.u64(m.request_id);
    io.flag(m.ok);
    io.blob(m.text);
  } else if constexpr (std::is_same_v<T, DaemonEndpoint>) {
    io.text(m.host);
    io.u16(m.port);
  } else if constexpr (std::is_same_v<T, PeerDirectory>) {
    io.text(m.dataflow_uuid);
    io.list(m.peers, [&](auto & p) {
        io.text(p.machine_id);
        io.text(p.host);
        io.u16(p.port);
      });
  } else {
    static_assert(std::is_empty_v<T>, "message without fields must be empty");
  }
}

template<std::size_t I = 0>
Message decode_alternative(std::size_t index, Decoder & dec)
{
  if constexpr (I < std::variant_size_v<Message>) {
    if (index == I) {
      std::variant_alternative_t<I, Message> m{};
      fields(dec, m);
      return m;
    }
    return decode_alternative<I + 1>(index, dec);
  } else {
    fail(Errc::UnknownTag);
  }
}

void encode_into(std::vector<std::byte> & out, const Message & msg)
{
  Encoder enc(out);
  enc.u8(static_cast<std::uint8_t>(tag_of(msg)));
  std::visit([&](const auto & m) {fields(enc, m);}, msg);
}

void check_frame_size(std::uint64_t length, std::size_t max_frame)
{
  if (length > max_frame) {
    fail(
      Errc::OversizeFrame,
      "frame of " + std::to_string(length) + " bytes exceeds limit of " +
      std::to_string(max_frame));
  }
}

// Returns the number of bytes read; less than out.size() only at end of stream.
std::size_t read_full(ByteStream & stream, std::span<std::byte> out)
{
  std::size_t got = 0;
  while (got < out.size()) {
    const auto n = stream.read_some(out.subspan(got));
    if (n == 0) {
      break;
    }
    got += n;
  }
  return got;
}

}  // namespace

std::string_view to_string(NodeState state)
{
  switch (state) {
    case NodeState::Spawned: return "spawned";
    case NodeState::Ready: return "ready";
    case NodeState::Running: return "running";
    case NodeState::Finished: return "finished";
    case NodeState::Failed: return "failed";
  }
  return "unknown";
}

std::string random_uuid()
{
  static thread_local std::mt19937_64 rng = [] {
      std::random_device rd;
      std::seed_seq seq{rd(), rd(), rd(), rd()};
      return std::mt19937_64(seq);
    }();
  std::uint8_t b[16];
  for (int i = 0; i < 16; i += 8) {
    store_le<std::uint64_t>(reinterpret_cast<std::byte *>(b + i), rng());
  }
  b[6] = static_cast<std::uint8_t>((b[6] & 0x0F) | 0x40);
  b[8] = static_cast<std::uint8_t>((b[8] & 0x3F) | 0x80);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (int i = 0; i < 16; ++i) {
    if (i == 4 || i == 6 || i == 8 || i == 10) {
      out += '-';
    }
    out += kHex[b[i] >> 4];
    out += kHex[b[i] & 0x0F];
  }
  return out;
}

Tag tag_of(const Message & msg)
{
  // Variant alternatives are declared in tag order starting at 1.
  return static_cast<Tag>(msg.index() + 1);
}

std::string_view name_of(const Message & msg)
{
  static constexpr std::string_view kNames[] = {
    "RegisterDaemon", "SpawnDataflow", "SpawnResult", "AllNodesReady", "NodeStatus",
    "StopDataflow", "DataflowFinished", "RemoteOutput", "RegisterNode", "NodeReady",
    "Event", "SendOutput", "DataDropped", "CliRequest", "CliReply", "OutputRequest",
    "BlockGrant", "NodeConfig", "LogsRequest", "LogsReply", "Heartbeat", "DaemonEndpoint",
    "PeerDirectory", "Shutdown"};
  static_assert(std::size(kNames) == std::variant_size_v<Message>);
  return kNames[msg.index()];
}

std::vector<std::byte> encode_message(const Message & msg)
{
  std::vector<std::byte> out;
  encode_into(out, msg);
  return out;
}

Message decode_message(std::span<const std::byte> body)
{
  if (body.empty()) {
    fail(Errc::Truncated, "empty message body");
  }
  const auto tag = std::to_integer<std::uint8_t>(body[0]);
  if (tag == 0 || tag > std::variant_size_v<Message>) {
    fail(Errc::UnknownTag, "tag " + std::to_string(tag));
  }
  Decoder dec(body.subspan(1));
  auto msg = decode_alternative(tag - 1u, dec);
  dec.finish();
  return msg;
}

std::vector<std::byte> encode_frame(const Message & msg, std::size_t max_frame)
{
  std::vector<std::byte> out(4);
  encode_into(out, msg);
  const auto length = out.size() - 4;
  check_frame_size(length, max_frame);
  store_le<std::uint32_t>(out.data(), static_cast<std::uint32_t>(length));
  return out;
}

std::size_t MemoryStream::read_some(std::span<std::byte> out)
{
  const auto n = std::min({out.size(), data_.size(), max_chunk_});
  std::copy_n(data_.begin(), n, out.begin());
  data_.erase(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>(n));
  return n;
}

void MemoryStream::write_all(std::span<const std::byte> data)
{
  data_.insert(data_.end(), data.begin(), data.end());
}

Message read_frame(ByteStream & stream, std::size_t max_frame)
{
  std::byte prefix[4];
  const auto got = read_full(stream, prefix);
  if (got == 0) {
    fail(Errc::ConnectionClosed);
  }
  if (got < sizeof(prefix)) {
    fail(Errc::Truncated, "stream ended inside a length prefix");
  }
  const auto length = load_le<std::uint32_t>(prefix);
  check_frame_size(length, max_frame);
  std::vector<std::byte> body(length);
  if (read_full(stream, body) < length) {
    fail(Errc::Truncated, "stream ended inside a frame body");
  }
  return decode_message(body);
}

void write_frame(ByteStream & stream, const Message & msg, std::size_t max_frame)
{
  stream.write_all(encode_frame(msg, max_frame));
}

void FrameDecoder::feed(std::span<const std::byte> data)
{
  if (consumed_ > 0 && consumed_ * 2 >= buffer_.size()) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(consumed_));
    consumed_ = 0;
  }
  buffer_.insert(buffer_.end(), data.begin(), data.end());
}

std::optional<Message> FrameDecoder::next()
{
  const auto available = buffer_.size() - consumed_;
  if (available < 4) {
    return std::nullopt;
  }
  const auto length = load_le<std::uint32_t>(buffer_.data() + consumed_);
  check_frame_size(length, max_frame_);
  if (available - 4 < length) {
    return std::nullopt;
  }
  const std::span<const std::byte> body(buffer_.data() + consumed_ + 4, length);
  consumed_ += 4 + static_cast<std::size_t>(length);
  auto msg = decode_message(body);
  if (consumed_ == buffer_.size()) {
    buffer_.clear();
    consumed_ = 0;
  }
  return msg;
}

}  // namespace miniflow::proto
