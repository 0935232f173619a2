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

#ifndef MINIFLOW__CONTROL_PROTO_HPP_
#define MINIFLOW__CONTROL_PROTO_HPP_

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace miniflow::proto
{

inline constexpr std::size_t kMaxFrameBytes = 64u << 20;

enum class Tag : std::uint8_t
{
  RegisterDaemon = 1,
  SpawnDataflow = 2,
  SpawnResult = 3,
  AllNodesReady = 4,
  NodeStatus = 5,
  StopDataflow = 6,
  DataflowFinished = 7,
  RemoteOutput = 8,
  RegisterNode = 9,
  NodeReady = 10,
  Event = 11,
  SendOutput = 12,
  DataDropped = 13,
  CliRequest = 14,
  CliReply = 15,
  OutputRequest = 16,
  BlockGrant = 17,
  NodeConfig = 18,
  LogsRequest = 19,
  LogsReply = 20,
  Heartbeat = 21,
  DaemonEndpoint = 22,
  PeerDirectory = 23,
  Shutdown = 24,
};

struct InlineData
{
  std::vector<std::byte> bytes;
  bool operator==(const InlineData &) const = default;
};

struct ShmData
{
  std::string os_name;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint64_t generation = 0;
  bool operator==(const ShmData &) const = default;
};

/// 0 = inline bytes, 1 = shared-memory region.
using DataLocation = std::variant<InlineData, ShmData>;

struct RegisterDaemon
{
  std::string machine_id;
  bool operator==(const RegisterDaemon &) const = default;
};

struct SpawnDataflow
{
  std::string dataflow_uuid;
  std::string sub_dataflow;  // JSON, carried as a blob
  bool operator==(const SpawnDataflow &) const = default;
};

struct SpawnResult
{
  std::string dataflow_uuid;
  bool ok = false;
  std::string error;
  bool operator==(const SpawnResult &) const = default;
};

struct AllNodesReady
{
  std::string dataflow_uuid;
  bool operator==(const AllNodesReady &) const = default;
};

enum class NodeState : std::uint8_t {Spawned = 0, Ready = 1, Running = 2, Finished = 3, Failed = 4};

std::string_view to_string(NodeState state);

struct NodeStatus
{
  std::string dataflow_uuid;
  std::string node_id;
  NodeState state = NodeState::Spawned;
  std::string detail;
  bool operator==(const NodeStatus &) const = default;
};

struct StopDataflow
{
  std::string dataflow_uuid;
  bool operator==(const StopDataflow &) const = default;
};

struct DataflowFinished
{
  std::string dataflow_uuid;
  bool operator==(const DataflowFinished &) const = default;
};

struct RemoteOutput
{
  std::string dataflow_uuid;
  std::string source_node;
  std::string output_id;
  std::vector<std::byte> envelope;
  bool operator==(const RemoteOutput &) const = default;
};

struct RegisterNode
{
  std::string dataflow_uuid;
  std::string node_id;
  bool operator==(const RegisterNode &) const = default;
};

struct NodeReady
{
  bool operator==(const NodeReady &) const = default;
};

enum class EventKind : std::uint8_t {Input = 0, Stop = 1};

struct Event
{
  EventKind kind = EventKind::Input;
  std::string input_id;  // input events only
  DataLocation data;     // input events only
  bool operator==(const Event &) const = default;
};

struct SendOutput
{
  std::string output_id;
  DataLocation data;
  bool operator==(const SendOutput &) const = default;
};

struct DataDropped
{
  std::string os_name;
  std::uint64_t generation = 0;
  bool operator==(const DataDropped &) const = default;
};

enum class CliVerb : std::uint8_t {Start = 0, Stop = 1, List = 2, Logs = 3, Destroy = 4, Check = 5};

struct CliRequest
{
  CliVerb verb = CliVerb::List;
  std::vector<std::string> args;
  bool operator==(const CliRequest &) const = default;
};

struct CliReply
{
  bool ok = false;
  std::vector<std::string> items;  // each carried as a blob
  bool operator==(const CliReply &) const = default;
};

/// First half of the large-output exchange: the node announces an envelope
/// size and waits for a BlockGrant.
struct OutputRequest
{
  std::string output_id;
  std::uint64_t size = 0;
  bool operator==(const OutputRequest &) const = default;
};

enum class GrantKind : std::uint8_t
{
  Inline = 0,    // send the envelope inline
  Shm = 1,       // encode into `block`, then confirm with SendOutput
  Discard = 2,   // nobody is listening
  Rejected = 3,  // see `error`
};

struct BlockGrant
{
  GrantKind kind = GrantKind::Inline;
  ShmData block;
  std::string error;
  bool operator==(const BlockGrant &) const = default;
};

/// Daemon's answer to RegisterNode.
struct NodeConfig
{
  bool ok = false;
  std::string error;
  std::vector<std::string> outputs;
  std::uint64_t inline_threshold = 0;
  bool operator==(const NodeConfig &) const = default;
};

struct LogsRequest
{
  std::uint64_t request_id = 0;
  std::string dataflow_uuid;
  std::string node_id;
  bool operator==(const LogsRequest &) const = default;
};

struct LogsReply
{
  std::uint64_t request_id = 0;
  bool ok = false;
  std::string text;  // blob
  bool operator==(const LogsReply &) const = default;
};

struct Heartbeat
{
  bool operator==(const Heartbeat &) const = default;
};

/// Where a daemon accepts connections from peer daemons.
struct DaemonEndpoint
{
  std::string host;
  std::uint16_t port = 0;
  bool operator==(const DaemonEndpoint &) const = default;
};

struct Peer
{
  std::string machine_id;
  std::string host;
  std::uint16_t port = 0;
  bool operator==(const Peer &) const = default;
};

struct PeerDirectory
{
  std::string dataflow_uuid;
  std::vector<Peer> peers;
  bool operator==(const PeerDirectory &) const = default;
};

struct Shutdown
{
  bool operator==(const Shutdown &) const = default;
};

using Message = std::variant<
  RegisterDaemon, SpawnDataflow, SpawnResult, AllNodesReady, NodeStatus,
  StopDataflow, DataflowFinished, RemoteOutput, RegisterNode, NodeReady,
  Event, SendOutput, DataDropped, CliRequest, CliReply, OutputRequest,
  BlockGrant, NodeConfig, LogsRequest, LogsReply, Heartbeat, DaemonEndpoint,
  PeerDirectory, Shutdown>;

/// Random version-4 uuid in canonical 8-4-4-4-12 form.
std::string random_uuid();

Tag tag_of(const Message & msg);
std::string_view name_of(const Message & msg);

/// Message body: tag byte followed by the tag's fields.
/// Throws Error(InvalidArgument) when a field exceeds its length prefix.
std::vector<std::byte> encode_message(const Message & msg);
/// Throws Error(UnknownTag | Truncated | MalformedMessage). Out-of-range
/// enum values and trailing bytes are MalformedMessage.
Message decode_message(std::span<const std::byte> body);

/// 4-byte little-endian body length followed by the body.
std::vector<std::byte> encode_frame(const Message & msg, std::size_t max_frame = kMaxFrameBytes);

/// Reliable ordered byte stream.
class ByteStream
{
public:
  virtual ~ByteStream() = default;
  /// Reads at least one byte, or returns 0 at end of stream.
  virtual std::size_t read_some(std::span<std::byte> out) = 0;
  virtual void write_all(std::span<const std::byte> data) = 0;
};

/// In-memory stream for tests: writes append, reads consume in chunks of at
/// most `max_chunk` bytes to exercise partial reads.
class MemoryStream : public ByteStream
{
public:
  explicit MemoryStream(std::size_t max_chunk = SIZE_MAX)
  : max_chunk_(max_chunk) {}

  std::size_t read_some(std::span<std::byte> out) override;
  void write_all(std::span<const std::byte> data) override;

  void append(std::span<const std::byte> data) {write_all(data);}
  std::size_t buffered() const {return data_.size();}

private:
  std::size_t max_chunk_;
  std::deque<std::byte> data_;
};

/// Throws Error(ConnectionClosed) at a clean end of stream,
/// Error(Truncated) mid-frame, Error(OversizeFrame) past `max_frame`.
Message read_frame(ByteStream & stream, std::size_t max_frame = kMaxFrameBytes);
void write_frame(ByteStream & stream, const Message & msg, std::size_t max_frame = kMaxFrameBytes);

/// Incremental frame splitter for non-blocking readers.
class FrameDecoder
{
public:
  explicit FrameDecoder(std::size_t max_frame = kMaxFrameBytes)
  : max_frame_(max_frame) {}

  void feed(std::span<const std::byte> data);
  /// Next complete message, if any. Throws like read_frame.
  std::optional<Message> next();
  /// True when bytes of an incomplete frame are buffered.
  bool partial() const {return buffer_.size() > consumed_;}

private:
  std::size_t max_frame_;
  std::vector<std::byte> buffer_;
  std::size_t consumed_ = 0;
};

}  // namespace miniflow::proto

#endif  // MINIFLOW__CONTROL_PROTO_HPP_
