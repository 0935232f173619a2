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

#ifndef MINIFLOW__NODE_API_HPP_
#define MINIFLOW__NODE_API_HPP_

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "miniflow/envelope.hpp"

namespace miniflow::node
{

struct Channel;
struct Mapping;

/// One input or stop notification. Payload views stay valid for the life of
/// the event; shared-memory inputs are returned to the daemon when the event
/// is released or destroyed.
class Event
{
public:
  enum class Kind {Input, Stop};

  Event(Event && other) noexcept;
  Event & operator=(Event && other) noexcept;
  Event(const Event &) = delete;
  Event & operator=(const Event &) = delete;
  ~Event();

  Kind kind() const {return kind_;}
  /// Input id as declared in the dataflow (empty for stop).
  const std::string & id() const {return id_;}
  const Envelope & data() const {return data_;}
  const Metadata & metadata() const {return data_.metadata;}
  bool shm_backed() const {return mapping_ != nullptr;}
  /// The whole mapped shared-memory object for shm-backed inputs.
  std::span<const std::byte> mapped_region() const;

  /// Returns a shared-memory input to the daemon. Later calls do nothing.
  void release();

private:
  friend class Node;
  Event() = default;

  Kind kind_ = Kind::Input;
  std::string id_;
  Envelope data_;
  std::shared_ptr<std::vector<std::byte>> inline_bytes_;
  std::shared_ptr<Mapping> mapping_;
  std::shared_ptr<Channel> channel_;
  std::uint64_t token_ = 0;
};

struct TimedOut {};
struct ChannelClosed {};

/// Result of Node::next_event().
class NextEvent
{
public:
  enum class Status {Event, TimedOut, ChannelClosed};

  Status status() const {return status_;}
  bool has_event() const {return event_.has_value();}
  Event & event() {return *event_;}
  Event take() {return std::move(*event_);}

private:
  friend class Node;
  Status status_ = Status::ChannelClosed;
  std::optional<Event> event_;
};

struct NodeParams
{
  std::string endpoint;
  std::string dataflow_id;
  std::string node_id;
  std::chrono::milliseconds connect_timeout{5000};
};

/// A node's connection to its daemon.
class Node
{
public:
  /// Reads MINIFLOW_NODE_ENDPOINT, MINIFLOW_DATAFLOW_ID and MINIFLOW_NODE_ID.
  /// At most one call per process succeeds.
  /// Throws Error(MissingEnv | ConnectFailed | SecondInit).
  static Node init();
  /// Explicit wiring, without the one-per-process guard (embedding, tests).
  /// Throws Error(ConnectFailed).
  static Node open(const NodeParams & params);

  Node(Node && other) noexcept;
  Node & operator=(Node && other) noexcept;
  Node(const Node &) = delete;
  Node & operator=(const Node &) = delete;
  /// Returns every unreleased shared-memory input and closes the connection.
  ~Node();

  /// Next event in daemon send order. Without a timeout, blocks until an
  /// event arrives or the channel closes. After a stop event the channel
  /// reports closed. Throws Error(ConnectionLost) on a protocol failure.
  NextEvent next_event(std::optional<std::chrono::milliseconds> timeout = std::nullopt);

  /// Publishes `payload` (element_count * width bytes) on a declared output.
  /// "ts_send_ns" and "seq" are added to the metadata.
  /// Throws Error(UndeclaredOutput | ConnectionLost | PayloadSizeMismatch).
  void send_output(
    const std::string & output_id, ElementType type,
    std::span<const std::byte> payload, Metadata metadata = {});

  /// Like send_output, but `write` fills the payload region in place.
  void send_output_with(
    const std::string & output_id, ElementType type, std::uint64_t element_count,
    const PayloadWriter & write, Metadata metadata = {});

  template<typename T>
  void send_values(const std::string & output_id, std::span<const T> values, Metadata metadata = {})
  {
    send_output(
      output_id, element_type_of<T>(), std::as_bytes(values), std::move(metadata));
  }

  const std::string & dataflow_id() const;
  const std::string & node_id() const;
  const std::vector<std::string> & outputs() const;
  std::uint64_t inline_threshold() const;

private:
  explicit Node(std::shared_ptr<Channel> channel);

  template<typename T>
  static ElementType element_type_of();

  void send_impl(
    const std::string & output_id, ElementType type, std::uint64_t element_count,
    const std::function<std::size_t(std::span<std::byte>, const Metadata &)> & encoder,
    Metadata metadata);

  std::shared_ptr<Channel> channel_;
};

template<typename T>
ElementType Node::element_type_of()
{
  if constexpr (std::is_same_v<T, std::uint8_t>) {
    return ElementType::U8;
  } else if constexpr (std::is_same_v<T, std::uint16_t>) {
    return ElementType::U16;
  } else if constexpr (std::is_same_v<T, std::uint32_t>) {
    return ElementType::U32;
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    return ElementType::U64;
  } else if constexpr (std::is_same_v<T, std::int8_t>) {
    return ElementType::I8;
  } else if constexpr (std::is_same_v<T, std::int16_t>) {
    return ElementType::I16;
  } else if constexpr (std::is_same_v<T, std::int32_t>) {
    return ElementType::I32;
  } else if constexpr (std::is_same_v<T, std::int64_t>) {
    return ElementType::I64;
  } else if constexpr (std::is_same_v<T, float>) {
    return ElementType::F32;
  } else {
    static_assert(std::is_same_v<T, double>, "unsupported element type");
    return ElementType::F64;
  }
}

}  // namespace miniflow::node

#endif  // MINIFLOW__NODE_API_HPP_
