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

#include "miniflow/node_api.hpp"

#include <poll.h>
#include <sys/socket.h>

#include <atomic>
#include <cerrno>
#include <cstdlib>
#include <deque>
#include <list>
#include <map>
#include <mutex>

#include "miniflow/clock.hpp"
#include "miniflow/control_proto.hpp"
#include "miniflow/error.hpp"
#include "miniflow/io.hpp"
#include "miniflow/shm_pool.hpp"

namespace miniflow::node
{

namespace
{

using Clock = std::chrono::steady_clock;

std::atomic<bool> g_initialized{false};

constexpr std::size_t kMappingCacheSize = 32;

}  // namespace

struct Mapping
{
  ShmView view;
};

/// Shared between a Node and the events it hands out, so events may outlive
/// or move away from the handle.
struct Channel
{
  NodeParams params;
  io::UniqueFd fd;
  proto::FrameDecoder decoder;
  std::deque<proto::Message> inbox;
  bool eof = false;
  bool stopped = false;

  std::vector<std::string> outputs;
  std::uint64_t inline_threshold = 0;
  std::map<std::string, std::uint64_t> next_seq;

  std::mutex write_mu;
  std::mutex drops_mu;
  std::map<std::uint64_t, proto::DataDropped> outstanding;
  std::uint64_t next_token = 1;

  std::list<std::pair<std::string, std::shared_ptr<Mapping>>> read_maps;
  std::list<std::pair<std::string, std::shared_ptr<Mapping>>> write_maps;

  void send(const proto::Message & msg)
  {
    const auto frame = proto::encode_frame(msg);
    std::lock_guard lock(write_mu);
    if (!fd) {
      fail(Errc::ConnectionLost, "connection closed");
    }
    try {
      io::FdStream(fd.get()).write_all(frame);
    } catch (const Error & e) {
      fail(Errc::ConnectionLost, e.detail());
    }
  }

  std::uint64_t track(const proto::ShmData & shm)
  {
    std::lock_guard lock(drops_mu);
    const auto token = next_token++;
    outstanding.emplace(token, proto::DataDropped{shm.os_name, shm.generation});
    return token;
  }

  void drop(std::uint64_t token)
  {
    std::optional<proto::DataDropped> msg;
    {
      std::lock_guard lock(drops_mu);
      auto it = outstanding.find(token);
      if (it == outstanding.end()) {
        return;
      }
      msg = std::move(it->second);
      outstanding.erase(it);
    }
    try {
      send(*msg);
    } catch (const Error &) {
      // The daemon reclaims references of disconnected nodes itself.
    }
  }

  void drop_all()
  {
    std::map<std::uint64_t, proto::DataDropped> pending;
    {
      std::lock_guard lock(drops_mu);
      pending.swap(outstanding);
    }
    for (const auto & [token, msg] : pending) {
      try {
        send(msg);
      } catch (const Error &) {
        return;
      }
    }
  }

  std::shared_ptr<Mapping> map(
    const std::string & os_name, std::uint64_t end, bool writable)
  {
    auto & cache = writable ? write_maps : read_maps;
    for (auto it = cache.begin(); it != cache.end(); ++it) {
      if (it->first == os_name && it->second->view.mapped().size() >= end) {
        cache.splice(cache.begin(), cache, it);
        return it->second;
      }
    }
    auto mapping = std::make_shared<Mapping>();
    mapping->view = ShmView::attach(
      os_name, end, writable ? ShmView::Access::ReadWrite : ShmView::Access::ReadOnly);
    cache.emplace_front(os_name, mapping);
    while (cache.size() > kMappingCacheSize) {
      cache.pop_back();
    }
    return mapping;
  }

  // Reads more bytes into the decoder. False on timeout.
  bool fill(std::optional<Clock::time_point> deadline)
  {
    pollfd p{fd.get(), POLLIN, 0};
    int timeout = -1;
    if (deadline) {
      const auto left = std::chrono::ceil<std::chrono::milliseconds>(*deadline - Clock::now());
      timeout = static_cast<int>(std::max<std::int64_t>(0, left.count()));
    }
    int n;
    do {
      n = ::poll(&p, 1, timeout);
    } while (n < 0 && errno == EINTR);
    if (n == 0) {
      return false;
    }
    std::byte buf[64 * 1024];
    ssize_t got;
    do {
      got = ::recv(fd.get(), buf, sizeof(buf), 0);
    } while (got < 0 && errno == EINTR);
    if (got <= 0) {
      eof = true;
      return true;
    }
    decoder.feed(std::span<const std::byte>(buf, static_cast<std::size_t>(got)));
    return true;
  }

  // Next message from the daemon; nullopt on timeout or end of stream.
  std::optional<proto::Message> receive(std::optional<Clock::time_point> deadline)
  {
    if (!inbox.empty()) {
      auto msg = std::move(inbox.front());
      inbox.pop_front();
      return msg;
    }
    for (;;) {
      try {
        if (auto msg = decoder.next()) {
          return msg;
        }
      } catch (const Error & e) {
        eof = true;
        fail(Errc::ConnectionLost, std::string(to_string(e.code())) + ": " + e.detail());
      }
      if (eof || !fill(deadline)) {
        return std::nullopt;
      }
    }
  }

  // Waits for a reply of type T, keeping other messages for next_event().
  template<typename T>
  T await(std::chrono::milliseconds timeout)
  {
    const auto deadline = Clock::now() + timeout;
    for (;;) {
      try {
        if (auto msg = decoder.next()) {
          if (auto * reply = std::get_if<T>(&*msg)) {
            return std::move(*reply);
          }
          inbox.push_back(std::move(*msg));
          continue;
        }
      } catch (const Error & e) {
        eof = true;
        fail(Errc::ConnectionLost, std::string(to_string(e.code())) + ": " + e.detail());
      }
      if (eof) {
        fail(Errc::ConnectionLost, "daemon closed the connection");
      }
      if (!fill(deadline)) {
        fail(Errc::ConnectionLost, "no reply from daemon");
      }
    }
  }
};

// ---- Event ------------------------------------------------------------------

Event::Event(Event && other) noexcept
: kind_(other.kind_), id_(std::move(other.id_)), data_(std::move(other.data_)),
  inline_bytes_(std::move(other.inline_bytes_)), mapping_(std::move(other.mapping_)),
  channel_(std::move(other.channel_)), token_(std::exchange(other.token_, 0)) {}

Event & Event::operator=(Event && other) noexcept
{
  if (this != &other) {
    release();
    kind_ = other.kind_;
    id_ = std::move(other.id_);
    data_ = std::move(other.data_);
    inline_bytes_ = std::move(other.inline_bytes_);
    mapping_ = std::move(other.mapping_);
    channel_ = std::move(other.channel_);
    token_ = std::exchange(other.token_, 0);
  }
  return *this;
}

Event::~Event()
{
  release();
}

std::span<const std::byte> Event::mapped_region() const
{
  return mapping_ ? mapping_->view.mapped() : std::span<const std::byte>{};
}

void Event::release()
{
  if (token_ != 0 && channel_) {
    channel_->drop(std::exchange(token_, 0));
  }
}

// ---- Node -------------------------------------------------------------------

Node::Node(std::shared_ptr<Channel> channel)
: channel_(std::move(channel)) {}

Node::Node(Node && other) noexcept = default;

Node & Node::operator=(Node && other) noexcept
{
  if (this != &other) {
    if (channel_) {
      channel_->drop_all();
    }
    channel_ = std::move(other.channel_);
  }
  return *this;
}

Node::~Node()
{
  if (!channel_) {
    return;
  }
  channel_->drop_all();
  std::lock_guard lock(channel_->write_mu);
  if (channel_->fd) {
    ::shutdown(channel_->fd.get(), SHUT_WR);
    channel_->fd.reset();
  }
}

Node Node::init()
{
  if (g_initialized.exchange(true)) {
    fail(Errc::SecondInit, "a node handle already exists in this process");
  }
  try {
    NodeParams params;
    for (auto [name, field] : {
        std::pair{"MINIFLOW_NODE_ENDPOINT", &params.endpoint},
        std::pair{"MINIFLOW_DATAFLOW_ID", &params.dataflow_id},
        std::pair{"MINIFLOW_NODE_ID", &params.node_id}})
    {
      const char * value = std::getenv(name);
      if (value == nullptr || *value == '\0') {
        fail(Errc::MissingEnv, std::string(name) + " is not set; run this node through miniflow");
      }
      *field = value;
    }
    return open(params);
  } catch (...) {
    g_initialized = false;
    throw;
  }
}

Node Node::open(const NodeParams & params)
{
  auto channel = std::make_shared<Channel>();
  channel->params = params;
  channel->fd = io::connect_endpoint(params.endpoint, params.connect_timeout);
  channel->send(proto::RegisterNode{params.dataflow_id, params.node_id});
  proto::NodeConfig config;
  try {
    config = channel->await<proto::NodeConfig>(params.connect_timeout);
  } catch (const Error & e) {
    fail(Errc::ConnectFailed, e.detail());
  }
  if (!config.ok) {
    fail(Errc::ConnectFailed, config.error);
  }
  channel->outputs = std::move(config.outputs);
  channel->inline_threshold = config.inline_threshold;
  channel->send(proto::NodeReady{});
  return Node(std::move(channel));
}

const std::string & Node::dataflow_id() const {return channel_->params.dataflow_id;}
const std::string & Node::node_id() const {return channel_->params.node_id;}
const std::vector<std::string> & Node::outputs() const {return channel_->outputs;}
std::uint64_t Node::inline_threshold() const {return channel_->inline_threshold;}

NextEvent Node::next_event(std::optional<std::chrono::milliseconds> timeout)
{
  NextEvent result;
  auto & ch = *channel_;
  if (ch.stopped) {
    result.status_ = NextEvent::Status::ChannelClosed;
    return result;
  }
  std::optional<Clock::time_point> deadline;
  if (timeout) {
    deadline = Clock::now() + *timeout;
  }
  for (;;) {
    auto msg = ch.receive(deadline);
    if (!msg) {
      result.status_ = ch.eof ? NextEvent::Status::ChannelClosed : NextEvent::Status::TimedOut;
      return result;
    }
    auto * ev = std::get_if<proto::Event>(&*msg);
    if (ev == nullptr) {
      continue;
    }
    Event out;
    if (ev->kind == proto::EventKind::Stop) {
      ch.stopped = true;
      out.kind_ = Event::Kind::Stop;
    } else {
      out.kind_ = Event::Kind::Input;
      out.id_ = ev->input_id;
      if (auto * in = std::get_if<proto::InlineData>(&ev->data)) {
        out.inline_bytes_ = std::make_shared<std::vector<std::byte>>(std::move(in->bytes));
        out.data_ = decode(*out.inline_bytes_);
      } else {
        const auto & shm = std::get<proto::ShmData>(ev->data);
        out.channel_ = channel_;
        out.token_ = ch.track(shm);
        out.mapping_ = ch.map(shm.os_name, shm.offset + shm.length, false);
        out.data_ = decode(out.mapping_->view.mapped().subspan(shm.offset, shm.length));
      }
    }
    result.status_ = NextEvent::Status::Event;
    result.event_.emplace(std::move(out));
    return result;
  }
}

void Node::send_output(
  const std::string & output_id, ElementType type,
  std::span<const std::byte> payload, Metadata metadata)
{
  const auto width = element_width(type);
  if (payload.size() % width != 0) {
    fail(Errc::PayloadSizeMismatch, "payload is not a whole number of elements");
  }
  send_impl(
    output_id, type, payload.size() / width,
    [&](std::span<std::byte> buffer, const Metadata & md) {
      return encode_into(buffer, type, payload.size() / width, md, payload);
    },
    std::move(metadata));
}

void Node::send_output_with(
  const std::string & output_id, ElementType type, std::uint64_t element_count,
  const PayloadWriter & write, Metadata metadata)
{
  send_impl(
    output_id, type, element_count,
    [&](std::span<std::byte> buffer, const Metadata & md) {
      return encode_into(buffer, type, element_count, md, write);
    },
    std::move(metadata));
}

void Node::send_impl(
  const std::string & output_id, ElementType type, std::uint64_t element_count,
  const std::function<std::size_t(std::span<std::byte>, const Metadata &)> & encoder,
  Metadata metadata)
{
  const auto sent_at = now_ns();
  auto & ch = *channel_;
  if (std::find(ch.outputs.begin(), ch.outputs.end(), output_id) == ch.outputs.end()) {
    fail(Errc::UndeclaredOutput, output_id);
  }
  metadata.set(std::string(metadata_keys::kSendTimestamp), std::to_string(sent_at));
  metadata.set(std::string(metadata_keys::kSequence), std::to_string(ch.next_seq[output_id]++));
  const auto layout = compute_layout(type, element_count, metadata);

  auto send_inline = [&] {
      std::vector<std::byte> buffer(layout.total_size);
      encoder(buffer, metadata);
      ch.send(proto::SendOutput{output_id, proto::InlineData{std::move(buffer)}});
    };
  if (layout.total_size <= ch.inline_threshold) {
    send_inline();
    return;
  }
  ch.send(proto::OutputRequest{output_id, layout.total_size});
  const auto grant = ch.await<proto::BlockGrant>(std::chrono::hours(24));
  switch (grant.kind) {
    case proto::GrantKind::Discard:
      return;
    case proto::GrantKind::Inline:
      send_inline();
      return;
    case proto::GrantKind::Rejected:
      if (grant.error.rfind("UndeclaredOutput", 0) == 0) {
        fail(Errc::UndeclaredOutput, output_id);
      }
      fail(Errc::OsAllocationFailed, grant.error);
    case proto::GrantKind::Shm:
      break;
  }
  auto mapping = ch.map(grant.block.os_name, grant.block.offset + grant.block.length, true);
  auto region = mapping->view.writable_mapped().subspan(grant.block.offset, grant.block.length);
  encoder(region, metadata);
  ch.send(proto::SendOutput{output_id, grant.block});
}

}  // namespace miniflow::node
