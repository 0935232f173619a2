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

#ifndef MINIFLOW__IO_HPP_
#define MINIFLOW__IO_HPP_

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "miniflow/control_proto.hpp"

namespace miniflow::io
{

class UniqueFd
{
public:
  UniqueFd() = default;
  explicit UniqueFd(int fd)
  : fd_(fd) {}
  ~UniqueFd() {reset();}
  UniqueFd(UniqueFd && other) noexcept
  : fd_(other.release()) {}
  UniqueFd & operator=(UniqueFd && other) noexcept
  {
    if (this != &other) {
      reset(other.release());
    }
    return *this;
  }
  UniqueFd(const UniqueFd &) = delete;
  UniqueFd & operator=(const UniqueFd &) = delete;

  int get() const {return fd_;}
  explicit operator bool() const {return fd_ >= 0;}
  int release()
  {
    const int fd = fd_;
    fd_ = -1;
    return fd;
  }
  void reset(int fd = -1);

private:
  int fd_ = -1;
};

struct HostPort
{
  std::string host;
  std::uint16_t port = 0;

  std::string str() const {return host + ":" + std::to_string(port);}
};

/// Parses "host:port". Throws Error(InvalidArgument).
HostPort parse_host_port(const std::string & text);

/// Listening TCP socket; port 0 picks an ephemeral port, reported by local_port().
UniqueFd tcp_listen(const HostPort & addr);
/// Throws Error(ConnectFailed).
UniqueFd tcp_connect(const HostPort & addr, std::chrono::milliseconds timeout);
std::uint16_t local_port(int fd);

/// Linux abstract-namespace unix socket (no filesystem entry).
UniqueFd unix_listen_abstract(const std::string & name);
/// Throws Error(ConnectFailed).
UniqueFd unix_connect_abstract(const std::string & name);

/// "unix:@<name>" or "tcp:<host>:<port>". Throws Error(ConnectFailed).
UniqueFd connect_endpoint(const std::string & endpoint, std::chrono::milliseconds timeout);

/// Accepts one pending connection as a non-blocking socket, or returns an
/// empty fd when none is pending.
UniqueFd accept_nonblocking(int listen_fd);

void set_nonblocking(int fd, bool on = true);

/// Blocking stream over a socket.
class FdStream : public proto::ByteStream
{
public:
  explicit FdStream(int fd)
  : fd_(fd) {}

  std::size_t read_some(std::span<std::byte> out) override;
  void write_all(std::span<const std::byte> data) override;

  /// Waits until the socket is readable. False on timeout.
  bool wait_readable(std::optional<std::chrono::milliseconds> timeout);

private:
  int fd_;
};

/// eventfd used to interrupt a poll loop from other threads.
class Waker
{
public:
  Waker();
  int fd() const {return fd_.get();}
  void wake();
  void drain();

private:
  UniqueFd fd_;
};

/// Framed message connection over a non-blocking socket, for poll loops.
class Connection
{
public:
  explicit Connection(UniqueFd fd, std::size_t max_frame = proto::kMaxFrameBytes);

  int fd() const {return fd_.get();}
  bool open() const {return static_cast<bool>(fd_);}

  /// Queues a frame and attempts to write it immediately.
  void send(const proto::Message & msg);
  /// Writes as much queued output as the socket accepts. False on a
  /// broken connection.
  bool flush();
  bool wants_write() const {return !out_.empty();}
  std::size_t queued_bytes() const {return queued_bytes_;}

  /// Drains readable bytes into the decoder. False on end of stream or error.
  bool receive();
  /// Next complete message. Throws like proto::FrameDecoder::next().
  std::optional<proto::Message> next() {return decoder_.next();}

  void close() {fd_.reset();}

  /// Blocks until queued output is written or `timeout` passes.
  void drain_output(std::chrono::milliseconds timeout);

private:
  UniqueFd fd_;
  proto::FrameDecoder decoder_;
  std::deque<std::vector<std::byte>> out_;
  std::size_t out_offset_ = 0;
  std::size_t queued_bytes_ = 0;
  bool broken_ = false;
};

}  // namespace miniflow::io

#endif  // MINIFLOW__IO_HPP_
