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

#include "miniflow/io.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "miniflow/error.hpp"

namespace miniflow::io
{

namespace
{

std::string errno_text(int err = errno)
{
  return std::strerror(err);
}

sockaddr_in resolve_ipv4(const HostPort & addr)
{
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(addr.port);
  const std::string host = addr.host == "localhost" || addr.host.empty() ? "127.0.0.1" : addr.host;
  if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) == 1) {
    return sa;
  }
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo * res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    fail(Errc::ConnectFailed, "cannot resolve host " + host);
  }
  sa.sin_addr = reinterpret_cast<sockaddr_in *>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return sa;
}

sockaddr_un abstract_address(const std::string & name, socklen_t & len)
{
  sockaddr_un sa{};
  sa.sun_family = AF_UNIX;
  if (name.size() + 1 > sizeof(sa.sun_path)) {
    fail(Errc::InvalidArgument, "socket name too long: " + name);
  }
  sa.sun_path[0] = '\0';
  std::memcpy(sa.sun_path + 1, name.data(), name.size());
  len = static_cast<socklen_t>(offsetof(sockaddr_un, sun_path) + 1 + name.size());
  return sa;
}

void set_nodelay(int fd)
{
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

}  // namespace

void UniqueFd::reset(int fd)
{
  if (fd_ >= 0) {
    ::close(fd_);
  }
  fd_ = fd;
}

HostPort parse_host_port(const std::string & text)
{
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    fail(Errc::InvalidArgument, "expected host:port, got '" + text + "'");
  }
  const auto port_text = text.substr(colon + 1);
  unsigned long port = 0;
  try {
    std::size_t used = 0;
    port = std::stoul(port_text, &used);
    if (used != port_text.size()) {
      throw std::invalid_argument(port_text);
    }
  } catch (const std::exception &) {
    fail(Errc::InvalidArgument, "bad port in '" + text + "'");
  }
  if (port > 65535) {
    fail(Errc::InvalidArgument, "port out of range in '" + text + "'");
  }
  return HostPort{text.substr(0, colon), static_cast<std::uint16_t>(port)};
}

UniqueFd tcp_listen(const HostPort & addr)
{
  UniqueFd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) {
    fail(Errc::IoError, "socket: " + errno_text());
  }
  int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  auto sa = resolve_ipv4(addr);
  if (::bind(fd.get(), reinterpret_cast<sockaddr *>(&sa), sizeof(sa)) != 0) {
    fail(Errc::IoError, "bind " + addr.str() + ": " + errno_text());
  }
  if (::listen(fd.get(), 64) != 0) {
    fail(Errc::IoError, "listen: " + errno_text());
  }
  set_nonblocking(fd.get());
  return fd;
}

UniqueFd tcp_connect(const HostPort & addr, std::chrono::milliseconds timeout)
{
  UniqueFd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC | SOCK_NONBLOCK, 0));
  if (!fd) {
    fail(Errc::ConnectFailed, "socket: " + errno_text());
  }
  auto sa = resolve_ipv4(addr);
  if (::connect(fd.get(), reinterpret_cast<sockaddr *>(&sa), sizeof(sa)) != 0) {
    if (errno != EINPROGRESS) {
      fail(Errc::ConnectFailed, addr.str() + ": " + errno_text());
    }
    pollfd p{fd.get(), POLLOUT, 0};
    const int n = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (n <= 0) {
      fail(Errc::ConnectFailed, addr.str() + ": timed out");
    }
    int err = 0;
    socklen_t len = sizeof(err);
    ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) {
      fail(Errc::ConnectFailed, addr.str() + ": " + errno_text(err));
    }
  }
  set_nonblocking(fd.get(), false);
  set_nodelay(fd.get());
  return fd;
}

std::uint16_t local_port(int fd)
{
  sockaddr_in sa{};
  socklen_t len = sizeof(sa);
  if (::getsockname(fd, reinterpret_cast<sockaddr *>(&sa), &len) != 0) {
    fail(Errc::IoError, "getsockname: " + errno_text());
  }
  return ntohs(sa.sin_port);
}

UniqueFd unix_listen_abstract(const std::string & name)
{
  UniqueFd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) {
    fail(Errc::IoError, "socket: " + errno_text());
  }
  socklen_t len = 0;
  auto sa = abstract_address(name, len);
  if (::bind(fd.get(), reinterpret_cast<sockaddr *>(&sa), len) != 0) {
    fail(Errc::IoError, "bind @" + name + ": " + errno_text());
  }
  if (::listen(fd.get(), 64) != 0) {
    fail(Errc::IoError, "listen: " + errno_text());
  }
  set_nonblocking(fd.get());
  return fd;
}

UniqueFd unix_connect_abstract(const std::string & name)
{
  UniqueFd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) {
    fail(Errc::ConnectFailed, "socket: " + errno_text());
  }
  socklen_t len = 0;
  auto sa = abstract_address(name, len);
  if (::connect(fd.get(), reinterpret_cast<sockaddr *>(&sa), len) != 0) {
    fail(Errc::ConnectFailed, "@" + name + ": " + errno_text());
  }
  return fd;
}

UniqueFd connect_endpoint(const std::string & endpoint, std::chrono::milliseconds timeout)
{
  if (endpoint.rfind("unix:@", 0) == 0) {
    return unix_connect_abstract(endpoint.substr(6));
  }
  if (endpoint.rfind("tcp:", 0) == 0) {
    try {
      return tcp_connect(parse_host_port(endpoint.substr(4)), timeout);
    } catch (const Error & e) {
      fail(Errc::ConnectFailed, e.detail());
    }
  }
  fail(Errc::ConnectFailed, "unsupported endpoint '" + endpoint + "'");
}

UniqueFd accept_nonblocking(int listen_fd)
{
  const int fd = ::accept4(listen_fd, nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
  if (fd < 0) {
    return UniqueFd();
  }
  sockaddr_storage ss{};
  socklen_t len = sizeof(ss);
  if (::getsockname(fd, reinterpret_cast<sockaddr *>(&ss), &len) == 0 && ss.ss_family == AF_INET) {
    set_nodelay(fd);
  }
  return UniqueFd(fd);
}

void set_nonblocking(int fd, bool on)
{
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, on ? (flags | O_NONBLOCK) : (flags & ~O_NONBLOCK));
}

std::size_t FdStream::read_some(std::span<std::byte> out)
{
  for (;;) {
    const auto n = ::recv(fd_, out.data(), out.size(), 0);
    if (n >= 0) {
      return static_cast<std::size_t>(n);
    }
    if (errno == EINTR) {
      continue;
    }
    if (errno == ECONNRESET) {
      return 0;
    }
    fail(Errc::IoError, "recv: " + errno_text());
  }
}

void FdStream::write_all(std::span<const std::byte> data)
{
  std::size_t done = 0;
  while (done < data.size()) {
    const auto n = ::send(fd_, data.data() + done, data.size() - done, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) {
        continue;
      }
      if (errno == EPIPE || errno == ECONNRESET) {
        fail(Errc::ConnectionClosed, "peer closed the connection");
      }
      fail(Errc::IoError, "send: " + errno_text());
    }
    done += static_cast<std::size_t>(n);
  }
}

bool FdStream::wait_readable(std::optional<std::chrono::milliseconds> timeout)
{
  pollfd p{fd_, POLLIN, 0};
  for (;;) {
    const int n = ::poll(&p, 1, timeout ? static_cast<int>(timeout->count()) : -1);
    if (n < 0 && errno == EINTR) {
      continue;
    }
    return n > 0;
  }
}

Waker::Waker()
: fd_(::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC))
{
  if (!fd_) {
    fail(Errc::IoError, "eventfd: " + errno_text());
  }
}

void Waker::wake()
{
  const std::uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(fd_.get(), &one, sizeof(one));
}

void Waker::drain()
{
  std::uint64_t value = 0;
  [[maybe_unused]] auto n = ::read(fd_.get(), &value, sizeof(value));
}

Connection::Connection(UniqueFd fd, std::size_t max_frame)
: fd_(std::move(fd)), decoder_(max_frame)
{
  set_nonblocking(fd_.get());
}

void Connection::send(const proto::Message & msg)
{
  auto frame = proto::encode_frame(msg);
  queued_bytes_ += frame.size();
  out_.push_back(std::move(frame));
  flush();
}

bool Connection::flush()
{
  while (!broken_ && fd_ && !out_.empty()) {
    const auto & front = out_.front();
    const auto n = ::send(
      fd_.get(), front.data() + out_offset_, front.size() - out_offset_,
      MSG_NOSIGNAL | MSG_DONTWAIT);
    if (n < 0) {
      if (errno == EINTR) {
        continue;
      }
      if (errno == EAGAIN || errno == EWOULDBLOCK) {
        return true;
      }
      broken_ = true;
      break;
    }
    out_offset_ += static_cast<std::size_t>(n);
    queued_bytes_ -= static_cast<std::size_t>(n);
    if (out_offset_ == front.size()) {
      out_.pop_front();
      out_offset_ = 0;
    }
  }
  return !broken_ && fd_;
}

bool Connection::receive()
{
  // Bounded per call so one busy peer cannot starve the rest of a poll loop.
  std::byte buf[64 * 1024];
  for (std::size_t budget = 8u << 20; budget > 0; ) {
    const auto n = ::recv(fd_.get(), buf, sizeof(buf), MSG_DONTWAIT);
    if (n > 0) {
      decoder_.feed(std::span<const std::byte>(buf, static_cast<std::size_t>(n)));
      budget -= std::min(budget, static_cast<std::size_t>(n));
      continue;
    }
    if (n == 0) {
      return false;
    }
    if (errno == EINTR) {
      continue;
    }
    return errno == EAGAIN || errno == EWOULDBLOCK;
  }
  return true;
}

void Connection::drain_output(std::chrono::milliseconds timeout)
{
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (wants_write() && flush()) {
    if (!wants_write()) {
      break;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
      deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      break;
    }
    pollfd p{fd_.get(), POLLOUT, 0};
    ::poll(&p, 1, static_cast<int>(left.count()));
  }
}

}  // namespace miniflow::io
