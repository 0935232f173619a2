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

#ifndef MINIFLOW__ERROR_HPP_
#define MINIFLOW__ERROR_HPP_

#include <stdexcept>
#include <string>
#include <string_view>

namespace miniflow
{

/// Error codes shared by every module. The textual name of a code is what
/// crosses process boundaries (coordinator replies, CLI diagnostics).
enum class Errc
{
  // envelope
  MetadataTooLarge,
  DuplicateKey,
  BufferTooSmall,
  PayloadSizeMismatch,
  BadMagic,
  UnsupportedVersion,
  BadElementType,
  TruncatedBuffer,
  MalformedMetadata,
  MisalignedPayload,
  // shm_pool
  OsAllocationFailed,
  UnknownBlock,
  NotInUse,
  NoSuchObject,
  SizeMismatch,
  InvalidArgument,
  // dfspec
  SyntaxError,
  UnknownKey,
  MissingField,
  BadTimerSyntax,
  ValidationFailed,
  // control_proto
  UnknownTag,
  Truncated,
  OversizeFrame,
  MalformedMessage,
  ConnectionClosed,
  // daemon
  SpawnFailed,
  DuplicateDataflow,
  ReadinessTimeout,
  UnknownRoute,
  UnknownDataflow,
  PeerUnreachable,
  // coordinator
  UnknownMachine,
  NotFound,
  AlreadyStopped,
  DaemonUnreachable,
  NameInUse,
  // node_api
  MissingEnv,
  ConnectFailed,
  SecondInit,
  ConnectionLost,
  UndeclaredOutput,
  // cli
  AlreadyRunning,
  NotRunning,
  MachinesRequireCoordinator,
  NodeFailed,
  BadSpec,
  TemplateExists,
  BuildFailed,
  // bench
  AccountingUnavailable,
  // generic
  IoError,
  Timeout,
};

std::string_view to_string(Errc code);

class Error : public std::runtime_error
{
public:
  Error(Errc code, const std::string & detail);
  explicit Error(Errc code);

  Errc code() const noexcept {return code_;}
  const std::string & detail() const noexcept {return detail_;}

private:
  Errc code_;
  std::string detail_;
};

[[noreturn]] void fail(Errc code, const std::string & detail = {});

}  // namespace miniflow

#endif  // MINIFLOW__ERROR_HPP_
