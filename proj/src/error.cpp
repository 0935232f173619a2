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

#include "miniflow/error.hpp"

namespace miniflow
{

std::string_view to_string(Errc code)
{
  switch (code) {
    case Errc::MetadataTooLarge: return "MetadataTooLarge";
    case Errc::DuplicateKey: return "DuplicateKey";
    case Errc::BufferTooSmall: return "BufferTooSmall";
    case Errc::PayloadSizeMismatch: return "PayloadSizeMismatch";
    case Errc::BadMagic: return "BadMagic";
    case Errc::UnsupportedVersion: return "UnsupportedVersion";
    case Errc::BadElementType: return "BadElementType";
    case Errc::TruncatedBuffer: return "TruncatedBuffer";
    case Errc::MalformedMetadata: return "MalformedMetadata";
    case Errc::MisalignedPayload: return "MisalignedPayload";
    case Errc::OsAllocationFailed: return "OsAllocationFailed";
    case Errc::UnknownBlock: return "UnknownBlock";
    case Errc::NotInUse: return "NotInUse";
    case Errc::NoSuchObject: return "NoSuchObject";
    case Errc::SizeMismatch: return "SizeMismatch";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::SyntaxError: return "SyntaxError";
    case Errc::UnknownKey: return "UnknownKey";
    case Errc::MissingField: return "MissingField";
    case Errc::BadTimerSyntax: return "BadTimerSyntax";
    case Errc::ValidationFailed: return "ValidationFailed";
    case Errc::UnknownTag: return "UnknownTag";
    case Errc::Truncated: return "Truncated";
    case Errc::OversizeFrame: return "OversizeFrame";
    case Errc::MalformedMessage: return "MalformedMessage";
    case Errc::ConnectionClosed: return "ConnectionClosed";
    case Errc::SpawnFailed: return "SpawnFailed";
    case Errc::DuplicateDataflow: return "DuplicateDataflow";
    case Errc::ReadinessTimeout: return "ReadinessTimeout";
    case Errc::UnknownRoute: return "UnknownRoute";
    case Errc::UnknownDataflow: return "UnknownDataflow";
    case Errc::PeerUnreachable: return "PeerUnreachable";
    case Errc::UnknownMachine: return "UnknownMachine";
    case Errc::NotFound: return "NotFound";
    case Errc::AlreadyStopped: return "AlreadyStopped";
    case Errc::DaemonUnreachable: return "DaemonUnreachable";
    case Errc::NameInUse: return "NameInUse";
    case Errc::MissingEnv: return "MissingEnv";
    case Errc::ConnectFailed: return "ConnectFailed";
    case Errc::SecondInit: return "SecondInit";
    case Errc::ConnectionLost: return "ConnectionLost";
    case Errc::UndeclaredOutput: return "UndeclaredOutput";
    case Errc::AlreadyRunning: return "AlreadyRunning";
    case Errc::NotRunning: return "NotRunning";
    case Errc::MachinesRequireCoordinator: return "MachinesRequireCoordinator";
    case Errc::NodeFailed: return "NodeFailed";
    case Errc::BadSpec: return "BadSpec";
    case Errc::TemplateExists: return "TemplateExists";
    case Errc::BuildFailed: return "BuildFailed";
    case Errc::AccountingUnavailable: return "AccountingUnavailable";
    case Errc::IoError: return "IoError";
    case Errc::Timeout: return "Timeout";
  }
  return "Unknown";
}

namespace
{

std::string compose(Errc code, const std::string & detail)
{
  std::string what{to_string(code)};
  if (!detail.empty()) {
    what += ": ";
    what += detail;
  }
  return what;
}

}  // namespace

Error::Error(Errc code, const std::string & detail)
: std::runtime_error(compose(code, detail)), code_(code), detail_(detail)
{
}

Error::Error(Errc code)
: Error(code, {})
{
}

void fail(Errc code, const std::string & detail)
{
  throw Error(code, detail);
}

}  // namespace miniflow
