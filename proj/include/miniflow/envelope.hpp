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

#ifndef MINIFLOW__ENVELOPE_HPP_
#define MINIFLOW__ENVELOPE_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace miniflow
{

/// Element type of an envelope's typed array payload (format version 1).
enum class ElementType : std::uint8_t
{
  U8 = 0,
  I8 = 1,
  U16 = 2,
  I16 = 3,
  U32 = 4,
  I32 = 5,
  U64 = 6,
  I64 = 7,
  F32 = 8,
  F64 = 9,
};

inline constexpr std::uint8_t kElementTypeCount = 10;

std::size_t element_width(ElementType type);
std::optional<ElementType> element_type_from_code(std::uint8_t code);
std::string_view to_string(ElementType type);
std::optional<ElementType> element_type_from_string(std::string_view name);

/// Ordered text key/value pairs carried inside an envelope.
///
/// Insertion order is preserved and is part of the encoded form. Duplicate
/// keys can be constructed but are rejected when the envelope is laid out.
class Metadata
{
public:
  using Entry = std::pair<std::string, std::string>;

  Metadata() = default;
  Metadata(std::initializer_list<Entry> entries)
  : entries_(entries) {}

  /// Replaces the value of an existing key, or appends a new entry.
  void set(std::string key, std::string value);
  void append(std::string key, std::string value);
  std::optional<std::string_view> get(std::string_view key) const;

  const std::vector<Entry> & entries() const {return entries_;}
  std::size_t size() const {return entries_.size();}
  bool empty() const {return entries_.empty();}

  bool operator==(const Metadata &) const = default;

private:
  std::vector<Entry> entries_;
};

namespace metadata_keys
{
inline constexpr std::string_view kSendTimestamp = "ts_send_ns";
inline constexpr std::string_view kSequence = "seq";
inline constexpr std::string_view kOutputId = "output_id";
inline constexpr std::string_view kNodeId = "node_id";
}  // namespace metadata_keys

namespace envelope_format
{
inline constexpr std::uint8_t kMagic[4] = {0x44, 0x4F, 0x52, 0x41};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 24;
inline constexpr std::size_t kPayloadAlignment = 64;
}  // namespace envelope_format

struct Layout
{
  std::uint32_t metadata_len = 0;
  std::uint32_t payload_offset = 0;
  std::uint64_t total_size = 0;

  bool operator==(const Layout &) const = default;
};

/// A decoded envelope. `payload` aliases the buffer that was decoded; the
/// envelope is only valid while that buffer is.
struct Envelope
{
  ElementType element_type = ElementType::U8;
  std::uint64_t element_count = 0;
  Metadata metadata;
  std::uint32_t payload_offset = 0;
  std::span<const std::byte> payload;

  template<typename T>
  std::span<const T> values() const
  {
    return {reinterpret_cast<const T *>(payload.data()), payload.size() / sizeof(T)};
  }
};

Layout compute_layout(
  ElementType element_type, std::uint64_t element_count,
  const Metadata & metadata);

/// Fills the payload region of an envelope being encoded. Receives exactly
/// element_count * width bytes.
using PayloadWriter = std::function<void (std::span<std::byte>)>;

std::size_t encode_into(
  std::span<std::byte> buffer, ElementType element_type,
  std::uint64_t element_count, const Metadata & metadata,
  const PayloadWriter & write_payload);

/// Copies `payload` into the envelope; payload.size() must equal
/// element_count * width.
std::size_t encode_into(
  std::span<std::byte> buffer, ElementType element_type,
  std::uint64_t element_count, const Metadata & metadata,
  std::span<const std::byte> payload);

std::vector<std::byte> encode(
  ElementType element_type, std::uint64_t element_count,
  const Metadata & metadata, std::span<const std::byte> payload);

/// Reads only the header and metadata section of `buffer`.
Envelope decode(std::span<const std::byte> buffer);

enum class Violation
{
  TruncatedBuffer,
  BadMagic,
  UnsupportedVersion,
  BadElementType,
  NonZeroReserved,
  MalformedMetadata,
  DuplicateKey,
  MisalignedPayload,
  PayloadOffsetOverlap,
  NonZeroPadding,
};

std::string_view to_string(Violation violation);

/// Reports every layout violation found in `buffer`; empty means valid.
std::vector<Violation> validate(std::span<const std::byte> buffer);

/// Total envelope size recorded in a header, if the header is readable.
std::optional<std::uint64_t> declared_size(std::span<const std::byte> buffer);

namespace instrument
{

/// Process-wide count of payload copy passes performed by this library.
struct CopyStats
{
  std::uint64_t passes = 0;
  std::uint64_t bytes = 0;
};

CopyStats payload_copies();
void note_payload_copy(std::uint64_t bytes);

}  // namespace instrument

}  // namespace miniflow

#endif  // MINIFLOW__ENVELOPE_HPP_
