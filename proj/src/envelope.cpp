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

#include "miniflow/envelope.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <limits>
#include <set>

#include "miniflow/detail/bytes.hpp"
#include "miniflow/error.hpp"

namespace miniflow
{

namespace fmt_ = envelope_format;
using detail::load_le;
using detail::store_le;

std::size_t element_width(ElementType type)
{
  switch (type) {
    case ElementType::U8:
    case ElementType::I8:
      return 1;
    case ElementType::U16:
    case ElementType::I16:
      return 2;
    case ElementType::U32:
    case ElementType::I32:
    case ElementType::F32:
      return 4;
    case ElementType::U64:
    case ElementType::I64:
    case ElementType::F64:
      return 8;
  }
  return 0;
}

std::optional<ElementType> element_type_from_code(std::uint8_t code)
{
  if (code >= kElementTypeCount) {
    return std::nullopt;
  }
  return static_cast<ElementType>(code);
}

namespace
{
constexpr std::string_view kTypeNames[kElementTypeCount] = {
  "u8", "i8", "u16", "i16", "u32", "i32", "u64", "i64", "f32", "f64"};
}  // namespace

std::string_view to_string(ElementType type)
{
  return kTypeNames[static_cast<std::uint8_t>(type)];
}

std::optional<ElementType> element_type_from_string(std::string_view name)
{
  for (std::uint8_t i = 0; i < kElementTypeCount; ++i) {
    if (kTypeNames[i] == name) {
      return static_cast<ElementType>(i);
    }
  }
  return std::nullopt;
}

void Metadata::set(std::string key, std::string value)
{
  for (auto & entry : entries_) {
    if (entry.first == key) {
      entry.second = std::move(value);
      return;
    }
  }
  entries_.emplace_back(std::move(key), std::move(value));
}

void Metadata::append(std::string key, std::string value)
{
  entries_.emplace_back(std::move(key), std::move(value));
}

std::optional<std::string_view> Metadata::get(std::string_view key) const
{
  for (const auto & entry : entries_) {
    if (entry.first == key) {
      return std::string_view{entry.second};
    }
  }
  return std::nullopt;
}

namespace instrument
{
namespace
{
std::atomic<std::uint64_t> g_copy_passes{0};
std::atomic<std::uint64_t> g_copy_bytes{0};
}  // namespace

CopyStats payload_copies()
{
  return {g_copy_passes.load(), g_copy_bytes.load()};
}

void note_payload_copy(std::uint64_t bytes)
{
  g_copy_passes.fetch_add(1, std::memory_order_relaxed);
  g_copy_bytes.fetch_add(bytes, std::memory_order_relaxed);
}

}  // namespace instrument

namespace
{

std::uint64_t round_up(std::uint64_t value, std::uint64_t multiple)
{
  return (value + multiple - 1) / multiple * multiple;
}

std::uint64_t payload_bytes(ElementType type, std::uint64_t count)
{
  const auto width = element_width(type);
  if (count > std::numeric_limits<std::uint64_t>::max() / width) {
    fail(Errc::InvalidArgument, "element_count overflows payload size");
  }
  return count * width;
}

}  // namespace

Layout compute_layout(
  ElementType element_type, std::uint64_t element_count,
  const Metadata & metadata)
{
  if (!element_type_from_code(static_cast<std::uint8_t>(element_type))) {
    fail(Errc::BadElementType);
  }
  if (metadata.size() > std::numeric_limits<std::uint16_t>::max()) {
    fail(Errc::MetadataTooLarge, "more than 65535 entries");
  }
  std::set<std::string_view> seen;
  std::uint64_t metadata_len = 2;
  for (const auto & [key, value] : metadata.entries()) {
    if (!seen.insert(key).second) {
      fail(Errc::DuplicateKey, key);
    }
    if (key.size() > std::numeric_limits<std::uint16_t>::max()) {
      fail(Errc::MetadataTooLarge, "key longer than 65535 bytes");
    }
    if (value.size() > std::numeric_limits<std::uint32_t>::max()) {
      fail(Errc::MetadataTooLarge, "value longer than 2^32-1 bytes");
    }
    metadata_len += 2 + key.size() + 4 + value.size();
  }
  const auto payload_offset =
    round_up(fmt_::kHeaderSize + metadata_len, fmt_::kPayloadAlignment);
  if (payload_offset > std::numeric_limits<std::uint32_t>::max()) {
    fail(Errc::MetadataTooLarge, "metadata section exceeds 32-bit offsets");
  }
  Layout layout;
  layout.metadata_len = static_cast<std::uint32_t>(metadata_len);
  layout.payload_offset = static_cast<std::uint32_t>(payload_offset);
  layout.total_size = payload_offset + payload_bytes(element_type, element_count);
  return layout;
}

std::size_t encode_into(
  std::span<std::byte> buffer, ElementType element_type,
  std::uint64_t element_count, const Metadata & metadata,
  const PayloadWriter & write_payload)
{
  const auto layout = compute_layout(element_type, element_count, metadata);
  if (buffer.size() < layout.total_size) {
    fail(
      Errc::BufferTooSmall,
      std::to_string(buffer.size()) + " < " + std::to_string(layout.total_size));
  }
  std::byte * out = buffer.data();
  std::memcpy(out, fmt_::kMagic, 4);
  out[4] = std::byte{fmt_::kVersion};
  out[5] = std::byte{static_cast<std::uint8_t>(element_type)};
  store_le<std::uint16_t>(out + 6, 0);
  store_le<std::uint64_t>(out + 8, element_count);
  store_le<std::uint32_t>(out + 16, layout.metadata_len);
  store_le<std::uint32_t>(out + 20, layout.payload_offset);

  std::byte * cursor = out + fmt_::kHeaderSize;
  store_le<std::uint16_t>(cursor, static_cast<std::uint16_t>(metadata.size()));
  cursor += 2;
  for (const auto & [key, value] : metadata.entries()) {
    store_le<std::uint16_t>(cursor, static_cast<std::uint16_t>(key.size()));
    cursor += 2;
    std::memcpy(cursor, key.data(), key.size());
    cursor += key.size();
    store_le<std::uint32_t>(cursor, static_cast<std::uint32_t>(value.size()));
    cursor += 4;
    std::memcpy(cursor, value.data(), value.size());
    cursor += value.size();
  }
  std::memset(cursor, 0, static_cast<std::size_t>(out + layout.payload_offset - cursor));

  const auto payload_len = layout.total_size - layout.payload_offset;
  if (write_payload) {
    write_payload(buffer.subspan(layout.payload_offset, payload_len));
  }
  return static_cast<std::size_t>(layout.total_size);
}

std::size_t encode_into(
  std::span<std::byte> buffer, ElementType element_type,
  std::uint64_t element_count, const Metadata & metadata,
  std::span<const std::byte> payload)
{
  if (payload.size() != payload_bytes(element_type, element_count)) {
    fail(
      Errc::PayloadSizeMismatch,
      std::to_string(payload.size()) + " bytes for " + std::to_string(element_count) +
      " x " + std::string{to_string(element_type)});
  }
  return encode_into(
    buffer, element_type, element_count, metadata,
    [payload](std::span<std::byte> region) {
      if (!payload.empty()) {
        std::memcpy(region.data(), payload.data(), payload.size());
        instrument::note_payload_copy(payload.size());
      }
    });
}

std::vector<std::byte> encode(
  ElementType element_type, std::uint64_t element_count,
  const Metadata & metadata, std::span<const std::byte> payload)
{
  const auto layout = compute_layout(element_type, element_count, metadata);
  std::vector<std::byte> out(layout.total_size);
  encode_into(out, element_type, element_count, metadata, payload);
  return out;
}

namespace
{

struct Header
{
  std::uint8_t version;
  std::uint8_t type_code;
  std::uint16_t reserved;
  std::uint64_t element_count;
  std::uint32_t metadata_len;
  std::uint32_t payload_offset;
};

Header read_header(const std::byte * p)
{
  Header h;
  h.version = std::to_integer<std::uint8_t>(p[4]);
  h.type_code = std::to_integer<std::uint8_t>(p[5]);
  h.reserved = load_le<std::uint16_t>(p + 6);
  h.element_count = load_le<std::uint64_t>(p + 8);
  h.metadata_len = load_le<std::uint32_t>(p + 16);
  h.payload_offset = load_le<std::uint32_t>(p + 20);
  return h;
}

bool magic_ok(const std::byte * p)
{
  return std::memcmp(p, fmt_::kMagic, 4) == 0;
}

enum class MetadataStatus {Ok, Malformed, Duplicate};

// Parses exactly `section`; any leftover or missing byte is malformed.
MetadataStatus parse_metadata(std::span<const std::byte> section, Metadata * out)
{
  detail::ByteReader reader(section);
  std::uint16_t count = 0;
  if (!reader.get(count)) {
    return MetadataStatus::Malformed;
  }
  std::set<std::string> seen;
  bool duplicate = false;
  for (std::uint16_t i = 0; i < count; ++i) {
    std::uint16_t key_len = 0;
    std::string key;
    std::uint32_t value_len = 0;
    std::string value;
    if (!reader.get(key_len) || !reader.get_string(key_len, key) ||
      !reader.get(value_len) || !reader.get_string(value_len, value))
    {
      return MetadataStatus::Malformed;
    }
    if (!seen.insert(key).second) {
      duplicate = true;
    }
    if (out != nullptr) {
      out->append(std::move(key), std::move(value));
    }
  }
  if (reader.remaining() != 0) {
    return MetadataStatus::Malformed;
  }
  return duplicate ? MetadataStatus::Duplicate : MetadataStatus::Ok;
}

}  // namespace

Envelope decode(std::span<const std::byte> buffer)
{
  if (buffer.size() < fmt_::kHeaderSize) {
    fail(Errc::TruncatedBuffer, "shorter than the 24-byte header");
  }
  const std::byte * p = buffer.data();
  if (!magic_ok(p)) {
    fail(Errc::BadMagic);
  }
  const auto h = read_header(p);
  if (h.version != fmt_::kVersion) {
    fail(Errc::UnsupportedVersion, std::to_string(h.version));
  }
  const auto type = element_type_from_code(h.type_code);
  if (!type) {
    fail(Errc::BadElementType, std::to_string(h.type_code));
  }
  if (h.payload_offset % fmt_::kPayloadAlignment != 0) {
    fail(Errc::MisalignedPayload, std::to_string(h.payload_offset));
  }
  if (static_cast<std::uint64_t>(fmt_::kHeaderSize) + h.metadata_len > h.payload_offset) {
    fail(Errc::MalformedMetadata, "metadata section overlaps the payload");
  }
  const auto width = element_width(*type);
  if (h.element_count > (std::numeric_limits<std::uint64_t>::max() - h.payload_offset) / width) {
    fail(Errc::TruncatedBuffer, "element_count overflows");
  }
  const std::uint64_t payload_len = h.element_count * width;
  if (h.payload_offset + payload_len > buffer.size()) {
    fail(Errc::TruncatedBuffer, "declared sizes exceed the buffer");
  }

  Envelope env;
  env.element_type = *type;
  env.element_count = h.element_count;
  env.payload_offset = h.payload_offset;
  const auto status =
    parse_metadata(buffer.subspan(fmt_::kHeaderSize, h.metadata_len), &env.metadata);
  if (status != MetadataStatus::Ok) {
    fail(
      Errc::MalformedMetadata,
      status == MetadataStatus::Duplicate ? "duplicate key" : "bad entry lengths");
  }
  env.payload = buffer.subspan(h.payload_offset, static_cast<std::size_t>(payload_len));
  return env;
}

std::optional<std::uint64_t> declared_size(std::span<const std::byte> buffer)
{
  if (buffer.size() < fmt_::kHeaderSize || !magic_ok(buffer.data())) {
    return std::nullopt;
  }
  const auto h = read_header(buffer.data());
  const auto type = element_type_from_code(h.type_code);
  if (!type) {
    return std::nullopt;
  }
  const auto width = element_width(*type);
  if (h.element_count > (std::numeric_limits<std::uint64_t>::max() - h.payload_offset) / width) {
    return std::nullopt;
  }
  return h.payload_offset + h.element_count * width;
}

std::string_view to_string(Violation violation)
{
  switch (violation) {
    case Violation::TruncatedBuffer: return "TruncatedBuffer";
    case Violation::BadMagic: return "BadMagic";
    case Violation::UnsupportedVersion: return "UnsupportedVersion";
    case Violation::BadElementType: return "BadElementType";
    case Violation::NonZeroReserved: return "NonZeroReserved";
    case Violation::MalformedMetadata: return "MalformedMetadata";
    case Violation::DuplicateKey: return "DuplicateKey";
    case Violation::MisalignedPayload: return "MisalignedPayload";
    case Violation::PayloadOffsetOverlap: return "PayloadOffsetOverlap";
    case Violation::NonZeroPadding: return "NonZeroPadding";
  }
  return "Unknown";
}

std::vector<Violation> validate(std::span<const std::byte> buffer)
{
  std::vector<Violation> found;
  if (buffer.size() < fmt_::kHeaderSize) {
    found.push_back(Violation::TruncatedBuffer);
    return found;
  }
  const std::byte * p = buffer.data();
  const auto h = read_header(p);
  if (!magic_ok(p)) {
    found.push_back(Violation::BadMagic);
  }
  if (h.version != fmt_::kVersion) {
    found.push_back(Violation::UnsupportedVersion);
  }
  const auto type = element_type_from_code(h.type_code);
  if (!type) {
    found.push_back(Violation::BadElementType);
  }
  if (h.reserved != 0) {
    found.push_back(Violation::NonZeroReserved);
  }
  if (h.payload_offset % fmt_::kPayloadAlignment != 0) {
    found.push_back(Violation::MisalignedPayload);
  }

  const std::uint64_t metadata_end = fmt_::kHeaderSize + static_cast<std::uint64_t>(h.metadata_len);
  bool truncated = false;
  if (metadata_end > buffer.size()) {
    truncated = true;
    found.push_back(Violation::MalformedMetadata);
  } else {
    switch (parse_metadata(buffer.subspan(fmt_::kHeaderSize, h.metadata_len), nullptr)) {
      case MetadataStatus::Ok: break;
      case MetadataStatus::Malformed: found.push_back(Violation::MalformedMetadata); break;
      case MetadataStatus::Duplicate: found.push_back(Violation::DuplicateKey); break;
    }
  }
  if (metadata_end > h.payload_offset) {
    found.push_back(Violation::PayloadOffsetOverlap);
  } else {
    const auto padding_end = std::min<std::uint64_t>(h.payload_offset, buffer.size());
    for (std::uint64_t i = metadata_end; i < padding_end; ++i) {
      if (p[i] != std::byte{0}) {
        found.push_back(Violation::NonZeroPadding);
        break;
      }
    }
  }
  if (type) {
    const auto width = element_width(*type);
    const bool overflow =
      h.element_count > (std::numeric_limits<std::uint64_t>::max() - h.payload_offset) / width;
    if (overflow || h.payload_offset + h.element_count * width > buffer.size()) {
      truncated = true;
    }
  } else if (h.payload_offset > buffer.size()) {
    truncated = true;
  }
  if (truncated) {
    found.push_back(Violation::TruncatedBuffer);
  }
  return found;
}

}  // namespace miniflow
