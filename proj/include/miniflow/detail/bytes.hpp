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

#ifndef MINIFLOW__DETAIL__BYTES_HPP_
#define MINIFLOW__DETAIL__BYTES_HPP_

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace miniflow::detail
{

// Fixed little-endian integer access, independent of host byte order.
template<typename T>
inline void store_le(std::byte * dst, T value)
{
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    dst[i] = static_cast<std::byte>((value >> (8 * i)) & 0xFF);
  }
}

template<typename T>
inline T load_le(const std::byte * src)
{
  static_assert(std::is_unsigned_v<T>);
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(std::to_integer<std::uint8_t>(src[i])) << (8 * i);
  }
  return value;
}

/// Append-only little-endian writer over a growable byte vector.
class ByteWriter
{
public:
  explicit ByteWriter(std::vector<std::byte> & out)
  : out_(out) {}

  template<typename T>
  void put(T value)
  {
    const auto at = out_.size();
    out_.resize(at + sizeof(T));
    store_le<T>(out_.data() + at, value);
  }

  void put_bytes(std::span<const std::byte> bytes)
  {
    out_.insert(out_.end(), bytes.begin(), bytes.end());
  }

  void put_bytes(std::string_view text)
  {
    const auto * p = reinterpret_cast<const std::byte *>(text.data());
    out_.insert(out_.end(), p, p + text.size());
  }

  std::size_t size() const {return out_.size();}

private:
  std::vector<std::byte> & out_;
};

/// Bounds-checked little-endian reader. Every accessor returns false instead
/// of reading past the end.
class ByteReader
{
public:
  explicit ByteReader(std::span<const std::byte> in)
  : in_(in) {}

  template<typename T>
  bool get(T & value)
  {
    if (remaining() < sizeof(T)) {
      return false;
    }
    value = load_le<T>(in_.data() + pos_);
    pos_ += sizeof(T);
    return true;
  }

  bool get_bytes(std::size_t n, std::span<const std::byte> & out)
  {
    if (remaining() < n) {
      return false;
    }
    out = in_.subspan(pos_, n);
    pos_ += n;
    return true;
  }

  bool get_string(std::size_t n, std::string & out)
  {
    std::span<const std::byte> raw;
    if (!get_bytes(n, raw)) {
      return false;
    }
    out.assign(reinterpret_cast<const char *>(raw.data()), raw.size());
    return true;
  }

  std::size_t remaining() const {return in_.size() - pos_;}
  std::size_t position() const {return pos_;}

private:
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

inline std::span<const std::byte> as_bytes(std::string_view text)
{
  return {reinterpret_cast<const std::byte *>(text.data()), text.size()};
}

}  // namespace miniflow::detail

#endif  // MINIFLOW__DETAIL__BYTES_HPP_
