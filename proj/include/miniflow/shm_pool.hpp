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

#ifndef MINIFLOW__SHM_POOL_HPP_
#define MINIFLOW__SHM_POOL_HPP_

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace miniflow
{

/// A writable shared-memory object owned by the pool. Destroying it releases
/// the OS object.
class SharedMemory
{
public:
  virtual ~SharedMemory() = default;
  virtual std::span<std::byte> bytes() = 0;
};

class ShmFactory
{
public:
  virtual ~ShmFactory() = default;
  /// Throws Error(OsAllocationFailed) when the object cannot be created.
  virtual std::unique_ptr<SharedMemory> create(
    const std::string & os_name, std::uint64_t capacity) = 0;
};

/// POSIX shm_open/mmap backed objects, attachable from other processes.
std::shared_ptr<ShmFactory> posix_shm_factory();

/// Heap-backed fake for unit tests. Counts live objects and can be told to
/// refuse allocations.
class HeapShmFactory : public ShmFactory
{
public:
  std::unique_ptr<SharedMemory> create(
    const std::string & os_name, std::uint64_t capacity) override;

  void refuse_allocations(bool refuse) {refuse_ = refuse;}
  std::size_t live_objects() const {return *live_;}

private:
  bool refuse_ = false;
  std::shared_ptr<std::size_t> live_ = std::make_shared<std::size_t>(0);
};

struct BlockInfo
{
  std::uint64_t id = 0;
  std::string os_name;
  std::uint64_t capacity = 0;
  std::uint64_t created_seq = 0;
};

struct PoolConfig
{
  std::uint64_t max_free_bytes = 256ull << 20;
  std::shared_ptr<ShmFactory> factory;
  /// Middle component of "miniflow-<daemon_id>-<block_id>".
  std::string daemon_id = "local";
};

struct Lease
{
  BlockInfo block;
  /// Exactly the requested number of bytes, starting at offset 0.
  std::span<std::byte> region;
};

struct ReclaimOutcome
{
  enum class Kind {StillReferenced, Reclaimed, ReclaimedAndEvicted};

  Kind kind = Kind::StillReferenced;
  std::uint32_t remaining_refcount = 0;
  std::vector<std::uint64_t> evicted;
};

struct PoolStats
{
  std::uint64_t free_blocks = 0;
  std::uint64_t free_bytes = 0;
  std::uint64_t in_use_blocks = 0;
  std::uint64_t in_use_bytes = 0;
  std::uint64_t created_total = 0;
  std::uint64_t evicted_total = 0;

  bool operator==(const PoolStats &) const = default;
};

/// On-demand shared-memory block pool.
///
/// Free blocks wait in a queue ordered by the time they were freed. A request
/// takes the smallest free block that fits (oldest first among equals) and
/// otherwise creates a block of exactly the requested size. Blocks return to
/// the queue tail when their last receiver releases them; whenever the queue
/// holds more than `max_free_bytes`, blocks are destroyed from its head.
/// In-use blocks are never destroyed by the cap.
///
/// All public operations are linearizable.
class Pool
{
public:
  explicit Pool(PoolConfig config);
  ~Pool();

  Pool(const Pool &) = delete;
  Pool & operator=(const Pool &) = delete;

  Lease acquire(std::uint64_t size, std::uint32_t receiver_count);
  ReclaimOutcome release(std::uint64_t block_id);

  PoolStats stats() const;

  /// Refcount of an in-use block, or nullopt when the block is free or unknown.
  std::optional<std::uint32_t> refcount(std::uint64_t block_id) const;
  /// Block ids in free-queue order (head first).
  std::vector<std::uint64_t> free_queue() const;
  std::optional<BlockInfo> info(std::uint64_t block_id) const;
  /// Full writable mapping of a live block (capacity bytes).
  std::span<std::byte> block_bytes(std::uint64_t block_id) const;

  const PoolConfig & config() const {return config_;}

private:
  struct Entry
  {
    BlockInfo info;
    std::unique_ptr<SharedMemory> memory;
    std::uint32_t refcount = 0;  // 0 means the block sits in the free queue
    std::uint64_t freed_seq = 0;
  };

  void evict_over_cap(std::vector<std::uint64_t> & evicted);

  PoolConfig config_;
  mutable std::mutex mutex_;
  std::map<std::uint64_t, Entry> blocks_;
  // (capacity, freed_seq) -> id, for smallest-fit lookups.
  std::map<std::pair<std::uint64_t, std::uint64_t>, std::uint64_t> by_size_;
  // freed_seq -> id, head is the oldest.
  std::map<std::uint64_t, std::uint64_t> by_age_;
  std::uint64_t next_id_ = 1;
  std::uint64_t next_created_seq_ = 1;
  std::uint64_t next_freed_seq_ = 1;
  std::uint64_t free_bytes_ = 0;
  std::uint64_t in_use_bytes_ = 0;
  std::uint64_t created_total_ = 0;
  std::uint64_t evicted_total_ = 0;
};

/// Read-only or writable mapping of an existing shared-memory object,
/// opened by name from any process.
class ShmView
{
public:
  enum class Access {ReadOnly, ReadWrite};

  /// Maps the whole object; `size` bytes must be available.
  /// Throws Error(NoSuchObject) or Error(SizeMismatch).
  static ShmView attach(
    const std::string & os_name, std::uint64_t size,
    Access access = Access::ReadOnly);

  ShmView() = default;
  ~ShmView();
  ShmView(ShmView && other) noexcept;
  ShmView & operator=(ShmView && other) noexcept;
  ShmView(const ShmView &) = delete;
  ShmView & operator=(const ShmView &) = delete;

  /// The first `size` bytes passed to attach().
  std::span<const std::byte> bytes() const {return {data_, size_};}
  std::span<std::byte> writable_bytes() const;
  /// The entire mapped object.
  std::span<const std::byte> mapped() const {return {data_, mapped_len_};}
  std::span<std::byte> writable_mapped() const;
  bool valid() const {return data_ != nullptr;}

private:
  std::byte * data_ = nullptr;
  std::size_t size_ = 0;
  std::size_t mapped_len_ = 0;
  bool writable_ = false;
};

/// "miniflow-<daemon_id>-<block_id>"
std::string block_os_name(const std::string & daemon_id, std::uint64_t block_id);

/// Best-effort removal of an OS shared-memory object by name.
void unlink_shm(const std::string & os_name);

}  // namespace miniflow

#endif  // MINIFLOW__SHM_POOL_HPP_
