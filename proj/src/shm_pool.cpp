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

#include "miniflow/shm_pool.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "miniflow/error.hpp"

namespace miniflow
{

namespace
{

std::string posix_name(const std::string & os_name)
{
  return "/" + os_name;
}

class PosixSharedMemory : public SharedMemory
{
public:
  PosixSharedMemory(std::string os_name, std::byte * data, std::size_t len)
  : os_name_(std::move(os_name)), data_(data), len_(len) {}

  ~PosixSharedMemory() override
  {
    if (data_ != nullptr) {
      ::munmap(data_, len_);
    }
    ::shm_unlink(posix_name(os_name_).c_str());
  }

  std::span<std::byte> bytes() override {return {data_, len_};}

private:
  std::string os_name_;
  std::byte * data_;
  std::size_t len_;
};

class PosixShmFactory : public ShmFactory
{
public:
  std::unique_ptr<SharedMemory> create(
    const std::string & os_name, std::uint64_t capacity) override
  {
    const auto name = posix_name(os_name);
    int fd = ::shm_open(name.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
    if (fd < 0 && errno == EEXIST) {
      // Left behind by a crashed process with the same id.
      ::shm_unlink(name.c_str());
      fd = ::shm_open(name.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
    }
    if (fd < 0) {
      fail(Errc::OsAllocationFailed, os_name + ": " + std::strerror(errno));
    }
    if (::ftruncate(fd, static_cast<off_t>(capacity)) != 0) {
      const int err = errno;
      ::close(fd);
      ::shm_unlink(name.c_str());
      fail(Errc::OsAllocationFailed, os_name + ": " + std::strerror(err));
    }
    void * addr = ::mmap(nullptr, capacity, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    const int err = errno;
    ::close(fd);
    if (addr == MAP_FAILED) {
      ::shm_unlink(name.c_str());
      fail(Errc::OsAllocationFailed, os_name + ": " + std::strerror(err));
    }
    return std::make_unique<PosixSharedMemory>(
      os_name, static_cast<std::byte *>(addr), static_cast<std::size_t>(capacity));
  }
};

// Anonymous private mapping: pages materialize only when touched.
class HeapSharedMemory : public SharedMemory
{
public:
  HeapSharedMemory(std::uint64_t capacity, std::shared_ptr<std::size_t> live)
  : len_(static_cast<std::size_t>(capacity)), live_(std::move(live))
  {
    void * addr = ::mmap(
      nullptr, len_, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (addr == MAP_FAILED) {
      fail(Errc::OsAllocationFailed, std::strerror(errno));
    }
    data_ = static_cast<std::byte *>(addr);
    ++*live_;
  }
  ~HeapSharedMemory() override
  {
    ::munmap(data_, len_);
    --*live_;
  }

  std::span<std::byte> bytes() override {return {data_, len_};}

private:
  std::byte * data_ = nullptr;
  std::size_t len_;
  std::shared_ptr<std::size_t> live_;
};

}  // namespace

std::shared_ptr<ShmFactory> posix_shm_factory()
{
  return std::make_shared<PosixShmFactory>();
}

std::unique_ptr<SharedMemory> HeapShmFactory::create(
  const std::string & os_name, std::uint64_t capacity)
{
  if (refuse_) {
    fail(Errc::OsAllocationFailed, os_name + ": refused by test factory");
  }
  return std::make_unique<HeapSharedMemory>(capacity, live_);
}

std::string block_os_name(const std::string & daemon_id, std::uint64_t block_id)
{
  return "miniflow-" + daemon_id + "-" + std::to_string(block_id);
}

void unlink_shm(const std::string & os_name)
{
  ::shm_unlink(posix_name(os_name).c_str());
}

Pool::Pool(PoolConfig config)
: config_(std::move(config))
{
  if (!config_.factory) {
    config_.factory = posix_shm_factory();
  }
}

Pool::~Pool() = default;

Lease Pool::acquire(std::uint64_t size, std::uint32_t receiver_count)
{
  if (size == 0 || receiver_count == 0) {
    fail(Errc::InvalidArgument, "acquire needs size > 0 and receiver_count >= 1");
  }
  std::lock_guard lock(mutex_);
  Entry * entry = nullptr;
  const auto fit = by_size_.lower_bound({size, 0});
  if (fit != by_size_.end()) {
    entry = &blocks_.at(fit->second);
    by_age_.erase(entry->freed_seq);
    by_size_.erase(fit);
    free_bytes_ -= entry->info.capacity;
  } else {
    const auto id = next_id_++;
    Entry fresh;
    fresh.info.id = id;
    fresh.info.os_name = block_os_name(config_.daemon_id, id);
    fresh.info.capacity = size;
    fresh.info.created_seq = next_created_seq_++;
    fresh.memory = config_.factory->create(fresh.info.os_name, size);
    ++created_total_;
    entry = &blocks_.emplace(id, std::move(fresh)).first->second;
  }
  entry->refcount = receiver_count;
  entry->freed_seq = 0;
  in_use_bytes_ += entry->info.capacity;
  return Lease{entry->info, entry->memory->bytes().first(size)};
}

ReclaimOutcome Pool::release(std::uint64_t block_id)
{
  std::lock_guard lock(mutex_);
  const auto it = blocks_.find(block_id);
  if (it == blocks_.end()) {
    fail(Errc::UnknownBlock, std::to_string(block_id));
  }
  Entry & entry = it->second;
  if (entry.refcount == 0) {
    fail(Errc::NotInUse, std::to_string(block_id));
  }
  ReclaimOutcome outcome;
  if (--entry.refcount > 0) {
    outcome.kind = ReclaimOutcome::Kind::StillReferenced;
    outcome.remaining_refcount = entry.refcount;
    return outcome;
  }
  in_use_bytes_ -= entry.info.capacity;
  entry.freed_seq = next_freed_seq_++;
  by_age_.emplace(entry.freed_seq, block_id);
  by_size_.emplace(std::pair{entry.info.capacity, entry.freed_seq}, block_id);
  free_bytes_ += entry.info.capacity;
  evict_over_cap(outcome.evicted);
  outcome.kind = outcome.evicted.empty() ?
    ReclaimOutcome::Kind::Reclaimed : ReclaimOutcome::Kind::ReclaimedAndEvicted;
  return outcome;
}

void Pool::evict_over_cap(std::vector<std::uint64_t> & evicted)
{
  while (free_bytes_ > config_.max_free_bytes && !by_age_.empty()) {
    const auto head = by_age_.begin();
    const auto id = head->second;
    const auto node = blocks_.find(id);
    by_size_.erase({node->second.info.capacity, head->first});
    by_age_.erase(head);
    free_bytes_ -= node->second.info.capacity;
    blocks_.erase(node);
    ++evicted_total_;
    evicted.push_back(id);
  }
}

PoolStats Pool::stats() const
{
  std::lock_guard lock(mutex_);
  PoolStats s;
  s.free_blocks = by_age_.size();
  s.free_bytes = free_bytes_;
  s.in_use_blocks = blocks_.size() - by_age_.size();
  s.in_use_bytes = in_use_bytes_;
  s.created_total = created_total_;
  s.evicted_total = evicted_total_;
  return s;
}

std::optional<std::uint32_t> Pool::refcount(std::uint64_t block_id) const
{
  std::lock_guard lock(mutex_);
  const auto it = blocks_.find(block_id);
  if (it == blocks_.end() || it->second.refcount == 0) {
    return std::nullopt;
  }
  return it->second.refcount;
}

std::vector<std::uint64_t> Pool::free_queue() const
{
  std::lock_guard lock(mutex_);
  std::vector<std::uint64_t> ids;
  ids.reserve(by_age_.size());
  for (const auto & [seq, id] : by_age_) {
    ids.push_back(id);
  }
  return ids;
}

std::optional<BlockInfo> Pool::info(std::uint64_t block_id) const
{
  std::lock_guard lock(mutex_);
  const auto it = blocks_.find(block_id);
  if (it == blocks_.end()) {
    return std::nullopt;
  }
  return it->second.info;
}

std::span<std::byte> Pool::block_bytes(std::uint64_t block_id) const
{
  std::lock_guard lock(mutex_);
  const auto it = blocks_.find(block_id);
  if (it == blocks_.end()) {
    fail(Errc::UnknownBlock, std::to_string(block_id));
  }
  return it->second.memory->bytes();
}

ShmView ShmView::attach(const std::string & os_name, std::uint64_t size, Access access)
{
  const bool rw = access == Access::ReadWrite;
  const int fd = ::shm_open(posix_name(os_name).c_str(), rw ? O_RDWR : O_RDONLY, 0);
  if (fd < 0) {
    fail(Errc::NoSuchObject, os_name);
  }
  struct stat st{};
  if (::fstat(fd, &st) != 0) {
    ::close(fd);
    fail(Errc::NoSuchObject, os_name);
  }
  const auto object_size = static_cast<std::uint64_t>(st.st_size);
  if (object_size < size) {
    ::close(fd);
    fail(
      Errc::SizeMismatch,
      os_name + " holds " + std::to_string(object_size) + " < " + std::to_string(size));
  }
  ShmView view;
  view.size_ = static_cast<std::size_t>(size);
  view.mapped_len_ = static_cast<std::size_t>(object_size);
  view.writable_ = rw;
  if (object_size > 0) {
    void * addr = ::mmap(
      nullptr, object_size, rw ? PROT_READ | PROT_WRITE : PROT_READ, MAP_SHARED, fd, 0);
    if (addr == MAP_FAILED) {
      const int err = errno;
      ::close(fd);
      fail(Errc::NoSuchObject, os_name + ": " + std::strerror(err));
    }
    view.data_ = static_cast<std::byte *>(addr);
  }
  ::close(fd);
  return view;
}

ShmView::~ShmView()
{
  if (data_ != nullptr) {
    ::munmap(data_, mapped_len_);
  }
}

ShmView::ShmView(ShmView && other) noexcept
: data_(std::exchange(other.data_, nullptr)),
  size_(std::exchange(other.size_, 0)),
  mapped_len_(std::exchange(other.mapped_len_, 0)),
  writable_(std::exchange(other.writable_, false))
{
}

ShmView & ShmView::operator=(ShmView && other) noexcept
{
  if (this != &other) {
    if (data_ != nullptr) {
      ::munmap(data_, mapped_len_);
    }
    data_ = std::exchange(other.data_, nullptr);
    size_ = std::exchange(other.size_, 0);
    mapped_len_ = std::exchange(other.mapped_len_, 0);
    writable_ = std::exchange(other.writable_, false);
  }
  return *this;
}

std::span<std::byte> ShmView::writable_bytes() const
{
  if (!writable_) {
    fail(Errc::InvalidArgument, "view is read-only");
  }
  return {data_, size_};
}

std::span<std::byte> ShmView::writable_mapped() const
{
  if (!writable_) {
    fail(Errc::InvalidArgument, "view is read-only");
  }
  return {data_, mapped_len_};
}

}  // namespace miniflow
