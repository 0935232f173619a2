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

#ifndef POOL_ORACLE_HPP_
#define POOL_ORACLE_HPP_

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "miniflow/shm_pool.hpp"

namespace pool_oracle
{

/// Brute-force reference allocator: plain lists and linear scans, written
/// from the allocation rules alone.
class ReferenceAllocator
{
public:
  struct FreeBlock
  {
    std::uint64_t id;
    std::uint64_t capacity;
    std::uint64_t freed_seq;
  };

  struct AcquireResult
  {
    std::uint64_t id;
    bool created;
  };

  explicit ReferenceAllocator(std::uint64_t max_free_bytes)
  : max_free_(max_free_bytes) {}

  AcquireResult acquire(std::uint64_t size, std::uint32_t receivers)
  {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < free_.size(); ++i) {
      const auto & b = free_[i];
      if (b.capacity < size) {
        continue;
      }
      if (!best || b.capacity < free_[*best].capacity ||
        (b.capacity == free_[*best].capacity && b.freed_seq < free_[*best].freed_seq))
      {
        best = i;
      }
    }
    if (best) {
      const auto chosen = free_[*best];
      free_.erase(free_.begin() + static_cast<std::ptrdiff_t>(*best));
      in_use_[chosen.id] = {chosen.capacity, receivers};
      return {chosen.id, false};
    }
    const auto id = next_id_++;
    in_use_[id] = {size, receivers};
    return {id, true};
  }

  /// Returns the ids destroyed by the cap, or nullopt while still referenced.
  std::optional<std::vector<std::uint64_t>> release(std::uint64_t id)
  {
    auto & [capacity, refs] = in_use_.at(id);
    if (--refs > 0) {
      return std::nullopt;
    }
    free_.push_back({id, capacity, next_freed_++});
    in_use_.erase(id);
    std::vector<std::uint64_t> evicted;
    while (free_bytes() > max_free_) {
      evicted.push_back(free_.front().id);
      free_.erase(free_.begin());
    }
    return evicted;
  }

  std::uint64_t free_bytes() const
  {
    std::uint64_t sum = 0;
    for (const auto & b : free_) {
      sum += b.capacity;
    }
    return sum;
  }

  std::vector<std::uint64_t> free_ids() const
  {
    std::vector<std::uint64_t> ids;
    for (const auto & b : free_) {
      ids.push_back(b.id);
    }
    return ids;
  }

  const std::map<std::uint64_t, std::pair<std::uint64_t, std::uint32_t>> & in_use() const
  {
    return in_use_;
  }

private:
  std::uint64_t max_free_;
  std::vector<FreeBlock> free_;
  std::map<std::uint64_t, std::pair<std::uint64_t, std::uint32_t>> in_use_;
  std::uint64_t next_id_ = 1;
  std::uint64_t next_freed_ = 1;
};

struct TraceResult
{
  bool ok = true;
  std::string failure;
  std::uint64_t operations = 0;
  std::uint64_t created = 0;
  std::uint64_t evicted = 0;
  std::uint64_t reused = 0;
};

/// Replays a random interleaved acquire/release trace against both the real
/// pool and the reference allocator, comparing every decision.
inline TraceResult replay_random_trace(
  std::uint64_t seed, int operations, std::uint64_t max_size, std::uint64_t cap)
{
  std::mt19937_64 rng(seed);
  auto factory = std::make_shared<miniflow::HeapShmFactory>();
  miniflow::Pool pool({cap, factory, "oracle"});
  ReferenceAllocator ref(cap);
  // Outstanding receiver references, one entry per grant.
  std::vector<std::uint64_t> outstanding;
  // Sizes repeat often in practice; draw from a small palette half the time.
  std::vector<std::uint64_t> palette;
  for (int i = 0; i < 8; ++i) {
    palette.push_back(1 + rng() % max_size);
  }

  TraceResult result;
  auto mismatch = [&](const std::string & what) {
      result.ok = false;
      result.failure = "seed " + std::to_string(seed) + " op " +
        std::to_string(result.operations) + ": " + what;
      return result;
    };

  for (int op = 0; op < operations; ++op) {
    result.operations = static_cast<std::uint64_t>(op);
    const bool do_acquire = outstanding.empty() || rng() % 100 < 48;
    if (do_acquire) {
      const std::uint64_t size = rng() % 2 ? palette[rng() % palette.size()] : 1 + rng() % max_size;
      const auto receivers = static_cast<std::uint32_t>(1 + rng() % 3);
      const auto created_before = pool.stats().created_total;
      const auto lease = pool.acquire(size, receivers);
      const bool created = pool.stats().created_total != created_before;
      const auto expected = ref.acquire(size, receivers);
      if (lease.block.id != expected.id || created != expected.created) {
        return mismatch(
          "acquire(" + std::to_string(size) + ") chose " + std::to_string(lease.block.id) +
          " expected " + std::to_string(expected.id));
      }
      if (lease.region.size() != size || lease.block.capacity < size) {
        return mismatch("lease region size");
      }
      ++(created ? result.created : result.reused);
      for (std::uint32_t r = 0; r < receivers; ++r) {
        outstanding.push_back(lease.block.id);
      }
    } else {
      const auto pick = rng() % outstanding.size();
      const auto id = outstanding[pick];
      outstanding[pick] = outstanding.back();
      outstanding.pop_back();
      const auto outcome = pool.release(id);
      const auto expected = ref.release(id);
      using Kind = miniflow::ReclaimOutcome::Kind;
      if (!expected) {
        if (outcome.kind != Kind::StillReferenced) {
          return mismatch("release should leave block referenced");
        }
      } else {
        const auto kind = expected->empty() ? Kind::Reclaimed : Kind::ReclaimedAndEvicted;
        if (outcome.kind != kind || outcome.evicted != *expected) {
          return mismatch("release evictions differ");
        }
        result.evicted += expected->size();
      }
    }
    const auto stats = pool.stats();
    if (stats.free_bytes > cap) {
      return mismatch("cap exceeded");
    }
    if (stats.free_bytes != ref.free_bytes()) {
      return mismatch("free bytes differ");
    }
    if (stats.in_use_blocks != ref.in_use().size()) {
      return mismatch("in-use block count differs");
    }
    if (op % 64 == 0 && pool.free_queue() != ref.free_ids()) {
      return mismatch("free queue order differs");
    }
  }
  // No block with outstanding references may sit in the free queue.
  const auto queue = pool.free_queue();
  for (const auto id : outstanding) {
    if (std::find(queue.begin(), queue.end(), id) != queue.end()) {
      return mismatch("referenced block in free queue");
    }
  }
  result.operations = static_cast<std::uint64_t>(operations);
  return result;
}

}  // namespace pool_oracle

#endif  // POOL_ORACLE_HPP_
