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

#include <cstring>
#include <thread>

#include "doctest.h"
#include "miniflow/shm_pool.hpp"
#include "pool_oracle.hpp"
#include "test_util.hpp"

using miniflow::Errc;
using miniflow::HeapShmFactory;
using miniflow::Pool;
using Kind = miniflow::ReclaimOutcome::Kind;

namespace
{

Pool make_pool(std::uint64_t cap = 256ull << 20)
{
  return Pool({cap, std::make_shared<HeapShmFactory>(), "t"});
}

// Builds a free queue of the given capacities; returns their ids in order.
std::vector<std::uint64_t> seed_free_queue(Pool & pool, std::vector<std::uint64_t> caps)
{
  std::vector<std::uint64_t> ids;
  for (const auto cap : caps) {
    ids.push_back(pool.acquire(cap, 1).block.id);
  }
  for (const auto id : ids) {
    pool.release(id);
  }
  return ids;
}

}  // namespace

TEST_CASE("acquire on an empty pool creates an exact-size block") {
  auto pool = make_pool();
  const auto lease = pool.acquire(1024, 1);
  CHECK(lease.block.capacity == 1024);
  CHECK(lease.region.size() == 1024);
  CHECK(lease.block.os_name == "miniflow-t-" + std::to_string(lease.block.id));
  CHECK(pool.refcount(lease.block.id) == 1u);
}

TEST_CASE("acquire picks the smallest fitting block") {
  auto pool = make_pool();
  // freed_seq 1 -> 4096, freed_seq 2 -> 2048
  const auto ids = seed_free_queue(pool, {4096, 2048});
  const auto lease = pool.acquire(1500, 2);
  CHECK(lease.block.id == ids[1]);
  CHECK(lease.block.capacity == 2048);
  CHECK(lease.region.size() == 1500);
  CHECK(pool.refcount(ids[1]) == 2u);
  CHECK(pool.stats().created_total == 2);
}

TEST_CASE("equal capacities: the oldest freed block wins") {
  auto pool = make_pool();
  const auto a = pool.acquire(2048, 1).block.id;
  const auto b = pool.acquire(2048, 1).block.id;
  pool.release(b);  // b freed first
  pool.release(a);
  CHECK(pool.free_queue() == std::vector{b, a});
  CHECK(pool.acquire(2000, 1).block.id == b);
}

TEST_CASE("release decrements, reclaims, and evicts") {
  SUBCASE("still referenced") {
    auto pool = make_pool();
    const auto id = pool.acquire(100, 3).block.id;
    const auto outcome = pool.release(id);
    CHECK(outcome.kind == Kind::StillReferenced);
    CHECK(outcome.remaining_refcount == 2);
    CHECK(pool.refcount(id) == 2u);
  }
  SUBCASE("reclaimed to the queue tail") {
    auto pool = make_pool();
    const auto old_ids = seed_free_queue(pool, {10, 20});
    const auto id = pool.acquire(500, 1).block.id;
    CHECK(pool.release(id).kind == Kind::Reclaimed);
    CHECK(pool.free_queue() == std::vector{old_ids[0], old_ids[1], id});
  }
  SUBCASE("cap exceeded evicts the oldest") {
    auto pool = make_pool(4096);
    const auto id = pool.acquire(1024, 1).block.id;
    const auto old_id = seed_free_queue(pool, {4096})[0];
    const auto outcome = pool.release(id);
    CHECK(outcome.kind == Kind::ReclaimedAndEvicted);
    CHECK(outcome.evicted == std::vector{old_id});
    CHECK(pool.free_queue() == std::vector{id});
    CHECK(pool.stats().evicted_total == 1);
  }
}

TEST_CASE("release errors") {
  auto pool = make_pool();
  CHECK_ERRC(pool.release(77), Errc::UnknownBlock);
  const auto id = pool.acquire(8, 1).block.id;
  pool.release(id);
  CHECK_ERRC(pool.release(id), Errc::NotInUse);
  CHECK_ERRC(pool.acquire(0, 1), Errc::InvalidArgument);
  CHECK_ERRC(pool.acquire(1, 0), Errc::InvalidArgument);
}

TEST_CASE("OS refusal surfaces as OsAllocationFailed") {
  auto factory = std::make_shared<HeapShmFactory>();
  Pool pool({1 << 20, factory, "t"});
  factory->refuse_allocations(true);
  CHECK_ERRC(pool.acquire(64, 1), Errc::OsAllocationFailed);
  CHECK(pool.stats() == miniflow::PoolStats{});
}

TEST_CASE("stats follow the operation history") {
  auto pool = make_pool(4096);
  CHECK(pool.stats() == miniflow::PoolStats{});
  const auto a = pool.acquire(100, 1).block.id;
  auto s = pool.stats();
  CHECK(s.in_use_blocks == 1);
  CHECK(s.in_use_bytes == 100);
  CHECK(s.created_total == 1);
  pool.release(a);
  s = pool.stats();
  CHECK(s.free_blocks == 1);
  CHECK(s.free_bytes == 100);
  CHECK(s.in_use_blocks == 0);
}

TEST_CASE("steady-state reuse creates exactly one block") {
  auto factory = std::make_shared<HeapShmFactory>();
  Pool pool({256ull << 20, factory, "t"});
  constexpr std::uint64_t kSize = 640 * 480 * 3;
  for (int i = 0; i < 1000; ++i) {
    auto lease = pool.acquire(kSize, 1);
    std::memset(lease.region.data(), i & 0xFF, 64);
    pool.release(lease.block.id);
  }
  CHECK(pool.stats().created_total == 1);
  CHECK(factory->live_objects() == 1);
}

TEST_CASE("cap is never exceeded and in-use blocks survive eviction") {
  auto factory = std::make_shared<HeapShmFactory>();
  Pool pool({1000, factory, "t"});
  const auto held = pool.acquire(5000, 1).block.id;
  const auto a = pool.acquire(600, 1).block.id;
  const auto b = pool.acquire(600, 1).block.id;
  pool.release(a);
  CHECK(pool.stats().free_bytes == 600);
  const auto outcome = pool.release(b);
  CHECK(outcome.evicted == std::vector{a});
  CHECK(pool.stats().free_bytes == 600);
  CHECK(pool.refcount(held) == 1u);
  // Releasing a block larger than the cap empties the queue, itself included.
  const auto big = pool.release(held);
  CHECK(big.evicted == std::vector{b, held});
  CHECK(factory->live_objects() == 0);
}

TEST_CASE("oracle equivalence on randomized traces") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto result = pool_oracle::replay_random_trace(seed, 10000, 8ull << 20, 24ull << 20);
    INFO(result.failure);
    CHECK(result.ok);
    CHECK(result.created > 0);
    CHECK(result.reused > 0);
    CHECK(result.evicted > 0);
  }
  // A tight cap exercises eviction on nearly every reclaim.
  const auto tight = pool_oracle::replay_random_trace(42, 10000, 4096, 16384);
  INFO(tight.failure);
  CHECK(tight.ok);
}

TEST_CASE("concurrent acquire/release keeps accounting consistent") {
  auto pool = make_pool(1 << 20);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&pool, t] {
        for (int i = 0; i < 2000; ++i) {
          const auto id = pool.acquire(static_cast<std::uint64_t>(64 * (1 + (i + t) % 5)), 2).block.id;
          pool.release(id);
          pool.release(id);
        }
      });
  }
  for (auto & th : threads) {
    th.join();
  }
  const auto s = pool.stats();
  CHECK(s.in_use_blocks == 0);
  CHECK(s.in_use_bytes == 0);
  CHECK(s.free_bytes <= (1u << 20));
}

TEST_CASE("POSIX objects are attachable by name") {
  Pool pool({1 << 20, miniflow::posix_shm_factory(), "ut" + std::to_string(::getpid())});
  auto lease = pool.acquire(4096, 2);
  for (std::size_t i = 0; i < lease.region.size(); ++i) {
    lease.region[i] = static_cast<std::byte>(i * 7);
  }
  auto first = miniflow::ShmView::attach(lease.block.os_name, 4096);
  auto second = miniflow::ShmView::attach(lease.block.os_name, 4096);
  CHECK(std::memcmp(first.bytes().data(), lease.region.data(), 4096) == 0);
  CHECK(std::memcmp(first.bytes().data(), second.bytes().data(), 4096) == 0);
  CHECK_ERRC(miniflow::ShmView::attach(lease.block.os_name, 8192), Errc::SizeMismatch);
  CHECK_ERRC(miniflow::ShmView::attach("miniflow-none-0", 1), Errc::NoSuchObject);

  // Eviction unlinks the OS object.
  const auto name = lease.block.os_name;
  miniflow::Pool tiny({0, miniflow::posix_shm_factory(), "ut0" + std::to_string(::getpid())});
  const auto gone = tiny.acquire(64, 1);
  const auto gone_name = gone.block.os_name;
  CHECK(tiny.release(gone.block.id).evicted.size() == 1);
  CHECK_ERRC(miniflow::ShmView::attach(gone_name, 1), Errc::NoSuchObject);
}
