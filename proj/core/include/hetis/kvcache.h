#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "hetis/cluster.h"
#include "hetis/dispatcher.h"

namespace hetis {

// Head-granularity block ledger of one device slot. A block holds
// `block_size` tokens of one KV head group (K and V) across the slot's layers.
class BlockLedger {
 public:
  struct Reservation {
    bool ok = true;
    std::int64_t shortfall_blocks = 0;
  };

  BlockLedger() = default;
  BlockLedger(DeviceId device, std::int64_t total_blocks, int block_size = 16);

  // Blocks that fit in `bytes` when one block stores block_size tokens of one
  // head group over `layers` layers.
  static std::int64_t blocks_for_bytes(std::int64_t bytes, const ModelSpec& model, int layers,
                                       int block_size);

  static std::int64_t blocks_for_tokens(std::int64_t tokens, int block_size) {
    return (tokens + block_size - 1) / block_size;
  }

  // ceil(tokens / block_size) blocks per group, all or nothing.
  Reservation reserve(RequestId request, std::span<const int> groups, std::int64_t tokens);

  // One more token for every resident group of `request`; a group crosses a
  // block boundary at most once. All or nothing.
  Reservation append_token(RequestId request);

  // Releases every block of `request`; returns the number freed.
  std::int64_t free(RequestId request);

  // Destination side of a migration: same semantics as reserve.
  Reservation migrate_in(RequestId request, std::span<const int> groups, std::int64_t tokens);
  // Source side: releases the listed groups. Call only after the destination
  // accepted them.
  std::int64_t migrate_out(RequestId request, std::span<const int> groups);

  DeviceId device() const { return device_; }
  int block_size() const { return block_size_; }
  std::int64_t total_blocks() const { return total_blocks_; }
  std::int64_t free_blocks() const { return free_blocks_; }
  std::int64_t used_blocks() const { return total_blocks_ - free_blocks_; }

  bool resident(RequestId request) const;
  std::vector<int> groups_of(RequestId request) const;
  std::int64_t blocks_of(RequestId request) const;
  // Tokens stored for one group; 0 when the group is not resident.
  std::int64_t tokens(RequestId request, int group) const;
  std::size_t resident_groups() const { return tables_.size(); }

  // Dispatcher budget in cache units for a device whose current load is
  // `g_units`: the load plus what the free blocks can still hold.
  std::int64_t budget_units(std::int64_t g_units) const {
    return g_units + 2 * static_cast<std::int64_t>(block_size_) * free_blocks_;
  }

  // free + allocated == total.
  bool conserved() const;

 private:
  struct Table {
    std::int64_t tokens = 0;
    std::int64_t blocks = 0;
  };

  DeviceId device_ = 0;
  int block_size_ = 16;
  std::int64_t total_blocks_ = 0;
  std::int64_t free_blocks_ = 0;
  std::map<std::pair<RequestId, int>, Table> tables_;
};

// Moves `groups` of `request` from `src` to `dst`: reserves on the
// destination first and frees the source only when that succeeds.
BlockLedger::Reservation migrate(BlockLedger& src, BlockLedger& dst, RequestId request,
                                 std::span<const int> groups, std::int64_t tokens);

}  // namespace hetis
