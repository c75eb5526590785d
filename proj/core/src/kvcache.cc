#include "hetis/kvcache.h"

#include <algorithm>
#include <limits>
#include <string>

#include "hetis/errors.h"

namespace hetis {

BlockLedger::BlockLedger(DeviceId device, std::int64_t total_blocks, int block_size)
    : device_(device), block_size_(block_size), total_blocks_(total_blocks),
      free_blocks_(total_blocks) {
  if (block_size < 1) throw InvalidArgument("block_size must be >= 1");
  if (total_blocks < 0) throw InvalidArgument("total_blocks must be >= 0");
}

std::int64_t BlockLedger::blocks_for_bytes(std::int64_t bytes, const ModelSpec& model, int layers,
                                           int block_size) {
  if (layers < 1 || block_size < 1) throw InvalidArgument("blocks_for_bytes: bad geometry");
  const std::int64_t per_block =
      2 * model.kv_bytes_per_head_token * static_cast<std::int64_t>(block_size) * layers;
  return std::max<std::int64_t>(0, bytes) / per_block;
}

BlockLedger::Reservation BlockLedger::reserve(RequestId request, std::span<const int> groups,
                                              std::int64_t tokens) {
  if (tokens < 0) throw InvalidArgument("reserve: negative token count");
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (tables_.count({request, groups[k]}) != 0) {
      throw InvalidArgument("reserve: group " + std::to_string(groups[k]) + " of request " +
                            std::to_string(request) + " already resident");
    }
    for (std::size_t q = 0; q < k; ++q) {
      if (groups[q] == groups[k]) throw InvalidArgument("reserve: duplicate group");
    }
  }
  const std::int64_t per_group = blocks_for_tokens(tokens, block_size_);
  const std::int64_t need = per_group * static_cast<std::int64_t>(groups.size());
  if (need > free_blocks_) return {false, need - free_blocks_};
  for (int g : groups) tables_[{request, g}] = Table{tokens, per_group};
  free_blocks_ -= need;
  return {};
}

BlockLedger::Reservation BlockLedger::append_token(RequestId request) {
  auto lo = tables_.lower_bound({request, std::numeric_limits<int>::min()});
  std::int64_t need = 0;
  for (auto it = lo; it != tables_.end() && it->first.first == request; ++it) {
    if (it->second.tokens + 1 > it->second.blocks * block_size_) ++need;
  }
  if (need > free_blocks_) return {false, need - free_blocks_};
  for (auto it = lo; it != tables_.end() && it->first.first == request; ++it) {
    Table& t = it->second;
    ++t.tokens;
    if (t.tokens > t.blocks * block_size_) ++t.blocks;
  }
  free_blocks_ -= need;
  return {};
}

std::int64_t BlockLedger::free(RequestId request) {
  auto it = tables_.lower_bound({request, std::numeric_limits<int>::min()});
  std::int64_t released = 0;
  while (it != tables_.end() && it->first.first == request) {
    released += it->second.blocks;
    it = tables_.erase(it);
  }
  free_blocks_ += released;
  return released;
}

BlockLedger::Reservation BlockLedger::migrate_in(RequestId request, std::span<const int> groups,
                                                 std::int64_t tokens) {
  return reserve(request, groups, tokens);
}

std::int64_t BlockLedger::migrate_out(RequestId request, std::span<const int> groups) {
  std::int64_t released = 0;
  for (int g : groups) {
    auto it = tables_.find({request, g});
    if (it == tables_.end()) {
      throw InternalError("migrate_out: group " + std::to_string(g) + " of request " +
                          std::to_string(request) + " is not on device " +
                          std::to_string(device_));
    }
    released += it->second.blocks;
    tables_.erase(it);
  }
  free_blocks_ += released;
  return released;
}

bool BlockLedger::resident(RequestId request) const {
  auto it = tables_.lower_bound({request, std::numeric_limits<int>::min()});
  return it != tables_.end() && it->first.first == request;
}

std::vector<int> BlockLedger::groups_of(RequestId request) const {
  std::vector<int> out;
  for (auto it = tables_.lower_bound({request, std::numeric_limits<int>::min()});
       it != tables_.end() && it->first.first == request; ++it) {
    out.push_back(it->first.second);
  }
  return out;
}

std::int64_t BlockLedger::blocks_of(RequestId request) const {
  std::int64_t sum = 0;
  for (auto it = tables_.lower_bound({request, std::numeric_limits<int>::min()});
       it != tables_.end() && it->first.first == request; ++it) {
    sum += it->second.blocks;
  }
  return sum;
}

std::int64_t BlockLedger::tokens(RequestId request, int group) const {
  auto it = tables_.find({request, group});
  return it == tables_.end() ? 0 : it->second.tokens;
}

bool BlockLedger::conserved() const {
  std::int64_t used = 0;
  for (const auto& [key, t] : tables_) used += t.blocks;
  return free_blocks_ >= 0 && free_blocks_ + used == total_blocks_;
}

BlockLedger::Reservation migrate(BlockLedger& src, BlockLedger& dst, RequestId request,
                                 std::span<const int> groups, std::int64_t tokens) {
  if (&src == &dst) throw InvalidArgument("migrate: source and destination are the same ledger");
  BlockLedger::Reservation res = dst.migrate_in(request, groups, tokens);
  if (res.ok) src.migrate_out(request, groups);
  return res;
}

}  // namespace hetis
