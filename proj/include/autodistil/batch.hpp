#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace autodistil {

using TokenId = std::int32_t;

/// Reserved token ids shared by every vocabulary.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kMaskId = 1;
inline constexpr TokenId kClsId = 2;

/// Fixed-length sequences stored row-major as batch x seq.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<TokenId> ids;

  std::span<const TokenId> row(std::size_t b) const { return {ids.data() + b * seq, seq}; }
  friend bool operator==(const TokenBatch&, const TokenBatch&) = default;
};

}  // namespace autodistil
