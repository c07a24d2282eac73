#pragma once

// Position -> observation planes, and move <-> action index.
//
// Observations are mover-relative: when Black is to move the board is rotated
// 180 degrees so the mover always plays toward rank 9. Layout is cell-major,
// value(rank, file, plane) = data[(rank * 9 + file) * planes + plane].

#include <algorithm>
#include <bitset>
#include <cstdint>
#include <cstring>
#include <ostream>
#include <string>
#include <vector>

#include "xq/rules.hpp"

namespace xq {

inline constexpr int kActions = kSquares * kSquares;  // 8100
inline constexpr int kBoardPlanes = 2 * kNumKinds;   // mover kinds, then opponent kinds
inline constexpr int kMaxPieces = 16;

enum class FeatureVariant { BoardOnly, BoardAlly, BoardAllyEnemy };

constexpr int plane_count(FeatureVariant v) {
  switch (v) {
    case FeatureVariant::BoardOnly: return 14;
    case FeatureVariant::BoardAlly: return 21;
    case FeatureVariant::BoardAllyEnemy: return 28;
  }
  return 0;
}

struct Observation {
  int planes = 0;
  std::vector<float> data;  // kSquares * planes

  float at(int rank, int file, int plane) const { return data[(rank * kFiles + file) * planes + plane]; }
  float& at(int rank, int file, int plane) { return data[(rank * kFiles + file) * planes + plane]; }
};

// Cell of `s` in the mover-relative frame.
constexpr int oriented(Square s, Side mover) { return mover == Side::Red ? s.flat() : kSquares - 1 - s.flat(); }

inline Observation encode(const Position& p, FeatureVariant v) {
  Observation obs;
  obs.planes = plane_count(v);
  obs.data.assign(static_cast<std::size_t>(kSquares * obs.planes), 0.0f);
  const Board& b = p.board;
  const Side us = b.side_to_move();
  for (int i = 0; i < kSquares; ++i) {
    const auto c = b.code(i);
    if (c == 0) continue;
    const int cell = oriented(Square::from_flat(i), us);
    const int plane = static_cast<int>(detail::kind_of(c)) + (detail::side_of(c) == us ? 0 : kNumKinds);
    obs.data[cell * obs.planes + plane] = 1.0f;
  }
  auto reach = [&](const Board& board, int base) {
    board.for_each_legal_move([&](Move m) {
      const int plane = base + static_cast<int>(detail::kind_of(board.code(m.from.flat())));
      obs.data[oriented(m.to, us) * obs.planes + plane] = 1.0f;
    });
  };
  if (v != FeatureVariant::BoardOnly) reach(b, kBoardPlanes);
  if (v == FeatureVariant::BoardAllyEnemy) {
    Board theirs = b;
    theirs.set_side_to_move(opponent(us));
    reach(theirs, kBoardPlanes + kNumKinds);
  }
  return obs;
}

// Header {H, W, P} as little-endian u32, then P planes, each H x W row-major,
// as little-endian f32.
inline void write_observation(std::ostream& out, const Observation& obs) {
  auto put32 = [&](std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
  };
  put32(kRanks);
  put32(kFiles);
  put32(static_cast<std::uint32_t>(obs.planes));
  for (int k = 0; k < obs.planes; ++k)
    for (int cell = 0; cell < kSquares; ++cell) {
      std::uint32_t bits;
      const float v = obs.data[cell * obs.planes + k];
      std::memcpy(&bits, &v, 4);
      put32(bits);
    }
}

inline int move_to_index(Move m) { return m.from.flat() * kSquares + m.to.flat(); }

inline Move index_to_move(int i) {
  if (i < 0 || i >= kActions) throw RangeError("action index " + std::to_string(i) + " outside [0, 8100)");
  return Move{Square::from_flat(i / kSquares), Square::from_flat(i % kSquares)};
}

// Action index in the mover-relative frame (an involution for Black).
inline int oriented_index(int i, Side mover) {
  if (mover == Side::Red) return i;
  return (kSquares - 1 - i / kSquares) * kSquares + (kSquares - 1 - i % kSquares);
}

using LegalityMask = std::bitset<kActions>;

inline LegalityMask legality_mask(const Position& p) {
  LegalityMask mask;
  p.board.for_each_legal_move([&](Move m) { mask.set(static_cast<std::size_t>(move_to_index(m))); });
  return mask;
}

// Mask in the observation frame, i.e. the frame of the network's outputs.
inline LegalityMask oriented_mask(const Position& p) {
  LegalityMask mask;
  const Side us = p.side_to_move();
  p.board.for_each_legal_move(
      [&](Move m) { mask.set(static_cast<std::size_t>(oriented_index(move_to_index(m), us))); });
  return mask;
}

struct FactorizedAction {
  int piece_slot = 0;
  Square destination;
  friend bool operator==(const FactorizedAction&, const FactorizedAction&) = default;
};

// The mover's pieces in ascending flat-index order.
inline std::vector<Square> piece_slots(const Position& p) {
  std::vector<Square> out;
  for (int i = 0; i < kSquares; ++i) {
    const auto c = p.board.code(i);
    if (c != 0 && detail::side_of(c) == p.side_to_move()) out.push_back(Square::from_flat(i));
  }
  return out;
}

inline FactorizedAction factorize(Move m, const Position& p) {
  if (!is_legal(p, m)) throw IllegalMove("cannot factorize illegal move " + to_iccs(m));
  const auto slots = piece_slots(p);
  const auto it = std::find(slots.begin(), slots.end(), m.from);
  return FactorizedAction{static_cast<int>(it - slots.begin()), m.to};
}

inline Move defactorize(const FactorizedAction& a, const Position& p) {
  const auto slots = piece_slots(p);
  if (a.piece_slot < 0 || a.piece_slot >= static_cast<int>(slots.size()))
    throw IllegalMove("piece slot " + std::to_string(a.piece_slot) + " is empty");
  const Move m{slots[a.piece_slot], a.destination};
  if (!is_legal(p, m)) throw IllegalMove("defactorized move " + to_iccs(m) + " is illegal");
  return m;
}

}  // namespace xq
