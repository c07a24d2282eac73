#pragma once

// Brute-force reference implementations used only by the tests. Nothing in
// here shares code with the engine's move generator or search.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <random>
#include <vector>

#include "xq/rules.hpp"

namespace xq::oracle {

struct Cell {
  bool occupied = false;
  Side side = Side::Red;
  PieceKind kind = PieceKind::General;
};

using Grid = std::array<Cell, 90>;

inline Grid grid_of(const Board& b) {
  Grid g{};
  for (int i = 0; i < 90; ++i) {
    if (auto p = b.at(Square::from_flat(i))) g[i] = Cell{true, p->side, p->kind};
  }
  return g;
}

inline int count_between(const Grid& g, int a, int b) {
  const int fa = a % 9, ra = a / 9, fb = b % 9, rb = b / 9;
  int n = 0;
  if (fa == fb) {
    for (int r = std::min(ra, rb) + 1; r < std::max(ra, rb); ++r) n += g[r * 9 + fa].occupied;
  } else {
    for (int f = std::min(fa, fb) + 1; f < std::max(fa, fb); ++f) n += g[ra * 9 + f].occupied;
  }
  return n;
}

inline bool palace(Side s, int f, int r) { return f >= 3 && f <= 5 && (s == Side::Red ? r <= 2 : r >= 7); }

// Geometric move predicate: could the piece on `from` move to `to`, ignoring
// the safety of its own General?
inline bool can_move(const Grid& g, int from, int to) {
  if (from == to || !g[from].occupied) return false;
  const Cell& c = g[from];
  if (g[to].occupied && g[to].side == c.side) return false;
  const int df = to % 9 - from % 9;
  const int dr = to / 9 - from / 9;
  const int adf = std::abs(df), adr = std::abs(dr);
  const int tf = to % 9, tr = to / 9;
  switch (c.kind) {
    case PieceKind::General: return adf + adr == 1 && palace(c.side, tf, tr);
    case PieceKind::Advisor: return adf == 1 && adr == 1 && palace(c.side, tf, tr);
    case PieceKind::Elephant: {
      if (adf != 2 || adr != 2) return false;
      if (c.side == Side::Red ? tr > 4 : tr < 5) return false;
      return !g[from + (dr / 2) * 9 + df / 2].occupied;
    }
    case PieceKind::Horse: {
      if (!((adf == 1 && adr == 2) || (adf == 2 && adr == 1))) return false;
      const int leg = adr == 2 ? from + (dr / 2) * 9 : from + df / 2;
      return !g[leg].occupied;
    }
    case PieceKind::Chariot:
      if (df != 0 && dr != 0) return false;
      return count_between(g, from, to) == 0;
    case PieceKind::Cannon:
      if (df != 0 && dr != 0) return false;
      return count_between(g, from, to) == (g[to].occupied ? 1 : 0);
    case PieceKind::Soldier: {
      const int fwd = c.side == Side::Red ? 1 : -1;
      if (df == 0 && dr == fwd) return true;
      const bool crossed = c.side == Side::Red ? from / 9 >= 5 : from / 9 <= 4;
      return crossed && dr == 0 && adf == 1;
    }
  }
  return false;
}

inline int find_general(const Grid& g, Side s) {
  for (int i = 0; i < 90; ++i)
    if (g[i].occupied && g[i].side == s && g[i].kind == PieceKind::General) return i;
  return -1;
}

inline bool generals_face(const Grid& g) {
  const int a = find_general(g, Side::Red);
  const int b = find_general(g, Side::Black);
  return a >= 0 && b >= 0 && a % 9 == b % 9 && count_between(g, a, b) == 0;
}

inline bool attacked_by(const Grid& g, int target, Side by) {
  for (int i = 0; i < 90; ++i)
    if (g[i].occupied && g[i].side == by && can_move(g, i, target)) return true;
  return false;
}

inline std::vector<Move> legal_moves(const Board& b) {
  const Grid g = grid_of(b);
  const Side s = b.side_to_move();
  std::vector<Move> out;
  for (int from = 0; from < 90; ++from) {
    if (!g[from].occupied || g[from].side != s) continue;
    for (int to = 0; to < 90; ++to) {
      if (!can_move(g, from, to)) continue;
      Grid next = g;
      next[to] = next[from];
      next[from] = Cell{};
      const int king = find_general(next, s);
      if (generals_face(next)) continue;
      if (king >= 0 && attacked_by(next, king, opponent(s))) continue;
      out.push_back(Move{Square::from_flat(from), Square::from_flat(to)});
    }
  }
  return out;
}

inline Board play(const Board& b, Move m) {
  Board next;
  for (int i = 0; i < 90; ++i) next.set(Square::from_flat(i), b.at(Square::from_flat(i)));
  next.set(m.to, b.at(m.from));
  next.set(m.from, std::nullopt);
  next.set_side_to_move(opponent(b.side_to_move()));
  return next;
}

inline std::uint64_t perft(const Board& b, int depth) {
  if (depth == 0) return 1;
  const auto moves = legal_moves(b);
  if (depth == 1) return moves.size();
  std::uint64_t n = 0;
  for (Move m : moves) n += perft(play(b, m), depth - 1);
  return n;
}

// Random playout from the initial position; returns positions along the way.
inline std::vector<Position> random_positions(std::size_t count, std::uint64_t seed, int max_plies = 80) {
  std::mt19937_64 rng(seed);
  std::vector<Position> out;
  while (out.size() < count) {
    Position p = Position::initial();
    std::uniform_int_distribution<int> len(0, max_plies);
    const int n = len(rng);
    for (int i = 0; i < n; ++i) {
      const auto moves = legal_moves(p);
      if (moves.empty()) break;
      std::uniform_int_distribution<std::size_t> pick(0, moves.size() - 1);
      p = apply_move(p, moves[pick(rng)]);
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace xq::oracle
