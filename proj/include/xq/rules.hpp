#pragma once

// Xiangqi rules: board state, legal move generation, check and terminal
// detection, perft, Zobrist hashing and FEN I/O.
//
// Coordinates: file 0..8 (ICCS a..i, Red's left to right), rank 0..9 with
// rank 0 being Red's back rank. Flat index = rank * 9 + file.

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xq/errors.hpp"

namespace xq {

inline constexpr int kFiles = 9;
inline constexpr int kRanks = 10;
inline constexpr int kSquares = 90;
inline constexpr int kNumKinds = 7;
inline constexpr int kDefaultDrawMoveCap = 400;

enum class Side : std::uint8_t { Red = 0, Black = 1 };

constexpr Side opponent(Side s) { return s == Side::Red ? Side::Black : Side::Red; }

enum class PieceKind : std::uint8_t { General, Advisor, Elephant, Horse, Chariot, Cannon, Soldier };

enum class Outcome : std::uint8_t { RedWins, BlackWins, Draw };

constexpr Outcome win_for(Side s) { return s == Side::Red ? Outcome::RedWins : Outcome::BlackWins; }

// +1 win, 0 draw, -1 loss from `s`'s point of view.
constexpr int result_for(Outcome o, Side s) {
  if (o == Outcome::Draw) return 0;
  return o == win_for(s) ? 1 : -1;
}

struct Piece {
  Side side;
  PieceKind kind;
  friend constexpr bool operator==(Piece, Piece) = default;
};

class Square {
 public:
  constexpr Square() = default;
  constexpr Square(int file, int rank) : idx_(static_cast<std::uint8_t>(rank * kFiles + file)) {}
  static constexpr Square from_flat(int flat) {
    Square s;
    s.idx_ = static_cast<std::uint8_t>(flat);
    return s;
  }
  static constexpr bool on_board(int file, int rank) {
    return file >= 0 && file < kFiles && rank >= 0 && rank < kRanks;
  }
  constexpr int flat() const { return idx_; }
  constexpr int file() const { return idx_ % kFiles; }
  constexpr int rank() const { return idx_ / kFiles; }
  // Same square seen from the other side of the board.
  constexpr Square rotated() const { return from_flat(kSquares - 1 - idx_); }
  friend constexpr auto operator<=>(Square, Square) = default;

 private:
  std::uint8_t idx_ = 0;
};

struct Move {
  Square from;
  Square to;
  friend constexpr auto operator<=>(const Move&, const Move&) = default;
};

// ICCS coordinates, e.g. "h2e2".
inline std::string to_iccs(Move m) {
  std::string s(4, ' ');
  s[0] = static_cast<char>('a' + m.from.file());
  s[1] = static_cast<char>('0' + m.from.rank());
  s[2] = static_cast<char>('a' + m.to.file());
  s[3] = static_cast<char>('0' + m.to.rank());
  return s;
}

inline std::optional<Move> parse_iccs(std::string_view s) {
  if (s.size() != 4) return std::nullopt;
  auto coord = [](char f, char r) -> std::optional<Square> {
    if (f >= 'A' && f <= 'I') f = static_cast<char>(f - 'A' + 'a');
    if (f < 'a' || f > 'i' || r < '0' || r > '9') return std::nullopt;
    return Square(f - 'a', r - '0');
  };
  auto from = coord(s[0], s[1]);
  auto to = coord(s[2], s[3]);
  if (!from || !to || *from == *to) return std::nullopt;
  return Move{*from, *to};
}

namespace detail {

// Cell code: 0 empty, otherwise 1 + kind + 7 * side.
constexpr std::uint8_t code_of(Piece p) {
  return static_cast<std::uint8_t>(1 + static_cast<int>(p.kind) + kNumKinds * static_cast<int>(p.side));
}
constexpr Side side_of(std::uint8_t c) { return c > kNumKinds ? Side::Black : Side::Red; }
constexpr PieceKind kind_of(std::uint8_t c) { return static_cast<PieceKind>((c - 1) % kNumKinds); }
constexpr std::uint8_t code_of(Side s, PieceKind k) { return code_of(Piece{s, k}); }

constexpr std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct ZobristTable {
  std::array<std::array<std::uint64_t, 15>, kSquares> piece{};
  std::uint64_t black_to_move = 0;
};

constexpr ZobristTable make_zobrist() {
  ZobristTable t;
  std::uint64_t state = 0x58514E47'5A4F4252ull;
  for (auto& sq : t.piece) {
    sq[0] = 0;
    for (int c = 1; c < 15; ++c) sq[c] = splitmix64(state);
  }
  t.black_to_move = splitmix64(state);
  return t;
}

inline constexpr ZobristTable kZobrist = make_zobrist();

constexpr bool in_palace(Side s, int file, int rank) {
  if (file < 3 || file > 5) return false;
  return s == Side::Red ? rank <= 2 : rank >= 7;
}
constexpr bool own_half(Side s, int rank) { return s == Side::Red ? rank <= 4 : rank >= 5; }
constexpr int forward(Side s) { return s == Side::Red ? 1 : -1; }

inline constexpr std::array<std::array<int, 2>, 4> kOrtho{{{1, 0}, {-1, 0}, {0, 1}, {0, -1}}};  // (df, dr)
inline constexpr std::array<std::array<int, 2>, 4> kDiag{{{1, 1}, {1, -1}, {-1, 1}, {-1, -1}}};
// Horse jumps (df, dr) with the leg offset relative to the horse.
struct HorseJump {
  int df, dr, leg_df, leg_dr;
};
inline constexpr std::array<HorseJump, 8> kHorse{{{1, 2, 0, 1},
                                                  {-1, 2, 0, 1},
                                                  {1, -2, 0, -1},
                                                  {-1, -2, 0, -1},
                                                  {2, 1, 1, 0},
                                                  {2, -1, 1, 0},
                                                  {-2, 1, -1, 0},
                                                  {-2, -1, -1, 0}}};

}  // namespace detail

// Board contents plus side to move. Cheap to copy (used by search and perft).
class Board {
 public:
  using Cells = std::array<std::uint8_t, kSquares>;

  Board() { cells_.fill(0); }

  static Board initial() { return from_fen("rnbakabnr/9/1c5c1/p1p1p1p1p/9/9/P1P1P1P1P/1C5C1/9/RNBAKABNR w"); }

  static Board from_fen(std::string_view fen);
  std::string to_fen() const;

  std::optional<Piece> at(Square s) const {
    const auto c = cells_[s.flat()];
    if (c == 0) return std::nullopt;
    return Piece{detail::side_of(c), detail::kind_of(c)};
  }
  void set(Square s, std::optional<Piece> p) {
    cells_[s.flat()] = p ? detail::code_of(*p) : 0;
    if (p && p->kind == PieceKind::General) general_[static_cast<int>(p->side)] = s.flat();
    refresh_generals();
  }
  const Cells& cells() const { return cells_; }
  std::uint8_t code(int flat) const { return cells_[flat]; }

  Side side_to_move() const { return side_; }
  void set_side_to_move(Side s) { side_ = s; }

  // Flat index of `s`'s General or -1 when absent.
  int general(Side s) const { return general_[static_cast<int>(s)]; }

  int piece_count() const {
    return static_cast<int>(std::count_if(cells_.begin(), cells_.end(), [](auto c) { return c != 0; }));
  }

  // True iff square `flat` is attacked by any piece of side `by`. Facing
  // Generals count as an attack by the General.
  bool attacked(int flat, Side by) const;

  bool in_check(Side s) const {
    const int g = general(s);
    return g >= 0 && attacked(g, opponent(s));
  }

  // Pseudo-legal moves of the side to move (ignores own-General safety).
  template <class F>
  void for_each_pseudo_move(Side s, F&& emit) const;

  // Moves `m` without legality checks; returns the captured cell code.
  std::uint8_t make(Move m) {
    const auto captured = cells_[m.to.flat()];
    const auto mover = cells_[m.from.flat()];
    cells_[m.to.flat()] = mover;
    cells_[m.from.flat()] = 0;
    if (captured != 0 && detail::kind_of(captured) == PieceKind::General)
      general_[static_cast<int>(detail::side_of(captured))] = -1;
    if (detail::kind_of(mover) == PieceKind::General) general_[static_cast<int>(detail::side_of(mover))] = m.to.flat();
    side_ = opponent(side_);
    return captured;
  }

  // True iff playing pseudo-legal `m` leaves the mover's General safe.
  bool leaves_general_safe(Move m) const {
    Board next = *this;
    next.make(m);
    return !next.in_check(side_);
  }

  template <class F>
  void for_each_legal_move(F&& emit) const {
    for_each_pseudo_move(side_, [&](Move m) {
      if (leaves_general_safe(m)) emit(m);
    });
  }

  std::vector<Move> legal_moves() const {
    std::vector<Move> out;
    out.reserve(64);
    for_each_legal_move([&](Move m) { out.push_back(m); });
    std::sort(out.begin(), out.end());
    return out;
  }

  std::uint64_t hash() const {
    std::uint64_t h = side_ == Side::Black ? detail::kZobrist.black_to_move : 0;
    for (int i = 0; i < kSquares; ++i) h ^= detail::kZobrist.piece[i][cells_[i]];
    return h;
  }

  friend bool operator==(const Board& a, const Board& b) { return a.cells_ == b.cells_ && a.side_ == b.side_; }

 private:
  void refresh_generals() {
    general_ = {-1, -1};
    for (int i = 0; i < kSquares; ++i) {
      const auto c = cells_[i];
      if (c != 0 && detail::kind_of(c) == PieceKind::General) general_[static_cast<int>(detail::side_of(c))] = i;
    }
  }

  Cells cells_{};
  Side side_ = Side::Red;
  std::array<int, 2> general_{-1, -1};
};

inline bool Board::attacked(int flat, Side by) const {
  using namespace detail;
  const int f0 = flat % kFiles;
  const int r0 = flat / kFiles;
  const auto chariot = code_of(by, PieceKind::Chariot);
  const auto cannon = code_of(by, PieceKind::Cannon);
  const auto general = code_of(by, PieceKind::General);
  for (const auto& d : kOrtho) {
    int f = f0 + d[0];
    int r = r0 + d[1];
    int seen = 0;
    while (Square::on_board(f, r)) {
      const auto c = cells_[r * kFiles + f];
      if (c != 0) {
        if (seen == 0) {
          if (c == chariot) return true;
          if (c == general && d[0] == 0) return true;
          seen = 1;
        } else {
          if (c == cannon) return true;
          break;
        }
      }
      f += d[0];
      r += d[1];
    }
  }
  const auto horse = code_of(by, PieceKind::Horse);
  for (const auto& j : kHorse) {
    const int hf = f0 - j.df;
    const int hr = r0 - j.dr;
    if (!Square::on_board(hf, hr) || cells_[hr * kFiles + hf] != horse) continue;
    if (cells_[(hr + j.leg_dr) * kFiles + hf + j.leg_df] == 0) return true;
  }
  const auto soldier = code_of(by, PieceKind::Soldier);
  const int back = r0 - forward(by);
  if (back >= 0 && back < kRanks && cells_[back * kFiles + f0] == soldier) return true;
  if (!own_half(by, r0)) {
    if (f0 > 0 && cells_[flat - 1] == soldier) return true;
    if (f0 < kFiles - 1 && cells_[flat + 1] == soldier) return true;
  }
  return false;
}

template <class F>
void Board::for_each_pseudo_move(Side s, F&& emit) const {
  using namespace detail;
  auto own = [&](std::uint8_t c) { return c != 0 && side_of(c) == s; };
  auto try_step = [&](int from, int f, int r) {
    if (!Square::on_board(f, r)) return;
    const int to = r * kFiles + f;
    if (!own(cells_[to])) emit(Move{Square::from_flat(from), Square::from_flat(to)});
  };
  for (int from = 0; from < kSquares; ++from) {
    const auto c = cells_[from];
    if (c == 0 || side_of(c) != s) continue;
    const int f0 = from % kFiles;
    const int r0 = from / kFiles;
    switch (kind_of(c)) {
      case PieceKind::General:
        for (const auto& d : kOrtho)
          if (in_palace(s, f0 + d[0], r0 + d[1])) try_step(from, f0 + d[0], r0 + d[1]);
        break;
      case PieceKind::Advisor:
        for (const auto& d : kDiag)
          if (in_palace(s, f0 + d[0], r0 + d[1])) try_step(from, f0 + d[0], r0 + d[1]);
        break;
      case PieceKind::Elephant:
        for (const auto& d : kDiag) {
          const int f = f0 + 2 * d[0];
          const int r = r0 + 2 * d[1];
          if (!Square::on_board(f, r) || !own_half(s, r)) continue;
          if (cells_[(r0 + d[1]) * kFiles + f0 + d[0]] != 0) continue;
          try_step(from, f, r);
        }
        break;
      case PieceKind::Horse:
        for (const auto& j : kHorse) {
          const int f = f0 + j.df;
          const int r = r0 + j.dr;
          if (!Square::on_board(f, r)) continue;
          if (cells_[(r0 + j.leg_dr) * kFiles + f0 + j.leg_df] != 0) continue;
          try_step(from, f, r);
        }
        break;
      case PieceKind::Chariot:
        for (const auto& d : kOrtho) {
          int f = f0 + d[0];
          int r = r0 + d[1];
          while (Square::on_board(f, r)) {
            const int to = r * kFiles + f;
            if (cells_[to] == 0) {
              emit(Move{Square::from_flat(from), Square::from_flat(to)});
            } else {
              if (!own(cells_[to])) emit(Move{Square::from_flat(from), Square::from_flat(to)});
              break;
            }
            f += d[0];
            r += d[1];
          }
        }
        break;
      case PieceKind::Cannon:
        for (const auto& d : kOrtho) {
          int f = f0 + d[0];
          int r = r0 + d[1];
          bool screened = false;
          while (Square::on_board(f, r)) {
            const int to = r * kFiles + f;
            const auto t = cells_[to];
            if (!screened) {
              if (t == 0)
                emit(Move{Square::from_flat(from), Square::from_flat(to)});
              else
                screened = true;
            } else if (t != 0) {
              if (!own(t)) emit(Move{Square::from_flat(from), Square::from_flat(to)});
              break;
            }
            f += d[0];
            r += d[1];
          }
        }
        break;
      case PieceKind::Soldier: {
        const int fwd = forward(s);
        try_step(from, f0, r0 + fwd);
        if (!own_half(s, r0)) {
          try_step(from, f0 - 1, r0);
          try_step(from, f0 + 1, r0);
        }
        break;
      }
    }
  }
}

namespace detail {

constexpr char fen_letter(Piece p) {
  constexpr char red[] = {'K', 'A', 'B', 'N', 'R', 'C', 'P'};
  const char c = red[static_cast<int>(p.kind)];
  return p.side == Side::Red ? c : static_cast<char>(c - 'A' + 'a');
}

inline std::optional<Piece> piece_from_letter(char ch) {
  const Side side = (ch >= 'a' && ch <= 'z') ? Side::Black : Side::Red;
  const char u = side == Side::Black ? static_cast<char>(ch - 'a' + 'A') : ch;
  switch (u) {
    case 'K': return Piece{side, PieceKind::General};
    case 'A': return Piece{side, PieceKind::Advisor};
    case 'B': case 'E': return Piece{side, PieceKind::Elephant};
    case 'N': case 'H': return Piece{side, PieceKind::Horse};
    case 'R': return Piece{side, PieceKind::Chariot};
    case 'C': return Piece{side, PieceKind::Cannon};
    case 'P': return Piece{side, PieceKind::Soldier};
    default: return std::nullopt;
  }
}

}  // namespace detail

inline Board Board::from_fen(std::string_view fen) {
  Board b;
  const auto space = fen.find(' ');
  const auto placement = fen.substr(0, space);
  int rank = kRanks - 1;
  int file = 0;
  for (char ch : placement) {
    if (ch == '/') {
      if (file != kFiles) throw FenError("rank " + std::to_string(rank) + " does not have 9 files");
      --rank;
      file = 0;
      if (rank < 0) throw FenError("too many ranks");
    } else if (ch >= '1' && ch <= '9') {
      file += ch - '0';
      if (file > kFiles) throw FenError("rank overflows 9 files");
    } else {
      const auto p = detail::piece_from_letter(ch);
      if (!p) throw FenError(std::string("bad piece letter '") + ch + "'");
      if (file >= kFiles) throw FenError("rank overflows 9 files");
      b.cells_[rank * kFiles + file] = detail::code_of(*p);
      ++file;
    }
  }
  if (rank != 0 || file != kFiles) throw FenError("expected 10 ranks of 9 files");
  b.side_ = Side::Red;
  if (space != std::string_view::npos) {
    auto rest = fen.substr(space + 1);
    while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
    if (!rest.empty()) {
      if (rest.front() == 'b' || rest.front() == 'B')
        b.side_ = Side::Black;
      else if (rest.front() != 'w' && rest.front() != 'W' && rest.front() != 'r' && rest.front() != 'R')
        throw FenError("bad side-to-move field");
    }
  }
  b.refresh_generals();
  std::array<std::array<int, kNumKinds>, 2> counts{};
  constexpr std::array<int, kNumKinds> kMax{1, 2, 2, 2, 2, 2, 5};
  for (int i = 0; i < kSquares; ++i) {
    const auto c = b.cells_[i];
    if (c == 0) continue;
    const Side s = detail::side_of(c);
    const PieceKind k = detail::kind_of(c);
    const int f = i % kFiles;
    const int r = i / kFiles;
    if (++counts[static_cast<int>(s)][static_cast<int>(k)] > kMax[static_cast<int>(k)])
      throw FenError("too many pieces of one kind");
    if ((k == PieceKind::General || k == PieceKind::Advisor) && !detail::in_palace(s, f, r))
      throw FenError("General/Advisor outside its palace");
    if (k == PieceKind::Elephant && !detail::own_half(s, r)) throw FenError("Elephant across the river");
  }
  return b;
}

inline std::string Board::to_fen() const {
  std::string out;
  for (int rank = kRanks - 1; rank >= 0; --rank) {
    int empty = 0;
    for (int file = 0; file < kFiles; ++file) {
      const auto p = at(Square(file, rank));
      if (!p) {
        ++empty;
        continue;
      }
      if (empty) out += static_cast<char>('0' + empty);
      empty = 0;
      out += detail::fen_letter(*p);
    }
    if (empty) out += static_cast<char>('0' + empty);
    if (rank > 0) out += '/';
  }
  out += side_ == Side::Red ? " w" : " b";
  return out;
}

inline constexpr std::string_view kStartFen = "rnbakabnr/9/1c5c1/p1p1p1p1p/9/9/P1P1P1P1P/1C5C1/9/RNBAKABNR w";

// Full game state: board, side to move, ply and the hashes seen since the
// last capture (the current hash is always the last element).
struct Position {
  Board board;
  int ply = 0;
  std::vector<std::uint64_t> history;

  Position() : Position(Board::initial()) {}
  explicit Position(Board b) : board(b), history{b.hash()} {}

  static Position initial() { return Position(Board::initial()); }
  static Position from_fen(std::string_view fen) { return Position(Board::from_fen(fen)); }
  std::string to_fen() const { return board.to_fen(); }

  Side side_to_move() const { return board.side_to_move(); }
  std::optional<Piece> at(Square s) const { return board.at(s); }
};

inline std::vector<Move> legal_moves(const Position& p) { return p.board.legal_moves(); }

inline bool is_legal(const Position& p, Move m) {
  const auto mover = p.board.at(m.from);
  if (!mover || mover->side != p.side_to_move()) return false;
  bool found = false;
  p.board.for_each_pseudo_move(p.side_to_move(), [&](Move x) { found = found || x == m; });
  return found && p.board.leaves_general_safe(m);
}

inline bool in_check(const Position& p, Side s) { return p.board.in_check(s); }

inline std::uint64_t hash(const Position& p) { return p.board.hash(); }

inline Position apply_move(const Position& p, Move m) {
  if (!is_legal(p, m)) throw IllegalMove("illegal move " + to_iccs(m) + " in " + p.to_fen());
  Position next = p;
  const auto captured = next.board.make(m);
  ++next.ply;
  const auto h = next.board.hash();
  if (captured != 0)
    next.history.assign(1, h);
  else
    next.history.push_back(h);
  return next;
}

inline int repetition_count(const Position& p) {
  const auto h = p.history.empty() ? p.board.hash() : p.history.back();
  return static_cast<int>(std::count(p.history.begin(), p.history.end(), h));
}

// A side with no legal move loses (checkmate and stalemate alike). Draws at
// the ply cap or on the third occurrence of the same (board, side) hash.
inline std::optional<Outcome> terminal(const Position& p, int draw_move_cap = kDefaultDrawMoveCap) {
  bool any = false;
  p.board.for_each_pseudo_move(p.side_to_move(), [&](Move m) { any = any || p.board.leaves_general_safe(m); });
  if (!any) return win_for(opponent(p.side_to_move()));
  if (p.ply >= draw_move_cap) return Outcome::Draw;
  if (repetition_count(p) >= 3) return Outcome::Draw;
  return std::nullopt;
}

namespace detail {

inline std::uint64_t perft_board(const Board& b, int depth) {
  if (depth == 0) return 1;
  std::uint64_t n = 0;
  if (depth == 1) {
    b.for_each_legal_move([&](Move) { ++n; });
    return n;
  }
  b.for_each_legal_move([&](Move m) {
    Board next = b;
    next.make(m);
    n += perft_board(next, depth - 1);
  });
  return n;
}

}  // namespace detail

inline std::uint64_t perft(const Position& p, int depth) {
  if (depth < 0) throw DomainError("perft depth must be >= 0");
  return detail::perft_board(p.board, depth);
}

// Rotates the board 180 degrees and swaps colours; the side to move swaps too,
// so the result is the same game seen from the other chair.
inline Board mirrored(const Board& b) {
  Board out;
  for (int i = 0; i < kSquares; ++i) {
    if (auto p = b.at(Square::from_flat(i))) out.set(Square::from_flat(i).rotated(), Piece{opponent(p->side), p->kind});
  }
  out.set_side_to_move(opponent(b.side_to_move()));
  return out;
}

}  // namespace xq
