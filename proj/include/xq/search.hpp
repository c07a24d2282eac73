#pragma once

// Alpha-beta baseline: handcrafted material + mobility evaluation and a
// fixed-depth negamax search.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "xq/agent.hpp"
#include "xq/rules.hpp"

namespace xq {

struct EvalWeights {
  // Indexed by PieceKind: General, Advisor, Elephant, Horse, Chariot, Cannon, Soldier.
  std::array<int, kNumKinds> material{0, 200, 200, 400, 900, 450, 100};
  int soldier_across_river = 200;
  int mobility = 2;

  int value(PieceKind k, Side s, int rank) const {
    if (k == PieceKind::Soldier) {
      const bool crossed = s == Side::Red ? rank >= 5 : rank <= 4;
      return crossed ? soldier_across_river : material[static_cast<int>(PieceKind::Soldier)];
    }
    return material[static_cast<int>(k)];
  }
};

inline constexpr int kMateScore = 100000;
inline constexpr int kInfinity = 1000000;

struct SearchConfig {
  int depth = 3;
  // Iterative deepening stops once either budget is exhausted; the last
  // completed depth's answer is returned. Time budgets are not reproducible.
  std::optional<std::uint64_t> node_budget;
  std::optional<double> time_budget_ms;
  // Any node repeating a position from the game history or the current
  // search path scores as a draw (0).
  bool repetition_aware = false;
};

struct SearchResult {
  int score = 0;
  Move best{};
  std::uint64_t nodes = 0;
  int depth = 0;
};

namespace detail {

inline int count_legal(const Board& b) {
  int n = 0;
  b.for_each_legal_move([&](Move) { ++n; });
  return n;
}

inline int material_balance(const Board& b, const EvalWeights& w) {
  int score = 0;
  const Side us = b.side_to_move();
  for (int i = 0; i < kSquares; ++i) {
    const auto c = b.code(i);
    if (c == 0) continue;
    const Side s = side_of(c);
    const int v = w.value(kind_of(c), s, i / kFiles);
    score += s == us ? v : -v;
  }
  return score;
}

inline int evaluate_with_mobility(const Board& b, const EvalWeights& w, int own_moves) {
  Board flipped = b;
  flipped.set_side_to_move(opponent(b.side_to_move()));
  const int their_moves = count_legal(flipped);
  return material_balance(b, w) + w.mobility * (own_moves - their_moves);
}

}  // namespace detail

// Material plus mobility from the side to move's point of view. Mobility
// counts legal moves; the opponent's are counted as if it had the move.
inline int evaluate(const Board& b, const EvalWeights& w = {}) {
  return detail::evaluate_with_mobility(b, w, detail::count_legal(b));
}

inline int evaluate(const Position& p, const EvalWeights& w = {}) { return evaluate(p.board, w); }

inline int action_index(Move m) { return m.from.flat() * kSquares + m.to.flat(); }

// Captures first (most valuable victim, then least valuable attacker), then
// (from, to) ascending.
inline std::vector<Move> ordered_moves(const Board& b, const EvalWeights& w) {
  auto moves = b.legal_moves();
  auto key = [&](Move m) {
    const auto victim = b.code(m.to.flat());
    if (victim == 0) return std::array<int, 2>{0, 0};
    const auto attacker = b.code(m.from.flat());
    return std::array<int, 2>{
        -w.value(detail::kind_of(victim), detail::side_of(victim), m.to.rank()) - 1,
        w.value(detail::kind_of(attacker), detail::side_of(attacker), m.from.rank())};
  };
  std::stable_sort(moves.begin(), moves.end(), [&](Move a, Move c) { return key(a) < key(c); });
  return moves;
}

class AlphaBeta {
 public:
  explicit AlphaBeta(EvalWeights w = {}) : w_(w) {}

  SearchResult search(const Position& p, const SearchConfig& cfg) {
    if (cfg.depth < 1) throw DomainError("search depth must be >= 1");
    if (legal_moves(p).empty()) throw TerminalPosition();
    nodes_ = 0;
    aborted_ = false;
    history_ = cfg.repetition_aware ? &p.history : nullptr;
    const bool budgeted = cfg.node_budget.has_value() || cfg.time_budget_ms.has_value();
    if (!budgeted) {
      auto r = root(p.board, cfg.depth);
      r.nodes = nodes_;
      return r;
    }
    budget_ = cfg.node_budget;
    start_ = std::chrono::steady_clock::now();
    time_ms_ = cfg.time_budget_ms;
    SearchResult best;
    for (int d = 1; d <= cfg.depth; ++d) {
      auto r = root(p.board, d);
      if (aborted_ && d > 1) break;
      best = r;
      if (aborted_) break;
    }
    best.nodes = nodes_;
    budget_.reset();
    time_ms_.reset();
    return best;
  }

 private:
  bool out_of_budget() {
    if (budget_ && nodes_ >= *budget_) return true;
    if (time_ms_ && (nodes_ & 1023) == 0) {
      const auto elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_);
      if (elapsed.count() >= *time_ms_) return true;
    }
    return false;
  }

  // Ties at the root go to the lowest action index: each later move is
  // searched with a lower bound of (best - 1) so an equal score is exact.
  SearchResult root(const Board& b, int depth) {
    ++nodes_;
    SearchResult r;
    r.depth = depth;
    r.score = -kInfinity;
    bool first = true;
    for (Move m : ordered_moves(b, w_)) {
      Board next = b;
      next.make(m);
      const int alpha = first ? -kInfinity : r.score - 1;
      const int score = -negamax(next, depth - 1, 1, -kInfinity, -alpha);
      if (first || score > r.score || (score == r.score && action_index(m) < action_index(r.best))) {
        r.score = score;
        r.best = m;
      }
      first = false;
      if (aborted_ && depth > 1) break;
    }
    return r;
  }

  bool repeated(std::uint64_t h) const {
    return std::find(history_->begin(), history_->end(), h) != history_->end() ||
           std::find(path_.begin(), path_.end(), h) != path_.end();
  }

  int negamax(const Board& b, int depth, int ply, int alpha, int beta) {
    ++nodes_;
    if (!aborted_ && (budget_ || time_ms_) && out_of_budget()) aborted_ = true;
    std::uint64_t h = 0;
    if (history_) {
      h = b.hash();
      if (repeated(h)) return 0;
    }
    if (depth == 0) {
      const int own = detail::count_legal(b);
      if (own == 0) return -(kMateScore - ply);
      return detail::evaluate_with_mobility(b, w_, own);
    }
    const auto moves = ordered_moves(b, w_);
    if (moves.empty()) return -(kMateScore - ply);
    if (history_) path_.push_back(h);
    for (Move m : moves) {
      Board next = b;
      next.make(m);
      const int score = -negamax(next, depth - 1, ply + 1, -beta, -alpha);
      if (score >= beta) {
        alpha = score;
        break;
      }
      if (score > alpha) alpha = score;
    }
    if (history_) path_.pop_back();
    return alpha;
  }

  EvalWeights w_;
  std::uint64_t nodes_ = 0;
  bool aborted_ = false;
  const std::vector<std::uint64_t>* history_ = nullptr;
  std::vector<std::uint64_t> path_;
  std::optional<std::uint64_t> budget_;
  std::optional<double> time_ms_;
  std::chrono::steady_clock::time_point start_{};
};

inline SearchResult search(const Position& p, const SearchConfig& cfg, const EvalWeights& w = {}) {
  return AlphaBeta(w).search(p, cfg);
}

class AlphaBetaAgent final : public Agent {
 public:
  explicit AlphaBetaAgent(SearchConfig cfg, EvalWeights w = {}) : cfg_(cfg), w_(w) { cfg_.repetition_aware = true; }
  Move choose(const Position& p, double, Rng&) const override { return search(p, cfg_, w_).best; }
  std::string name() const override { return "alphabeta:" + std::to_string(cfg_.depth); }
  const SearchConfig& config() const { return cfg_; }

 private:
  SearchConfig cfg_;
  EvalWeights w_;
};

inline std::unique_ptr<Agent> make_baseline_agent(const SearchConfig& cfg, const EvalWeights& w = {}) {
  return std::make_unique<AlphaBetaAgent>(cfg, w);
}

}  // namespace xq
