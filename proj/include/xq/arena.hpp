#pragma once

// Head-to-head evaluation: color-alternating matches, win/draw/loss with
// Wilson intervals, and maximum-likelihood Elo over a set of match reports.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "xq/agent.hpp"
#include "xq/rules.hpp"

namespace xq {

using OpeningLine = std::vector<Move>;

struct MatchConfig {
  int games = 200;
  double tau_a = 1.0;
  double tau_b = 1.0;
  // Each opening is played once with each color assignment.
  std::vector<OpeningLine> openings;
  int ply_cap = kDefaultDrawMoveCap;
  std::uint64_t seed = 1;
  // Game 0 has A as Red when true; odd games swap.
  bool a_starts_red = true;
  unsigned workers = 0;  // 0 = hardware concurrency
};

struct Interval {
  double lo = 0;
  double hi = 0;
};

// Wilson score interval at z = 1.96.
inline Interval wilson(int successes, int n, double z = 1.96) {
  if (n <= 0) return {0.0, 1.0};
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half = z / denom * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

struct GameResult {
  Outcome outcome = Outcome::Draw;
  int plies = 0;
  bool a_was_red = true;
  int opening = -1;
  std::vector<Move> moves;
};

struct OpeningBreakdown {
  int opening = -1;
  int wins = 0, draws = 0, losses = 0;
};

struct MatchReport {
  std::string agent_a, agent_b;
  int games = 0;
  int wins = 0, draws = 0, losses = 0;  // from A's side
  double win_rate = 0, draw_rate = 0, loss_rate = 0;
  Interval win_ci, draw_ci;
  double mean_length = 0;
  std::vector<OpeningBreakdown> per_opening;
};

// "92.5%(2.8%)"
inline std::string format_win_draw(const MatchReport& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f%%(%.1f%%)", 100.0 * r.win_rate, 100.0 * r.draw_rate);
  return buf;
}

inline void to_json(nlohmann::ordered_json& j, const MatchReport& r) {
  j = nlohmann::ordered_json{{"agent_a", r.agent_a},
                             {"agent_b", r.agent_b},
                             {"games", r.games},
                             {"wins", r.wins},
                             {"draws", r.draws},
                             {"losses", r.losses},
                             {"win_rate", r.win_rate},
                             {"draw_rate", r.draw_rate},
                             {"loss_rate", r.loss_rate},
                             {"win_ci", {r.win_ci.lo, r.win_ci.hi}},
                             {"draw_ci", {r.draw_ci.lo, r.draw_ci.hi}},
                             {"mean_length", r.mean_length},
                             {"summary", format_win_draw(r)}};
  auto rows = nlohmann::ordered_json::array();
  for (const auto& o : r.per_opening)
    rows.push_back({{"opening", o.opening}, {"wins", o.wins}, {"draws", o.draws}, {"losses", o.losses}});
  j["per_opening"] = rows;
}

// Plays one game; `opening` moves are forced before the agents take over.
inline GameResult play_game(const Agent& red, const Agent& black, double tau_red, double tau_black,
                            const OpeningLine& opening, int ply_cap, Rng& rng) {
  GameResult g;
  Position p = Position::initial();
  for (Move m : opening) {
    if (terminal(p, ply_cap)) break;
    p = apply_move(p, m);
    g.moves.push_back(m);
  }
  while (true) {
    if (auto t = terminal(p, ply_cap)) {
      g.outcome = *t;
      break;
    }
    const bool red_to_move = p.side_to_move() == Side::Red;
    const Move m = red_to_move ? red.choose(p, tau_red, rng) : black.choose(p, tau_black, rng);
    p = apply_move(p, m);
    g.moves.push_back(m);
  }
  g.plies = p.ply;
  return g;
}

// Runs `job(i)` for i in [0, n) across worker threads; results land by index.
template <class Job>
void parallel_for(int n, unsigned workers, Job&& job) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(std::max(n, 1)));
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mu;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline MatchReport summarize(const std::string& a, const std::string& b, const std::vector<GameResult>& games,
                             int n_openings) {
  MatchReport r;
  r.agent_a = a;
  r.agent_b = b;
  r.games = static_cast<int>(games.size());
  r.per_opening.resize(static_cast<std::size_t>(n_openings));
  for (int i = 0; i < n_openings; ++i) r.per_opening[i].opening = i;
  double total_len = 0;
  for (const auto& g : games) {
    const int res = result_for(g.outcome, g.a_was_red ? Side::Red : Side::Black);
    OpeningBreakdown* row = g.opening >= 0 ? &r.per_opening[g.opening] : nullptr;
    if (res > 0) {
      ++r.wins;
      if (row) ++row->wins;
    } else if (res == 0) {
      ++r.draws;
      if (row) ++row->draws;
    } else {
      ++r.losses;
      if (row) ++row->losses;
    }
    total_len += g.plies;
  }
  if (r.games > 0) {
    r.win_rate = static_cast<double>(r.wins) / r.games;
    r.draw_rate = static_cast<double>(r.draws) / r.games;
    r.loss_rate = static_cast<double>(r.losses) / r.games;
    r.mean_length = total_len / r.games;
  }
  r.win_ci = wilson(r.wins, r.games);
  r.draw_ci = wilson(r.draws, r.games);
  return r;
}

inline std::vector<GameResult> play_games(const Agent& a, const Agent& b, const MatchConfig& cfg) {
  if (cfg.games < 0) throw ConfigError("games must be >= 0");
  if (cfg.games % 2 != 0) throw ConfigError("games must be even so colors alternate");
  std::vector<GameResult> results(static_cast<std::size_t>(cfg.games));
  static const OpeningLine kNoOpening;
  parallel_for(cfg.games, cfg.workers, [&](int i) {
    Rng rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    const bool a_red = (i % 2 == 0) == cfg.a_starts_red;
    const int opening = cfg.openings.empty() ? -1 : (i / 2) % static_cast<int>(cfg.openings.size());
    const OpeningLine& line = opening >= 0 ? cfg.openings[opening] : kNoOpening;
    GameResult g = a_red ? play_game(a, b, cfg.tau_a, cfg.tau_b, line, cfg.ply_cap, rng)
                         : play_game(b, a, cfg.tau_b, cfg.tau_a, line, cfg.ply_cap, rng);
    g.a_was_red = a_red;
    g.opening = opening;
    results[i] = std::move(g);
  });
  return results;
}

inline MatchReport play_match(const Agent& a, const Agent& b, const MatchConfig& cfg) {
  return summarize(a.name(), b.name(), play_games(a, b, cfg), static_cast<int>(cfg.openings.size()));
}

struct PairResult {
  std::string a, b;
  int wins = 0, draws = 0, losses = 0;  // from a's side
};

inline PairResult pair_result(const MatchReport& r) { return {r.agent_a, r.agent_b, r.wins, r.draws, r.losses}; }

// Maximum-likelihood logistic ratings (draws count half), anchored so that
// `anchor` (default: first agent seen) is 0. Solved by the Zermelo/MM
// fixed-point iteration on strengths 10^(R/400).
inline std::map<std::string, double> elo(const std::vector<PairResult>& results, std::string anchor = {}) {
  std::vector<std::string> names;
  auto id = [&](const std::string& n) {
    auto it = std::find(names.begin(), names.end(), n);
    if (it != names.end()) return static_cast<int>(it - names.begin());
    names.push_back(n);
    return static_cast<int>(names.size() - 1);
  };
  struct Edge {
    int a, b;
    double games, score_a;
  };
  std::vector<Edge> edges;
  for (const auto& r : results) {
    const int ia = id(r.a), ib = id(r.b);
    const double n = r.wins + r.draws + r.losses;
    if (n > 0 && ia != ib) edges.push_back({ia, ib, n, r.wins + 0.5 * r.draws});
  }
  const int k = static_cast<int>(names.size());
  if (k == 0) return {};
  if (anchor.empty()) anchor = names.front();
  const int anchor_id = id(anchor);
  if (anchor_id >= k) throw DisconnectedGraph("anchor agent has no games");

  std::vector<int> parent(static_cast<std::size_t>(k));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& e : edges) parent[find(e.a)] = find(e.b);
  for (int i = 1; i < k; ++i)
    if (find(i) != find(0)) throw DisconnectedGraph("comparison graph is not connected: " + names[i]);

  std::vector<double> score(k, 0.0), gamma(k, 1.0);
  for (const auto& e : edges) {
    score[e.a] += e.score_a;
    score[e.b] += e.games - e.score_a;
  }
  for (int iter = 0; iter < 10000; ++iter) {
    double change = 0;
    std::vector<double> denom(k, 0.0);
    for (const auto& e : edges) {
      const double d = e.games / (gamma[e.a] + gamma[e.b]);
      denom[e.a] += d;
      denom[e.b] += d;
    }
    for (int i = 0; i < k; ++i) {
      const double next = denom[i] > 0 ? std::max(score[i], 1e-12) / denom[i] : gamma[i];
      change = std::max(change, std::abs(std::log(next / gamma[i])));
      gamma[i] = next;
    }
    const double g0 = gamma[anchor_id];
    for (auto& g : gamma) g /= g0;
    if (change < 1e-12) break;
  }
  std::map<std::string, double> out;
  for (int i = 0; i < k; ++i) out[names[i]] = 400.0 * std::log10(gamma[i]);
  return out;
}

// Expected score of a rating gap under the logistic model.
inline double expected_score(double rating_a, double rating_b) {
  return 1.0 / (1.0 + std::pow(10.0, (rating_b - rating_a) / 400.0));
}

}  // namespace xq
