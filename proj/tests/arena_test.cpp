#include <gtest/gtest.h>

#include <cmath>

#include "xq/arena.hpp"
#include "xq/search.hpp"

using namespace xq;

TEST(Arena, IdenticalDeterministicAgentsAreColorSymmetric) {
  AlphaBetaAgent a(SearchConfig{.depth = 1}), b(SearchConfig{.depth = 1});
  MatchConfig cfg{.games = 4, .ply_cap = 80, .seed = 3, .workers = 1};
  const auto games = play_games(a, b, cfg);
  EXPECT_EQ(games[0].moves, games[2].moves);
  EXPECT_EQ(games[1].moves, games[3].moves);
  const auto r = summarize(a.name(), b.name(), games, 0);
  EXPECT_EQ(r.wins, r.losses);
}

TEST(Arena, FixedSeedIsReproducible) {
  RandomAgent a, b;
  MatchConfig cfg{.games = 10, .ply_cap = 60, .seed = 99};
  nlohmann::ordered_json j1 = play_match(a, b, cfg), j2 = play_match(a, b, cfg);
  EXPECT_EQ(j1.dump(), j2.dump());
}

TEST(Arena, SwappingAgentsSwapsResults) {
  RandomAgent a;
  AlphaBetaAgent b(SearchConfig{.depth = 1});
  MatchConfig cfg{.games = 6, .ply_cap = 100, .seed = 5};
  const auto ab = play_match(a, b, cfg);
  cfg.a_starts_red = false;
  const auto ba = play_match(b, a, cfg);
  EXPECT_EQ(ab.wins, ba.losses);
  EXPECT_EQ(ab.losses, ba.wins);
  EXPECT_EQ(ab.draws, ba.draws);
}

TEST(Arena, ReportInvariants) {
  RandomAgent a, b;
  MatchConfig cfg{.games = 20, .ply_cap = 40, .seed = 7};
  const auto r = play_match(a, b, cfg);
  EXPECT_EQ(r.wins + r.draws + r.losses, r.games);
  EXPECT_DOUBLE_EQ(r.win_rate + r.draw_rate + r.loss_rate, 1.0);
  EXPECT_LE(r.win_ci.lo, r.win_rate);
  EXPECT_GE(r.win_ci.hi, r.win_rate);
  EXPECT_THROW(play_match(a, b, MatchConfig{.games = 3}), ConfigError);
}

TEST(Arena, OpeningsAppliedToBothColors) {
  RandomAgent a, b;
  const OpeningLine line{*parse_iccs("h2e2"), *parse_iccs("h9g7")};
  MatchConfig cfg{.games = 4, .openings = {line}, .ply_cap = 20, .seed = 1};
  const auto games = play_games(a, b, cfg);
  for (const auto& g : games) {
    ASSERT_GE(g.moves.size(), 2u);
    EXPECT_EQ(g.moves[0], line[0]);
    EXPECT_EQ(g.moves[1], line[1]);
    EXPECT_EQ(g.opening, 0);
  }
  EXPECT_EQ(summarize("a", "b", games, 1).per_opening.size(), 1u);
}

TEST(Arena, WilsonIntervalShrinks) {
  const auto small = wilson(30, 100);
  const auto large = wilson(300, 1000);
  EXPECT_LE(small.lo, 0.3);
  EXPECT_GE(small.hi, 0.3);
  const double ratio = (small.hi - small.lo) / (large.hi - large.lo);
  EXPECT_NEAR(ratio, std::sqrt(10.0), 0.1);
}

TEST(Arena, Formatting) {
  MatchReport r;
  r.win_rate = 0.925;
  r.draw_rate = 0.028;
  EXPECT_EQ(format_win_draw(r), "92.5%(2.8%)");
}

TEST(Elo, EqualScoreEqualRatings) {
  const auto r = elo({{"a", "b", 10, 0, 10}});
  EXPECT_NEAR(r.at("a"), 0.0, 1e-9);
  EXPECT_NEAR(r.at("b"), 0.0, 1e-6);
}

TEST(Elo, SeventyFivePercentGap) {
  const auto r = elo({{"a", "b", 7500, 0, 2500}});
  EXPECT_NEAR(r.at("a") - r.at("b"), 400.0 * std::log10(3.0), 10.0);
  const auto d = elo({{"a", "b", 5000, 5000, 0}});  // draws count half
  EXPECT_NEAR(d.at("a") - d.at("b"), 400.0 * std::log10(3.0), 10.0);
}

TEST(Elo, AnchorAndGauge) {
  const std::vector<PairResult> games{{"a", "b", 60, 10, 30}, {"b", "c", 50, 0, 50}, {"a", "c", 40, 20, 40}};
  const auto r = elo(games, "b");
  EXPECT_NEAR(r.at("b"), 0.0, 1e-9);
  const double shift = 123.0;
  EXPECT_NEAR(expected_score(r.at("a") + shift, r.at("c") + shift), expected_score(r.at("a"), r.at("c")), 1e-12);
}

TEST(Elo, DisconnectedGraphThrows) {
  EXPECT_THROW(elo({{"a", "b", 1, 0, 1}, {"c", "d", 1, 0, 1}}), DisconnectedGraph);
}
