#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "xq/opponent_pool.hpp"

using namespace xq;

namespace {

NetConfig tiny() {
  NetConfig c;
  c.blocks = 1;
  c.channels = 8;
  c.head_dim = 8;
  return c;
}

std::shared_ptr<const Network<float>> net(std::uint64_t seed = 1) {
  return std::make_shared<const Network<float>>(Network<float>(tiny(), seed));
}

OpponentPool pool_with(const std::vector<double>& r, PoolConfig cfg = {}, int since_gate = 0) {
  std::vector<PoolEntry> entries;
  for (std::size_t i = 0; i < r.size(); ++i) {
    PoolEntry e;
    e.id = static_cast<int>(i);
    e.r = r[i];
    e.since_gate = since_gate;
    e.net = net(i + 1);
    entries.push_back(e);
  }
  return OpponentPool(cfg, entries);
}

std::vector<double> frequencies(const OpponentPool& pool, int draws, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> f(pool.size(), 0.0);
  for (int i = 0; i < draws; ++i) {
    const int id = pool.select(rng).id;
    for (std::size_t k = 0; k < pool.size(); ++k)
      if (pool.entries()[k].id == id) f[k] += 1.0 / draws;
  }
  return f;
}

}  // namespace

TEST(Pool, InitHoldsSeedOnly) {
  Network<float> sl(tiny(), 3);
  OpponentPool pool(sl, "sl.xqnp", PoolConfig{});
  ASSERT_EQ(pool.size(), 1u);
  EXPECT_DOUBLE_EQ(pool.entries()[0].r, 0.5);
  EXPECT_EQ(pool.entries()[0].checkpoint, "sl.xqnp");
  EXPECT_EQ(probe_hash(*pool.entries()[0].net), probe_hash(sl));
}

TEST(Pool, ConfigValidation) {
  PoolConfig c;
  c.tau_sel = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.theta = 0.45;
  EXPECT_THROW(validate(c), ConfigError);
  c.theta = 1.0;
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_THROW((nlohmann::json{{"theta", 0.6}, {"bogus", 1}}.get<PoolConfig>()), ConfigError);
}

TEST(Pool, EqualRatesSelectUniformly) {
  PoolConfig cfg;
  cfg.tau_sel = 1;
  const auto f = frequencies(pool_with({0.3, 0.3, 0.3, 0.3}, cfg), 100000, 5);
  for (double x : f) EXPECT_NEAR(x, 0.25, 0.02);
}

TEST(Pool, SoftmaxByWeakness) {
  PoolConfig cfg;
  cfg.tau_sel = 1;
  const auto pool = pool_with({0.0, 1.0}, cfg);
  const double p0 = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(pool.selection_probs()[0], p0, 1e-12);
  const auto f = frequencies(pool, 100000, 9);
  EXPECT_NEAR(f[0], 0.7311, 0.01);
  EXPECT_NEAR(f[1], 0.2689, 0.01);
}

TEST(Pool, RandomRateVectorsMatchFormula) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 5; ++trial) {
    PoolConfig cfg;
    cfg.tau_sel = 0.05 + u(gen);
    std::vector<double> r(2 + trial);
    for (auto& x : r) x = u(gen);
    const auto pool = pool_with(r, cfg);
    double z = 0;
    for (double x : r) z += std::exp(-x / cfg.tau_sel);
    const auto f = frequencies(pool, 100000, 100 + trial);
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(f[i], std::exp(-r[i] / cfg.tau_sel) / z, 0.02);
  }
}

TEST(Pool, ZeroTemperatureLimitIsArgminLowestId) {
  PoolConfig cfg;
  cfg.tau_sel = 1e-12;
  const auto pool = pool_with({0.7, 0.2, 0.2, 0.9}, cfg);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(pool.select(rng).id, 1);
}

TEST(Pool, EmaUpdates) {
  auto pool = pool_with({0.5});
  pool.record_result(0, +1);
  EXPECT_NEAR(pool.entry(0).r, 0.525, 1e-12);
  auto draws = pool_with({0.5});
  for (int i = 0; i < 1000; ++i) draws.record_result(0, 0);
  EXPECT_DOUBLE_EQ(draws.entry(0).r, 0.5);
  auto wins = pool_with({0.2});
  double prev = wins.entry(0).r;
  for (int i = 0; i < 2000; ++i) {
    wins.record_result(0, +1);
    EXPECT_GE(wins.entry(0).r, prev);
    prev = wins.entry(0).r;
  }
  EXPECT_NEAR(prev, 1.0, 1e-9);
  EXPECT_EQ(wins.entry(0).games, 2000);
}

TEST(Pool, RateStaysInUnitInterval) {
  auto pool = pool_with({0.5, 0.1, 0.9});
  std::mt19937_64 gen(8);
  for (int i = 0; i < 20000; ++i) {
    const int id = static_cast<int>(gen() % 3);
    pool.record_result(id, static_cast<int>(gen() % 3) - 1);
    EXPECT_GE(pool.entry(id).r, 0.0);
    EXPECT_LE(pool.entry(id).r, 1.0);
  }
}

TEST(Pool, UnknownEntry) {
  auto pool = pool_with({0.5});
  EXPECT_THROW(pool.record_result(7, 1), UnknownEntry);
  EXPECT_THROW(pool.entry(7), UnknownEntry);
}

TEST(Pool, GateFiresOnlyAboveThreshold) {
  Network<float> current(tiny(), 42);
  auto up = pool_with({0.6, 0.7}, {}, 50);
  EXPECT_TRUE(up.maybe_gate(current));
  ASSERT_EQ(up.size(), 3u);
  EXPECT_DOUBLE_EQ(up.entries().back().r, 0.5);
  EXPECT_EQ(probe_hash(*up.entries().back().net), probe_hash(current));
  auto down = pool_with({0.6, 0.5}, {}, 50);
  EXPECT_FALSE(down.maybe_gate(current));
  EXPECT_EQ(down.size(), 2u);
}

TEST(Pool, GateWaitsForMinGames) {
  Network<float> current(tiny(), 42);
  auto pool = pool_with({0.9, 0.9}, {}, 49);
  EXPECT_FALSE(pool.maybe_gate(current));
  pool.record_result(0, 1);
  EXPECT_FALSE(pool.maybe_gate(current));
  pool.record_result(1, 1);
  EXPECT_TRUE(pool.maybe_gate(current));
  // Counters restart, so an immediate second gate is blocked.
  EXPECT_FALSE(pool.maybe_gate(current));
}

TEST(Pool, EvictsOldestNonSeed) {
  PoolConfig cfg;
  cfg.max_size = 3;
  cfg.min_games = 0;
  auto pool = pool_with({0.9, 0.9, 0.9}, cfg);
  Network<float> current(tiny(), 42);
  ASSERT_TRUE(pool.maybe_gate(current));
  ASSERT_EQ(pool.size(), 3u);
  EXPECT_EQ(pool.entries()[0].id, 0);
  EXPECT_EQ(pool.entries()[1].id, 2);
  EXPECT_EQ(pool.entries()[2].id, 3);
  for (int round = 0; round < 5; ++round) {
    const int fresh = pool.entries().back().id;
    EXPECT_FALSE(pool.maybe_gate(current));  // the fresh entry sits at 0.5
    for (int i = 0; i < 200; ++i) pool.record_result(fresh, 1);
    ASSERT_TRUE(pool.maybe_gate(current));
    EXPECT_EQ(pool.size(), 3u);
    EXPECT_EQ(pool.entries()[0].id, 0);
    EXPECT_EQ(pool.entries()[1].id, fresh);
  }
}

TEST(Pool, ManifestRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "xq_pool_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  Network<float> sl(tiny(), 3);
  save_checkpoint(sl, (dir / "sl.xqnp").string());
  PoolConfig cfg;
  cfg.min_games = 0;
  OpponentPool pool(sl, (dir / "sl.xqnp").string(), cfg, dir.string());
  for (int i = 0; i < 40; ++i) pool.record_result(0, 1);
  Network<float> current(tiny(), 4);
  ASSERT_TRUE(pool.maybe_gate(current));
  pool.record_result(1, -1);
  pool.save_manifest((dir / "pool.json").string());

  const auto back = OpponentPool::load_manifest((dir / "pool.json").string(), cfg, dir.string());
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.entries()[i].id, pool.entries()[i].id);
    EXPECT_DOUBLE_EQ(back.entries()[i].r, pool.entries()[i].r);
    EXPECT_EQ(back.entries()[i].games, pool.entries()[i].games);
    EXPECT_EQ(probe_hash(*back.entries()[i].net), probe_hash(*pool.entries()[i].net));
  }
  const auto j = nlohmann::json::parse(std::ifstream(dir / "pool.json"));
  ASSERT_TRUE(j.is_array());
  for (const char* key : {"id", "checkpoint", "r", "games"}) EXPECT_TRUE(j[0].contains(key)) << key;
  std::filesystem::remove_all(dir);
}
