#pragma once

// Snapshot league: EMA win-rate tracking, softmax-by-weakness selection and
// threshold gating.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xq/agent.hpp"
#include "xq/models.hpp"

namespace xq {

struct PoolConfig {
  double tau_sel = 0.1;
  double theta = 0.55;
  double tau_opp = 0.5;
  double alpha_ema = 0.05;
  int min_games = 50;
  int max_size = 8;
};

inline void validate(const PoolConfig& c) {
  if (!(c.tau_sel > 0)) throw ConfigError("pool.tau_sel must be > 0");
  if (!(c.theta >= 0.5 && c.theta < 1)) throw ConfigError("pool.theta must be in [0.5, 1)");
  if (!(c.tau_opp >= 0)) throw ConfigError("pool.tau_opp must be >= 0");
  if (!(c.alpha_ema > 0 && c.alpha_ema <= 1)) throw ConfigError("pool.alpha_ema must be in (0, 1]");
  if (c.min_games < 0) throw ConfigError("pool.min_games must be >= 0");
  if (c.max_size < 2) throw ConfigError("pool.max_size must be >= 2");
}

inline void to_json(nlohmann::json& j, const PoolConfig& c) {
  j = {{"tau_sel", c.tau_sel},     {"theta", c.theta},         {"tau_opp", c.tau_opp},
       {"alpha_ema", c.alpha_ema}, {"min_games", c.min_games}, {"max_size", c.max_size}};
}

inline void from_json(const nlohmann::json& j, PoolConfig& c) {
  detail::reject_unknown(j, {"tau_sel", "theta", "tau_opp", "alpha_ema", "min_games", "max_size"}, "pool");
  c.tau_sel = j.value("tau_sel", c.tau_sel);
  c.theta = j.value("theta", c.theta);
  c.tau_opp = j.value("tau_opp", c.tau_opp);
  c.alpha_ema = j.value("alpha_ema", c.alpha_ema);
  c.min_games = j.value("min_games", c.min_games);
  c.max_size = j.value("max_size", c.max_size);
  validate(c);
}

struct PoolEntry {
  int id = 0;
  std::string checkpoint;  // empty for in-memory snapshots
  double r = 0.5;          // learner's EMA score against this entry
  int games = 0;
  int since_gate = 0;
  std::shared_ptr<const Network<float>> net;
};

// Below this temperature selection is the exact argmin (lowest id on ties).
inline constexpr double kGreedySelectionTau = 1e-9;

class OpponentPool {
 public:
  // Seeds the pool with the supervised snapshot. When `dir` is non-empty,
  // gated snapshots are written there as checkpoints.
  OpponentPool(const Network<float>& seed_net, std::string seed_checkpoint, PoolConfig cfg, std::string dir = {})
      : cfg_(cfg), dir_(std::move(dir)) {
    validate(cfg_);
    PoolEntry e;
    e.id = next_id_++;
    e.checkpoint = std::move(seed_checkpoint);
    e.net = std::make_shared<const Network<float>>(seed_net.clone());
    entries_.push_back(std::move(e));
  }

  // Rebuilds a pool from explicit entries (ascending ids, seed first).
  OpponentPool(PoolConfig cfg, std::vector<PoolEntry> entries, std::string dir = {})
      : cfg_(cfg), dir_(std::move(dir)), entries_(std::move(entries)) {
    validate(cfg_);
    if (entries_.empty() || entries_.front().id != 0) throw DomainError("pool must start with the seed entry (id 0)");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (i > 0 && entries_[i].id <= entries_[i - 1].id) throw DomainError("pool entry ids must ascend");
      if (!(entries_[i].r >= 0 && entries_[i].r <= 1)) throw DomainError("pool entry r outside [0, 1]");
      if (!entries_[i].net) throw DomainError("pool entry " + std::to_string(entries_[i].id) + " has no network");
    }
    next_id_ = entries_.back().id + 1;
  }

  const PoolConfig& config() const { return cfg_; }
  const std::vector<PoolEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  int seed_id() const { return 0; }

  const PoolEntry& entry(int id) const { return entries_[index_of(id)]; }

  std::vector<double> selection_probs() const {
    std::vector<double> p(entries_.size(), 0.0);
    if (cfg_.tau_sel < kGreedySelectionTau) {
      p[argmin()] = 1.0;
      return p;
    }
    const double lo = entries_[argmin()].r;
    double z = 0;
    for (std::size_t i = 0; i < entries_.size(); ++i) z += p[i] = std::exp(-(entries_[i].r - lo) / cfg_.tau_sel);
    for (auto& v : p) v /= z;
    return p;
  }

  const PoolEntry& select(Rng& rng) const {
    const auto p = selection_probs();
    return entries_[static_cast<std::size_t>(sample_index(p, rng))];
  }

  // result is the learner's: +1 win, 0 draw, -1 loss.
  void record_result(int id, int result) {
    if (result < -1 || result > 1) throw DomainError("result must be -1, 0 or +1");
    auto& e = entries_[index_of(id)];
    const double score = result > 0 ? 1.0 : result == 0 ? 0.5 : 0.0;
    e.r = std::clamp((1.0 - cfg_.alpha_ema) * e.r + cfg_.alpha_ema * score, 0.0, 1.0);
    ++e.games;
    ++e.since_gate;
  }

  bool ready_to_gate() const {
    return std::all_of(entries_.begin(), entries_.end(), [&](const PoolEntry& e) { return e.since_gate >= cfg_.min_games; });
  }

  // Adds a snapshot of `current` once every entry has enough fresh games and
  // the learner's weakest score clears theta. Evicts the oldest non-seed entry
  // when the pool overflows.
  bool maybe_gate(const Network<float>& current) {
    if (!ready_to_gate()) return false;
    if (entries_[argmin()].r < cfg_.theta) return false;
    PoolEntry e;
    e.id = next_id_++;
    e.net = std::make_shared<const Network<float>>(current.clone());
    if (!dir_.empty()) {
      std::filesystem::create_directories(dir_);
      e.checkpoint = (std::filesystem::path(dir_) / ("snapshot_" + std::to_string(e.id) + ".xqnp")).string();
      save_checkpoint(*e.net, e.checkpoint);
    }
    entries_.push_back(std::move(e));
    for (auto& x : entries_) x.since_gate = 0;
    if (static_cast<int>(entries_.size()) > cfg_.max_size) {
      auto victim = std::find_if(entries_.begin(), entries_.end(), [&](const PoolEntry& x) { return x.id != seed_id(); });
      entries_.erase(victim);
    }
    return true;
  }

  nlohmann::json manifest() const {
    auto j = nlohmann::json::array();
    for (const auto& e : entries_)
      j.push_back({{"id", e.id}, {"checkpoint", e.checkpoint}, {"r", e.r}, {"games", e.games}, {"since_gate", e.since_gate}});
    return j;
  }

  void save_manifest(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw FormatError("cannot write " + tmp);
      out << manifest().dump(2) << '\n';
    }
    std::filesystem::rename(tmp, path);
  }

  // Restores statistics and snapshots from a manifest. Entries with an empty
  // checkpoint ref cannot be restored and are rejected.
  static OpponentPool load_manifest(const std::string& path, PoolConfig cfg, std::string dir,
                                    const NetConfig* expected = nullptr) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot read pool manifest " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("pool manifest: " + std::string(e.what()));
    }
    if (!j.is_array() || j.empty()) throw FormatError("pool manifest must be a non-empty list");
    std::vector<PoolEntry> entries;
    for (const auto& row : j) {
      PoolEntry e;
      try {
        e.id = row.at("id").get<int>();
        e.checkpoint = row.at("checkpoint").get<std::string>();
        e.r = row.at("r").get<double>();
        e.games = row.at("games").get<int>();
        e.since_gate = row.value("since_gate", 0);
      } catch (const nlohmann::json::exception& ex) {
        throw FormatError("pool manifest entry: " + std::string(ex.what()));
      }
      if (e.checkpoint.empty()) throw FormatError("pool entry " + std::to_string(e.id) + " has no checkpoint");
      e.net = std::make_shared<const Network<float>>(load_checkpoint(e.checkpoint, expected));
      entries.push_back(std::move(e));
    }
    try {
      return OpponentPool(cfg, std::move(entries), std::move(dir));
    } catch (const DomainError& e) {
      throw FormatError("pool manifest: " + std::string(e.what()));
    }
  }

 private:
  std::size_t index_of(int id) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].id == id) return i;
    throw UnknownEntry("no pool entry with id " + std::to_string(id));
  }

  std::size_t argmin() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < entries_.size(); ++i)
      if (entries_[i].r < entries_[best].r) best = i;
    return best;
  }

  PoolConfig cfg_;
  std::string dir_;
  int next_id_ = 0;
  std::vector<PoolEntry> entries_;
};

}  // namespace xq
