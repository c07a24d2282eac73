#pragma once

// Run configuration: one JSON document with sections data, encoding, model,
// sl, rl, pool, arena and search (plus a top-level seed). Every field has a
// default; unknown keys anywhere are rejected.

#include <cstdint>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "xq/arena.hpp"
#include "xq/models.hpp"
#include "xq/opponent_pool.hpp"
#include "xq/records.hpp"
#include "xq/rl_trainer.hpp"
#include "xq/search.hpp"
#include "xq/sl_trainer.hpp"

namespace xq {

// "none", "default" or explicit ICCS lines.
struct OpeningSpec {
  std::string preset = "none";
  std::vector<std::vector<std::string>> lines;

  OpeningBook book() const {
    if (!lines.empty()) return parse_opening_book(lines);
    if (preset == "default") return default_opening_book();
    return {};
  }
};

struct DataConfig {
  std::string dataset;  // record file with a sidecar index; empty synthesizes games
  SynthConfig synth;
  int distinct_points = 0;  // > 0 trains on the first N distinct positions
};

struct ArenaConfig {
  int games = 200;
  double tau_a = 1.0;
  double tau_b = 1.0;
  int ply_cap = kDefaultDrawMoveCap;
  OpeningSpec openings;
  unsigned workers = 0;
};

struct RunConfig {
  std::uint64_t seed = 1;
  DataConfig data;
  FeatureVariant features = FeatureVariant::BoardAllyEnemy;
  NetConfig model;
  SLConfig sl;
  RLConfig rl;
  OpeningSpec rl_openings{"default", {}};
  PoolConfig pool;
  ArenaConfig arena;
  SearchConfig search;

  NetConfig net() const {
    NetConfig c = model;
    c.features = features;
    return c;
  }
  SLConfig sl_config() const {
    SLConfig c = sl;
    c.seed = seed;
    return c;
  }
  RLConfig rl_config() const {
    RLConfig c = rl;
    c.seed = seed;
    return c;
  }
  SynthConfig synth_config() const {
    SynthConfig c = data.synth;
    c.seed = seed;
    return c;
  }
  MatchConfig match_config() const {
    MatchConfig m;
    m.games = arena.games;
    m.tau_a = arena.tau_a;
    m.tau_b = arena.tau_b;
    m.ply_cap = arena.ply_cap;
    m.openings = arena.openings.book().lines;
    m.seed = seed;
    m.workers = arena.workers;
    return m;
  }
};

namespace detail {

template <class T>
void read(const nlohmann::json& j, const char* key, T& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type: " + j.at(key).dump());
  }
}

inline nlohmann::json openings_json(const OpeningSpec& o) {
  if (!o.lines.empty()) return o.lines;
  return o.preset;
}

inline OpeningSpec openings_from(const nlohmann::json& j, const std::string& where) {
  OpeningSpec o;
  if (j.is_string()) {
    o.preset = j.get<std::string>();
    if (o.preset != "none" && o.preset != "default") throw ConfigError(where + " must be \"none\", \"default\" or a list");
    return o;
  }
  try {
    o.lines = j.get<std::vector<std::vector<std::string>>>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + " must be \"none\", \"default\" or a list of ICCS move lists");
  }
  try {
    (void)o.book();
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return o;
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json model = c.model;
  model.erase("features");
  const auto& sy = c.data.synth;
  const auto& sl = c.sl;
  const auto& rl = c.rl;
  nlohmann::json search{{"depth", c.search.depth}, {"repetition_aware", c.search.repetition_aware}};
  search["node_budget"] = c.search.node_budget ? nlohmann::json(*c.search.node_budget) : nlohmann::json(nullptr);
  return {
      {"seed", c.seed},
      {"data",
       {{"dataset", c.data.dataset},
        {"distinct_points", c.data.distinct_points},
        {"synth",
         {{"games", sy.games},
          {"depth", sy.search.depth},
          {"random_opening_plies", sy.random_opening_plies},
          {"ply_cap", sy.ply_cap}}}}},
      {"encoding", {{"features", c.features}}},
      {"model", model},
      {"sl",
       {{"batch", sl.batch},
        {"steps", sl.steps},
        {"lr", sl.lr},
        {"aux_weight", sl.aux_weight},
        {"sampling", sl.sampling == SampleMode::Curve ? "curve" : "uniform"},
        {"curve", {{"a_scale", sl.curve.a_scale}, {"log_b", sl.curve.log_b}, {"c", sl.curve.c}}},
        {"eval_fraction", sl.eval_fraction},
        {"log_every", sl.log_every},
        {"eval_max_points", sl.eval_max_points}}},
      {"rl",
       {{"iterations", rl.iterations},
        {"games_per_iteration", rl.ppo.games_per_iteration},
        {"max_plies", rl.ppo.max_plies},
        {"tau_train", rl.ppo.tau_train},
        {"clip", rl.ppo.clip},
        {"entropy_coef", rl.ppo.entropy_coef},
        {"value_coef", rl.ppo.value_coef},
        {"epochs", rl.ppo.epochs},
        {"minibatch", rl.ppo.minibatch},
        {"lr", rl.ppo.lr},
        {"advantage", rl.adv.mode == AdvMode::GAE ? "gae" : "vect"},
        {"gamma", rl.adv.gamma},
        {"lambda", rl.adv.lambda},
        {"vect_horizon", rl.adv.horizon},
        {"openings", detail::openings_json(c.rl_openings)},
        {"workers", rl.workers}}},
      {"pool", c.pool},
      {"arena",
       {{"games", c.arena.games},
        {"tau_a", c.arena.tau_a},
        {"tau_b", c.arena.tau_b},
        {"ply_cap", c.arena.ply_cap},
        {"openings", detail::openings_json(c.arena.openings)},
        {"workers", c.arena.workers}}},
      {"search", search},
  };
}

inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::read;
  using detail::reject_unknown;
  RunConfig c;
  reject_unknown(j, {"seed", "data", "encoding", "model", "sl", "rl", "pool", "arena", "search"}, "config");
  read(j, "seed", c.seed, "config");
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, {"dataset", "distinct_points", "synth"}, "data");
    read(d, "dataset", c.data.dataset, "data");
    read(d, "distinct_points", c.data.distinct_points, "data");
    if (c.data.distinct_points < 0) throw ConfigError("data.distinct_points must be >= 0");
    if (d.contains("synth")) {
      const auto& s = d["synth"];
      reject_unknown(s, {"games", "depth", "random_opening_plies", "ply_cap"}, "data.synth");
      read(s, "games", c.data.synth.games, "data.synth");
      read(s, "depth", c.data.synth.search.depth, "data.synth");
      read(s, "random_opening_plies", c.data.synth.random_opening_plies, "data.synth");
      read(s, "ply_cap", c.data.synth.ply_cap, "data.synth");
      if (c.data.synth.games < 0 || c.data.synth.search.depth < 1 || c.data.synth.ply_cap < 1 ||
          c.data.synth.random_opening_plies < 0)
        throw ConfigError("data.synth values out of range");
    }
  }
  if (j.contains("encoding")) {
    const auto& e = j["encoding"];
    reject_unknown(e, {"features"}, "encoding");
    if (e.contains("features")) c.features = detail::enum_from<FeatureVariant>(e["features"], "encoding.features");
  }
  if (j.contains("model")) {
    if (j["model"].is_object() && j["model"].contains("features"))
      throw ConfigError("model.features belongs in encoding.features");
    try {
      c.model = j["model"].get<NetConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model: " + std::string(e.what()));
    }
  }
  c.model.features = c.features;
  validate(c.model);
  if (j.contains("sl")) {
    const auto& s = j["sl"];
    reject_unknown(s, {"batch", "steps", "lr", "aux_weight", "sampling", "curve", "eval_fraction", "log_every",
                       "eval_max_points"},
                   "sl");
    read(s, "batch", c.sl.batch, "sl");
    read(s, "steps", c.sl.steps, "sl");
    read(s, "lr", c.sl.lr, "sl");
    read(s, "aux_weight", c.sl.aux_weight, "sl");
    read(s, "eval_fraction", c.sl.eval_fraction, "sl");
    read(s, "log_every", c.sl.log_every, "sl");
    read(s, "eval_max_points", c.sl.eval_max_points, "sl");
    if (s.contains("sampling")) {
      std::string m;
      read(s, "sampling", m, "sl");
      if (m != "uniform" && m != "curve") throw ConfigError("sl.sampling must be \"uniform\" or \"curve\"");
      c.sl.sampling = m == "curve" ? SampleMode::Curve : SampleMode::Uniform;
    }
    if (s.contains("curve")) {
      const auto& cv = s["curve"];
      reject_unknown(cv, {"a_scale", "log_b", "c"}, "sl.curve");
      read(cv, "a_scale", c.sl.curve.a_scale, "sl.curve");
      read(cv, "log_b", c.sl.curve.log_b, "sl.curve");
      read(cv, "c", c.sl.curve.c, "sl.curve");
    }
  }
  validate(c.sl);
  if (j.contains("rl")) {
    const auto& r = j["rl"];
    reject_unknown(r, {"iterations", "games_per_iteration", "max_plies", "tau_train", "clip", "entropy_coef",
                       "value_coef", "epochs", "minibatch", "lr", "advantage", "gamma", "lambda", "vect_horizon",
                       "openings", "workers"},
                   "rl");
    read(r, "iterations", c.rl.iterations, "rl");
    read(r, "games_per_iteration", c.rl.ppo.games_per_iteration, "rl");
    read(r, "max_plies", c.rl.ppo.max_plies, "rl");
    read(r, "tau_train", c.rl.ppo.tau_train, "rl");
    read(r, "clip", c.rl.ppo.clip, "rl");
    read(r, "entropy_coef", c.rl.ppo.entropy_coef, "rl");
    read(r, "value_coef", c.rl.ppo.value_coef, "rl");
    read(r, "epochs", c.rl.ppo.epochs, "rl");
    read(r, "minibatch", c.rl.ppo.minibatch, "rl");
    read(r, "lr", c.rl.ppo.lr, "rl");
    read(r, "gamma", c.rl.adv.gamma, "rl");
    read(r, "lambda", c.rl.adv.lambda, "rl");
    read(r, "vect_horizon", c.rl.adv.horizon, "rl");
    read(r, "workers", c.rl.workers, "rl");
    if (r.contains("advantage")) {
      std::string m;
      read(r, "advantage", m, "rl");
      if (m != "gae" && m != "vect") throw ConfigError("rl.advantage must be \"gae\" or \"vect\"");
      c.rl.adv.mode = m == "gae" ? AdvMode::GAE : AdvMode::VECT;
    }
    if (r.contains("openings")) c.rl_openings = detail::openings_from(r["openings"], "rl.openings");
  }
  validate(c.rl);
  if (j.contains("pool")) {
    try {
      c.pool = j["pool"].get<PoolConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("pool: " + std::string(e.what()));
    }
  }
  if (j.contains("arena")) {
    const auto& a = j["arena"];
    reject_unknown(a, {"games", "tau_a", "tau_b", "ply_cap", "openings", "workers"}, "arena");
    read(a, "games", c.arena.games, "arena");
    read(a, "tau_a", c.arena.tau_a, "arena");
    read(a, "tau_b", c.arena.tau_b, "arena");
    read(a, "ply_cap", c.arena.ply_cap, "arena");
    read(a, "workers", c.arena.workers, "arena");
    if (a.contains("openings")) c.arena.openings = detail::openings_from(a["openings"], "arena.openings");
    if (c.arena.games < 0 || c.arena.games % 2 != 0) throw ConfigError("arena.games must be even and >= 0");
    if (c.arena.tau_a < 0 || c.arena.tau_b < 0) throw ConfigError("arena temperatures must be >= 0");
    if (c.arena.ply_cap < 1) throw ConfigError("arena.ply_cap must be >= 1");
  }
  if (j.contains("search")) {
    const auto& s = j["search"];
    reject_unknown(s, {"depth", "node_budget", "repetition_aware"}, "search");
    read(s, "depth", c.search.depth, "search");
    read(s, "repetition_aware", c.search.repetition_aware, "search");
    if (s.contains("node_budget") && !s["node_budget"].is_null()) {
      std::uint64_t n = 0;
      read(s, "node_budget", n, "search");
      c.search.node_budget = n;
    }
    if (c.search.depth < 1) throw ConfigError("search.depth must be >= 1");
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

}  // namespace xq
