#pragma once

// PPO self-play against a snapshot pool: rollouts with forced openings,
// GAE / truncated (VECT) advantages and clipped-surrogate updates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xq/arena.hpp"
#include "xq/micrograd/adam.hpp"
#include "xq/models.hpp"
#include "xq/opponent_pool.hpp"
#include "xq/sl_trainer.hpp"

namespace xq {

// ---------------------------------------------------------------- trajectories

struct TrajStep {
  Position position;
  int action = 0;  // observation-frame index
  double logprob = 0;
  double reward = 0;
  double value = 0;
  bool done = false;
};

// One player's decisions in one game; rewards are from that player's view.
struct Trajectory {
  std::vector<TrajStep> steps;
  double bootstrap = 0;  // V(s_T); 0 when the last step is terminal
};

// ---------------------------------------------------------------- advantages

enum class AdvMode { GAE, VECT };

struct AdvConfig {
  double gamma = 1.0;
  double lambda = 0.95;
  AdvMode mode = AdvMode::VECT;
  int horizon = 20;  // L, VECT only
};

inline void validate(const AdvConfig& c) {
  if (!(c.gamma > 0 && c.gamma <= 1)) throw ConfigError("gamma must be in (0, 1]");
  if (!(c.lambda >= 0 && c.lambda <= 1)) throw ConfigError("lambda must be in [0, 1]");
  if (c.horizon < 0) throw ConfigError("vect horizon must be >= 0");
}

inline std::vector<double> td_errors(const Trajectory& tr, double gamma) {
  const std::size_t n = tr.steps.size();
  std::vector<double> d(n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& s = tr.steps[t];
    const double next = s.done ? 0.0 : t + 1 < n ? tr.steps[t + 1].value : tr.bootstrap;
    d[t] = s.reward + gamma * next - s.value;
  }
  return d;
}

inline std::vector<double> gae(const Trajectory& tr, double gamma, double lambda) {
  const auto d = td_errors(tr, gamma);
  std::vector<double> a(d.size());
  double acc = 0;
  for (std::size_t t = d.size(); t-- > 0;) {
    if (tr.steps[t].done) acc = 0;
    acc = d[t] + gamma * lambda * acc;
    a[t] = acc;
  }
  return a;
}

inline std::vector<double> vect(const Trajectory& tr, double gamma, double lambda, int horizon) {
  if (horizon < 0) throw DomainError("vect horizon must be >= 0");
  const auto d = td_errors(tr, gamma);
  const std::size_t n = d.size();
  std::vector<double> a(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double w = 1;
    for (std::size_t k = t; k < n && k - t <= static_cast<std::size_t>(horizon); ++k) {
      a[t] += w * d[k];
      if (tr.steps[k].done) break;
      w *= gamma * lambda;
    }
  }
  return a;
}

inline std::vector<double> advantages(const Trajectory& tr, const AdvConfig& c) {
  return c.mode == AdvMode::GAE ? gae(tr, c.gamma, c.lambda) : vect(tr, c.gamma, c.lambda, c.horizon);
}

// Zero mean, unit standard deviation (floored at 1e-8).
inline std::vector<double> normalize_advantages(std::vector<double> a) {
  if (a.empty()) return a;
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
  double var = 0;
  for (double x : a) var += (x - mean) * (x - mean);
  const double sd = std::max(std::sqrt(var / a.size()), 1e-8);
  for (double& x : a) x = (x - mean) / sd;
  return a;
}

// ---------------------------------------------------------------- openings

struct OpeningBook {
  std::vector<OpeningLine> lines;
};

inline void validate(const OpeningBook& book) {
  for (std::size_t i = 0; i < book.lines.size(); ++i) {
    Position p = Position::initial();
    for (Move m : book.lines[i]) {
      if (!is_legal(p, m)) throw IllegalMove("opening line " + std::to_string(i) + ": " + to_iccs(m) + " is illegal");
      p = apply_move(p, m);
    }
  }
}

inline OpeningBook parse_opening_book(const std::vector<std::vector<std::string>>& lines) {
  OpeningBook book;
  for (const auto& line : lines) {
    OpeningLine l;
    for (const auto& s : line) {
      const auto m = parse_iccs(s);
      if (!m) throw ParseError("bad ICCS move '" + s + "' in opening book");
      l.push_back(*m);
    }
    book.lines.push_back(std::move(l));
  }
  validate(book);
  return book;
}

// Common first moves and replies: central cannon, elephant, horse and pawn
// openings.
inline OpeningBook default_opening_book() {
  return parse_opening_book({{"h2e2", "h9g7"},
                             {"h2e2", "h7e7"},
                             {"b2e2", "b9c7"},
                             {"c3c4", "g6g5"},
                             {"g3g4", "c6c5"},
                             {"c0e2", "h7e7"},
                             {"b0c2", "b9c7"},
                             {"h0g2", "h9g7"},
                             {"b2d2", "h9g7"},
                             {"h2f2", "b9c7"}});
}

// ---------------------------------------------------------------- rollouts

struct PPOConfig {
  double clip = 0.2;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  int epochs = 3;
  int minibatch = 64;
  int games_per_iteration = 32;
  double tau_train = 1.0;
  int max_plies = 60;
  double lr = 3e-4;
};

inline void validate(const PPOConfig& c) {
  if (!(c.clip > 0)) throw ConfigError("ppo.clip must be > 0");
  if (c.entropy_coef < 0 || c.value_coef < 0) throw ConfigError("ppo loss coefficients must be >= 0");
  if (c.epochs < 1 || c.minibatch < 1) throw ConfigError("ppo.epochs and ppo.minibatch must be >= 1");
  if (c.games_per_iteration < 2 || c.games_per_iteration % 2 != 0)
    throw ConfigError("ppo.games_per_iteration must be even and >= 2");
  if (!(c.tau_train > 0)) throw ConfigError("ppo.tau_train must be > 0");
  if (c.max_plies < 1) throw ConfigError("ppo.max_plies must be >= 1");
  if (!(c.lr > 0)) throw ConfigError("ppo.lr must be > 0");
}

struct CollectConfig {
  double tau_train = 1.0;
  double tau_opp = 0.5;
  int max_plies = 60;
  bool learner_starts_red = true;  // odd games swap colors
  std::uint64_t seed = 1;
  unsigned workers = 0;
};

struct Rollouts {
  std::vector<Trajectory> trajectories;  // one per game, in game order
  std::vector<GameResult> games;         // a_was_red means the learner was Red
};

// The learner's move at `p`, sampled at tau, with its behavior log-probability
// and value estimate.
inline MoveChoice learner_choice(const Network<float>& net, const Position& p, double tau, Rng& rng) {
  const auto inf = infer(net, p);
  const auto dist = tau == 1.0 ? inf.probs : masked_distribution(inf.logits, oriented_mask(p), tau);
  MoveChoice c;
  c.index = sample_index(dist, rng);
  c.move = index_to_move(oriented_index(c.index, p.side_to_move()));
  c.logprob = std::log(dist[c.index]);
  c.value = inf.value;
  return c;
}

inline Rollouts collect(const Network<float>& policy, const Agent& opponent, const OpeningBook& book, int n_games,
                        const CollectConfig& cfg) {
  Rollouts out;
  out.trajectories.resize(static_cast<std::size_t>(n_games));
  out.games.resize(static_cast<std::size_t>(n_games));
  parallel_for(n_games, cfg.workers, [&](int g) {
    Rng rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(g)));
    GameResult res;
    res.a_was_red = (g % 2 == 0) == cfg.learner_starts_red;
    const Side learner = res.a_was_red ? Side::Red : Side::Black;
    Position p = Position::initial();
    if (!book.lines.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, book.lines.size() - 1);
      res.opening = static_cast<int>(pick(rng));
      for (Move m : book.lines[res.opening]) {
        if (terminal(p, cfg.max_plies)) break;
        p = apply_move(p, m);
        res.moves.push_back(m);
      }
    }
    Trajectory tr;
    while (true) {
      if (auto t = terminal(p, cfg.max_plies)) {
        res.outcome = *t;
        break;
      }
      Move m;
      if (p.side_to_move() == learner) {
        const auto c = learner_choice(policy, p, cfg.tau_train, rng);
        TrajStep s;
        s.position = p;
        s.action = c.index;
        s.logprob = c.logprob;
        s.value = c.value;
        tr.steps.push_back(std::move(s));
        m = c.move;
      } else {
        m = opponent.choose(p, cfg.tau_opp, rng);
      }
      p = apply_move(p, m);
      res.moves.push_back(m);
    }
    res.plies = p.ply;
    if (!tr.steps.empty()) {
      tr.steps.back().reward = result_for(res.outcome, learner);
      tr.steps.back().done = true;
    }
    out.trajectories[g] = std::move(tr);
    out.games[g] = std::move(res);
  });
  return out;
}

// ---------------------------------------------------------------- PPO

struct PPOSample {
  NetInput input;
  LegalityMask mask;
  int action = 0;
  double old_logprob = 0;
  double advantage = 0;
  double value_target = 0;
};

struct PPOStats {
  double loss = 0;
  double policy_loss = 0;
  double value_loss = 0;
  double entropy = 0;
  double clip_fraction = 0;
  double approx_kl = 0;
  int minibatches = 0;
};

// Mean entropy of rows of a masked log-softmax. Masked entries hold 0, so
// exp(0) * 0 drops them and they receive no gradient.
inline mg::Var<float> masked_entropy(const mg::Var<float>& logp_all) {
  return mg::scale(mg::sum(mg::mul(mg::exp(logp_all), logp_all)), -1.0f / static_cast<float>(logp_all->shape.rows));
}

struct PPOLoss {
  mg::Var<float> total, policy, value, entropy;
  double clip_fraction = 0;
  double approx_kl = 0;
};

// Clipped surrogate on one minibatch; advantages are used as given.
inline PPOLoss ppo_loss(const Network<float>& net, const std::vector<const PPOSample*>& mb, const PPOConfig& cfg) {
  using namespace mg;
  const int b = static_cast<int>(mb.size());
  std::vector<NetInput> in;
  std::vector<LegalityMask> masks;
  std::vector<int> actions;
  std::vector<float> targets, neg_old;
  for (const auto* s : mb) {
    in.push_back(s->input);
    masks.push_back(s->mask);
    actions.push_back(s->action);
    targets.push_back(static_cast<float>(s->value_target));
    neg_old.push_back(static_cast<float>(-s->old_logprob));
  }
  const auto fwd = net.forward(in);
  const auto logits = cfg.tau_train == 1.0 ? fwd.logits : scale(fwd.logits, static_cast<float>(1.0 / cfg.tau_train));
  const auto logp_all = masked_log_softmax(logits, masks);
  const auto logp = pick(logp_all, actions);
  const auto ratio = exp(add(logp, tensor<float>({b, 1}, neg_old)));
  // Where the clipped term is the minimum it is constant in the parameters;
  // elsewhere the objective is ratio * A.
  std::vector<float> live(b), frozen(b);
  PPOLoss out;
  for (int i = 0; i < b; ++i) {
    const double r = ratio->value[i], a = mb[i]->advantage;
    const double clipped = std::clamp(r, 1.0 - cfg.clip, 1.0 + cfg.clip);
    const bool clip_active = clipped * a < r * a;
    live[i] = clip_active ? 0.0f : static_cast<float>(a);
    frozen[i] = clip_active ? static_cast<float>(clipped * a) : 0.0f;
    out.clip_fraction += std::abs(r - 1.0) > cfg.clip;
    out.approx_kl += (r - 1.0) - std::log(r);
  }
  out.clip_fraction /= b;
  out.approx_kl /= b;
  const float inv_b = 1.0f / static_cast<float>(b);
  double frozen_sum = 0;
  for (float f : frozen) frozen_sum += f;
  out.policy = add_scalar(scale(sum(mul(ratio, tensor<float>({b, 1}, live))), -inv_b),
                          static_cast<float>(-frozen_sum / b));
  out.value = scale(sum(square(sub(fwd.value, tensor<float>({b, 1}, targets)))), inv_b);
  out.entropy = masked_entropy(logp_all);
  out.total = add(add(out.policy, scale(out.value, static_cast<float>(cfg.value_coef))),
                  scale(out.entropy, static_cast<float>(-cfg.entropy_coef)));
  return out;
}

// Normalizes advantages over the whole batch, then runs `epochs` passes of
// shuffled minibatches.
inline PPOStats ppo_update(Network<float>& net, std::vector<PPOSample> batch, const PPOConfig& cfg,
                           mg::AdamState<float>& adam, Rng& rng) {
  validate(cfg);
  PPOStats st;
  if (batch.empty()) return st;
  std::vector<double> adv;
  for (const auto& s : batch) adv.push_back(s.advantage);
  adv = normalize_advantages(std::move(adv));
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i].advantage = adv[i];
  adam.cfg.lr = cfg.lr;
  const auto params = net.params();
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.minibatch)) {
      std::vector<const PPOSample*> mb;
      for (std::size_t k = at; k < std::min(order.size(), at + cfg.minibatch); ++k) mb.push_back(&batch[order[k]]);
      mg::zero_grads(params);
      const auto l = ppo_loss(net, mb, cfg);
      mg::backward(l.total);
      mg::adam_step(params, adam);
      st.loss += l.total->item();
      st.policy_loss += l.policy->item();
      st.value_loss += l.value->item();
      st.entropy += l.entropy->item();
      st.clip_fraction += l.clip_fraction;
      st.approx_kl += l.approx_kl;
      ++st.minibatches;
    }
  }
  const double n = st.minibatches;
  st.loss /= n;
  st.policy_loss /= n;
  st.value_loss /= n;
  st.entropy /= n;
  st.clip_fraction /= n;
  st.approx_kl /= n;
  return st;
}

inline std::vector<PPOSample> make_samples(const std::vector<Trajectory>& trajs, const AdvConfig& adv,
                                           FeatureVariant fv) {
  std::vector<PPOSample> out;
  for (const auto& tr : trajs) {
    const auto a = advantages(tr, adv);
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const auto& s = tr.steps[t];
      PPOSample x;
      x.input = make_input(s.position, fv);
      x.mask = oriented_mask(s.position);
      x.action = s.action;
      x.old_logprob = s.logprob;
      x.advantage = a[t];
      x.value_target = a[t] + s.value;
      out.push_back(std::move(x));
    }
  }
  return out;
}

// ---------------------------------------------------------------- training loop

struct RLConfig {
  int iterations = 30;
  PPOConfig ppo;
  AdvConfig adv;
  std::uint64_t seed = 1;
  unsigned workers = 0;
};

inline void validate(const RLConfig& c) {
  if (c.iterations < 0) throw ConfigError("rl.iterations must be >= 0");
  validate(c.ppo);
  validate(c.adv);
}

struct RLMetrics {
  int iteration = 0;
  int opponent = 0;
  double mean_length = 0;
  int wins = 0, draws = 0, losses = 0;
  PPOStats ppo;
  bool gated = false;
  nlohmann::json pool;
};

inline std::string to_json_line(const RLMetrics& m) {
  nlohmann::ordered_json j{{"iteration", m.iteration},
                           {"opponent", m.opponent},
                           {"mean_length", m.mean_length},
                           {"wins", m.wins},
                           {"draws", m.draws},
                           {"losses", m.losses},
                           {"loss", m.ppo.loss},
                           {"policy_loss", m.ppo.policy_loss},
                           {"value_loss", m.ppo.value_loss},
                           {"entropy", m.ppo.entropy},
                           {"clip_fraction", m.ppo.clip_fraction},
                           {"approx_kl", m.ppo.approx_kl},
                           {"gated", m.gated},
                           {"pool", nlohmann::ordered_json::parse(m.pool.dump())}};
  return j.dump();
}

using RLState = SLState;  // iteration counter + optimizer moments

// Runs iterations [state.step, cfg.iterations). Iteration i draws all of its
// randomness from streams keyed by (seed, i), so a resumed run matches an
// uninterrupted one.
inline void rl_train(Network<float>& net, const RLConfig& cfg, OpponentPool& pool, const OpeningBook& book,
                     RLState& state, const std::function<void(const RLMetrics&)>& on_metrics = {}) {
  validate(cfg);
  validate(book);
  while (state.step < cfg.iterations) {
    const auto it = static_cast<std::uint64_t>(state.step);
    Rng sel(stream_seed(cfg.seed, 20000 + it));
    const PoolEntry& opp = pool.select(sel);
    const int opp_id = opp.id;
    NetAgent opponent(opp.net, "pool:" + std::to_string(opp_id));

    CollectConfig cc;
    cc.tau_train = cfg.ppo.tau_train;
    cc.tau_opp = pool.config().tau_opp;
    cc.max_plies = cfg.ppo.max_plies;
    cc.learner_starts_red = it % 2 == 0;
    cc.seed = stream_seed(cfg.seed, 30000 + it);
    cc.workers = cfg.workers;
    const auto ro = collect(net, opponent, book, cfg.ppo.games_per_iteration, cc);

    RLMetrics m;
    m.opponent = opp_id;
    for (const auto& g : ro.games) {
      const int r = result_for(g.outcome, g.a_was_red ? Side::Red : Side::Black);
      (r > 0 ? m.wins : r == 0 ? m.draws : m.losses)++;
      m.mean_length += g.plies;
      pool.record_result(opp_id, r);
    }
    m.mean_length /= static_cast<double>(ro.games.size());

    Rng shuffle(stream_seed(cfg.seed, 40000 + it));
    m.ppo = ppo_update(net, make_samples(ro.trajectories, cfg.adv, net.config().features), cfg.ppo, state.adam, shuffle);
    m.gated = pool.maybe_gate(net);
    ++state.step;
    m.iteration = state.step;
    m.pool = pool.manifest();
    if (on_metrics) on_metrics(m);
  }
}

}  // namespace xq
