#pragma once

// Supervised phase: masked cross-entropy on labelled moves plus an auxiliary
// value loss on the successor position.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "xq/micrograd/adam.hpp"
#include "xq/models.hpp"
#include "xq/records.hpp"

namespace xq {

struct SLConfig {
  int batch = 32;
  int steps = 1000;
  double lr = 1e-3;
  double aux_weight = 0.5;  // alpha
  SampleMode sampling = SampleMode::Uniform;
  SampleCurve curve;
  double eval_fraction = 0.1;  // of games; 0 evaluates on the training games
  int log_every = 100;
  int eval_max_points = 2000;
  std::uint64_t seed = 1;
};

inline void validate(const SLConfig& c) {
  if (c.batch < 1) throw ConfigError("sl.batch must be >= 1");
  if (c.steps < 0) throw ConfigError("sl.steps must be >= 0");
  if (c.aux_weight < 0) throw ConfigError("sl.aux_weight must be >= 0");
  if (!(c.lr > 0)) throw ConfigError("sl.lr must be > 0");
  if (c.eval_fraction < 0 || c.eval_fraction >= 1) throw ConfigError("sl.eval_fraction must be in [0, 1)");
  if (c.log_every < 1) throw ConfigError("sl.log_every must be >= 1");
}

enum class Stage { First, Mid, Last };

// Thirds of the game: 3t < T, 3t < 2T, rest.
inline Stage stage_of(int t, int T) {
  if (3 * t < T) return Stage::First;
  if (3 * t < 2 * T) return Stage::Mid;
  return Stage::Last;
}

struct StageMetrics {
  std::optional<double> accuracy_first, accuracy_mid, accuracy_last;  // absent when the stage is empty
  int count_first = 0, count_mid = 0, count_last = 0;
  int correct_first = 0, correct_mid = 0, correct_last = 0;

  std::optional<double> overall() const {
    const int n = count_first + count_mid + count_last;
    if (n == 0) return std::nullopt;
    return static_cast<double>(correct_first + correct_mid + correct_last) / n;
  }
};

inline StageMetrics evaluate_stagewise(const std::vector<SamplePoint>& points,
                                       const std::function<Move(const Position&)>& predict) {
  StageMetrics m;
  for (const auto& s : points) {
    const bool ok = predict(s.position) == s.chosen_move;
    switch (stage_of(s.t, s.T)) {
      case Stage::First: m.count_first++, m.correct_first += ok; break;
      case Stage::Mid: m.count_mid++, m.correct_mid += ok; break;
      case Stage::Last: m.count_last++, m.correct_last += ok; break;
    }
  }
  auto acc = [](int c, int n) { return n ? std::optional<double>(static_cast<double>(c) / n) : std::nullopt; };
  m.accuracy_first = acc(m.correct_first, m.count_first);
  m.accuracy_mid = acc(m.correct_mid, m.count_mid);
  m.accuracy_last = acc(m.correct_last, m.count_last);
  return m;
}

// Network argmax over legal moves, batched.
template <class T>
StageMetrics evaluate_stagewise(const Network<T>& net, const std::vector<SamplePoint>& points) {
  std::vector<Move> predicted;
  predicted.reserve(points.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t lo = 0; lo < points.size(); lo += kChunk) {
    std::vector<NetInput> in;
    std::vector<LegalityMask> masks;
    for (std::size_t i = lo; i < std::min(points.size(), lo + kChunk); ++i) {
      in.push_back(make_input(points[i].position, net.config().features));
      masks.push_back(oriented_mask(points[i].position));
    }
    const auto res = infer_batch(net, in, masks);
    for (std::size_t i = 0; i < res.size(); ++i) {
      const Position& p = points[lo + i].position;
      const auto dist = masked_distribution(res[i].logits, masks[i], 0.0);
      const int idx = static_cast<int>(std::max_element(dist.begin(), dist.end()) - dist.begin());
      predicted.push_back(index_to_move(oriented_index(idx, p.side_to_move())));
    }
  }
  std::size_t k = 0;
  return evaluate_stagewise(points, [&](const Position&) { return predicted[k++]; });
}

template <class T>
struct SLLoss {
  mg::Var<T> total, policy, value;
  int correct = 0;  // batch top-1 hits
};

// mean CE(masked policy, label) + alpha * mean (v_after + z)^2, where v_after
// is the network's value of the successor (from the opponent's seat, hence
// the sign) and z the final result from the mover's seat.
template <class T>
SLLoss<T> sl_loss(const Network<T>& net, const std::vector<SamplePoint>& batch, double alpha) {
  using namespace mg;
  if (batch.empty()) throw DomainError("empty batch");
  const FeatureVariant fv = net.config().features;
  std::vector<NetInput> in, next;
  std::vector<LegalityMask> masks;
  std::vector<int> labels;
  std::vector<T> targets;
  for (const auto& s : batch) {
    const Side us = s.position.side_to_move();
    auto mask = oriented_mask(s.position);
    const int label = oriented_index(move_to_index(s.chosen_move), us);
    if (!mask.test(static_cast<std::size_t>(label)))
      throw IllegalLabel("label " + to_iccs(s.chosen_move) + " is not legal in " + s.position.to_fen());
    in.push_back(make_input(s.position, fv));
    masks.push_back(mask);
    labels.push_back(label);
    if (alpha > 0) {
      Position succ = s.position;
      succ.board.make(s.chosen_move);
      next.push_back(make_input(succ, fv));
      targets.push_back(static_cast<T>(s.final_result));
    }
  }
  const T inv_b = T(1) / static_cast<T>(batch.size());
  SLLoss<T> out;
  const auto fwd = net.forward(in);
  auto logp = masked_log_softmax(fwd.logits, masks);
  out.policy = scale(sum(pick(logp, labels)), -inv_b);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const T* row = fwd.logits->value.data() + i * kActions;
    int best = -1;
    for (int a = 0; a < kActions; ++a)
      if (masks[i][a] && (best < 0 || row[a] > row[best])) best = a;
    out.correct += best == labels[i];
  }
  if (alpha > 0) {
    const auto succ = net.forward(next);
    auto z = tensor<T>({static_cast<int>(targets.size()), 1}, targets);
    out.value = scale(sum(square(add(succ.value, z))), inv_b);
    out.total = add(out.policy, scale(out.value, static_cast<T>(alpha)));
  } else {
    out.value = scalar<T>(0);
    out.total = out.policy;
  }
  return out;
}

struct SLMetrics {
  int step = 0;
  double loss = 0, policy_loss = 0, value_loss = 0;  // means over the steps since the last row
  double train_acc = 0;                              // batch top-1 over the same window
  StageMetrics eval;
};

inline nlohmann::ordered_json to_json_line(const SLMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  return {{"step", m.step},
          {"loss", m.loss},
          {"policy_loss", m.policy_loss},
          {"value_loss", m.value_loss},
          {"train_acc", m.train_acc},
          {"acc_first", opt(m.eval.accuracy_first)},
          {"acc_mid", opt(m.eval.accuracy_mid)},
          {"acc_last", opt(m.eval.accuracy_last)},
          {"count_first", m.eval.count_first},
          {"count_mid", m.eval.count_mid},
          {"count_last", m.eval.count_last}};
}

// Game-level split: a seeded shuffle sends eval_fraction of the games to eval.
struct SLSplit {
  Dataset train, eval;
};

inline SLSplit split_games(const std::vector<GameRecord>& records, double eval_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(stream_seed(seed, 7));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_eval = static_cast<std::size_t>(eval_fraction * static_cast<double>(records.size()));
  SLSplit s;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_eval ? s.eval : s.train).add(records[order[i]]);
  if (n_eval == 0) s.eval = s.train;
  return s;
}

// Deterministic, evenly spaced subset of every step of every game.
inline std::vector<SamplePoint> eval_points(const Dataset& d, int max_points) {
  auto all = d.all_points();
  if (max_points <= 0 || all.size() <= static_cast<std::size_t>(max_points)) return all;
  std::vector<SamplePoint> out;
  const double stride = static_cast<double>(all.size()) / max_points;
  for (int i = 0; i < max_points; ++i) out.push_back(all[static_cast<std::size_t>(i * stride)]);
  return out;
}

// Everything needed to continue a run: step counter and optimizer moments.
// Batches are drawn from a per-step RNG stream, so nothing else is stateful.
struct SLState {
  int step = 0;
  mg::AdamState<float> adam;
};

inline void save_state(const SLState& s, std::ostream& out) {
  out.write("XQSL", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(s.step));
  detail::put_u32(out, static_cast<std::uint32_t>(s.adam.step));
  detail::put_u32(out, static_cast<std::uint32_t>(s.adam.m.size()));
  for (std::size_t i = 0; i < s.adam.m.size(); ++i) {
    detail::put_u32(out, static_cast<std::uint32_t>(s.adam.m[i].size()));
    for (const auto* vec : {&s.adam.m[i], &s.adam.v[i]})
      for (float f : *vec) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail::put_u32(out, bits);
      }
  }
}

inline SLState load_state(std::istream& in, const mg::AdamConfig& cfg) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "XQSL", 4) != 0) throw FormatError("bad trainer state magic");
  SLState s;
  s.adam.cfg = cfg;
  s.step = static_cast<int>(detail::get_u32(in));
  s.adam.step = detail::get_u32(in);
  const std::uint32_t n = detail::get_u32(in);
  s.adam.m.resize(n);
  s.adam.v.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t len = detail::get_u32(in);
    for (auto* vec : {&s.adam.m[i], &s.adam.v[i]}) {
      vec->resize(len);
      for (auto& f : *vec) {
        const std::uint32_t bits = detail::get_u32(in);
        std::memcpy(&f, &bits, 4);
      }
    }
  }
  return s;
}

// First occurrence of each (board, side) in `points`, up to `max_points`.
inline std::vector<SamplePoint> distinct_points(const std::vector<SamplePoint>& points, std::size_t max_points) {
  std::vector<SamplePoint> out;
  std::unordered_set<std::uint64_t> seen;
  for (const auto& s : points) {
    if (out.size() >= max_points) break;
    if (seen.insert(s.position.board.hash()).second) out.push_back(s);
  }
  return out;
}

using PointSource = std::function<SamplePoint(Rng&)>;

// Runs steps [state.step, cfg.steps), drawing each batch from `draw` with a
// per-step RNG stream. `on_metrics` receives a row every log_every steps and
// after the final step.
inline void train_sl(Network<float>& net, const SLConfig& cfg, const PointSource& draw,
                     const std::vector<SamplePoint>& eval, SLState& state,
                     const std::function<void(const SLMetrics&)>& on_metrics = {}) {
  validate(cfg);
  state.adam.cfg.lr = cfg.lr;
  const auto params = net.params();
  SLMetrics window;
  int in_window = 0;
  auto flush = [&](int step) {
    if (!on_metrics) return;
    window.step = step;
    if (in_window > 0) {
      window.loss /= in_window;
      window.policy_loss /= in_window;
      window.value_loss /= in_window;
      window.train_acc /= static_cast<double>(in_window) * cfg.batch;
    }
    window.eval = evaluate_stagewise(net, eval);
    on_metrics(window);
    window = SLMetrics{};
    in_window = 0;
  };
  while (state.step < cfg.steps) {
    Rng rng(stream_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(state.step)));
    std::vector<SamplePoint> batch;
    for (int i = 0; i < cfg.batch; ++i) batch.push_back(draw(rng));
    mg::zero_grads(params);
    const auto loss = sl_loss(net, batch, cfg.aux_weight);
    mg::backward(loss.total);
    mg::adam_step(params, state.adam);
    ++state.step;
    window.loss += loss.total->item();
    window.policy_loss += loss.policy->item();
    window.value_loss += loss.value->item();
    window.train_acc += loss.correct;
    ++in_window;
    if (state.step % cfg.log_every == 0 || state.step == cfg.steps) flush(state.step);
  }
}

// Whole games: a game uniformly, then a step (uniform or by the sample curve).
inline void train_sl(Network<float>& net, const SLConfig& cfg, const SLSplit& data, SLState& state,
                     const std::function<void(const SLMetrics&)>& on_metrics = {}) {
  validate(cfg);
  if (data.train.games() == 0) throw DomainError("training set is empty");
  StepSampler sampler(data.train, cfg.sampling, cfg.curve);
  train_sl(net, cfg, [&](Rng& rng) { return sampler.draw(rng); }, eval_points(data.eval, cfg.eval_max_points), state,
           on_metrics);
}

// A loose pool of points, weighted as the two-stage game draw would weight
// them: 1/T each (Uniform) or w(t, T) / sum_t' w(t', T) (Curve). Evaluation
// runs on the pool itself.
inline void train_sl(Network<float>& net, const SLConfig& cfg, const std::vector<SamplePoint>& points,
                     SLState& state, const std::function<void(const SLMetrics&)>& on_metrics = {}) {
  validate(cfg);
  if (points.empty()) throw DomainError("training set is empty");
  std::vector<double> w;
  for (const auto& s : points) {
    if (cfg.sampling == SampleMode::Uniform) {
      w.push_back(1.0 / s.T);
    } else {
      double total = 0;
      for (int t = 0; t < s.T; ++t) total += sample_weight(t, s.T, cfg.curve);
      w.push_back(sample_weight(s.t, s.T, cfg.curve) / total);
    }
  }
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  train_sl(net, cfg, [&](Rng& rng) { return points[pick(rng)]; }, points, state, on_metrics);
}

}  // namespace xq
