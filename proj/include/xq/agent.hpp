#pragma once

#include <memory>
#include <random>
#include <string>

#include "xq/rules.hpp"

namespace xq {

using Rng = std::mt19937_64;

// Independent seed for sub-stream `stream` of a run seeded with `seed`.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t state = seed ^ (0xD1B54A32D192ED03ull * (stream + 1));
  detail::splitmix64(state);
  return detail::splitmix64(state);
}

// Anything that picks a move for the side to move. Implementations must be
// safe to call concurrently from several threads (each with its own Rng).
// `tau` is the sampling temperature; agents without a policy ignore it.
class Agent {
 public:
  virtual ~Agent() = default;
  virtual Move choose(const Position& p, double tau, Rng& rng) const = 0;
  virtual std::string name() const = 0;
};

class RandomAgent final : public Agent {
 public:
  Move choose(const Position& p, double, Rng& rng) const override {
    const auto moves = legal_moves(p);
    if (moves.empty()) throw TerminalPosition();
    std::uniform_int_distribution<std::size_t> pick(0, moves.size() - 1);
    return moves[pick(rng)];
  }
  std::string name() const override { return "random"; }
};

}  // namespace xq
