#pragma once

// Game records: a PGN subset with ICCS movetext, cleaning, the on-disk
// record/index format, and position sampling along the game.
//
// Record file: PGN documents separated by one blank line. Index sidecar
// "<name>.idx": for every record a little-endian (u64 offset, u64 plies) pair.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "xq/agent.hpp"
#include "xq/rules.hpp"
#include "xq/search.hpp"

namespace xq {

enum class Termination { Normal, Disconnect };

struct GameRecord {
  std::vector<std::string> moves;  // ICCS, lowercase
  Outcome result = Outcome::Draw;
  Termination termination = Termination::Normal;
  // Tags other than Result and Termination, which live in the fields above.
  std::map<std::string, std::string> metadata;

  int plies() const { return static_cast<int>(moves.size()); }
  friend bool operator==(const GameRecord&, const GameRecord&) = default;
};

inline std::string result_token(Outcome o) {
  switch (o) {
    case Outcome::RedWins: return "1-0";
    case Outcome::BlackWins: return "0-1";
    case Outcome::Draw: return "1/2-1/2";
  }
  return "*";
}

namespace detail {

inline std::optional<Outcome> parse_result_token(std::string_view t) {
  if (t == "1-0") return Outcome::RedWins;
  if (t == "0-1") return Outcome::BlackWins;
  if (t == "1/2-1/2" || t == "1/2") return Outcome::Draw;
  return std::nullopt;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// [Key "Value"]
inline std::pair<std::string, std::string> parse_tag(std::string_view line) {
  line = trim(line);
  if (line.size() < 2 || line.front() != '[' || line.back() != ']') throw ParseError("malformed tag: " + std::string(line));
  line = trim(line.substr(1, line.size() - 2));
  const auto sp = line.find_first_of(" \t");
  if (sp == std::string_view::npos) throw ParseError("tag without value: " + std::string(line));
  std::string key(line.substr(0, sp));
  auto value = trim(line.substr(sp + 1));
  if (value.size() < 2 || value.front() != '"' || value.back() != '"')
    throw ParseError("tag value must be quoted: " + std::string(line));
  return {key, std::string(value.substr(1, value.size() - 2))};
}

inline bool is_move_number(std::string_view t) {
  if (t.empty() || t.back() != '.') return false;
  return std::all_of(t.begin(), t.end(), [](char c) { return c == '.' || std::isdigit(static_cast<unsigned char>(c)); });
}

}  // namespace detail

inline GameRecord parse_record(std::string_view text) {
  GameRecord rec;
  std::optional<Outcome> tag_result;
  std::optional<Outcome> token_result;
  std::istringstream in{std::string(text)};
  std::string line;
  bool seen_movetext = false;
  while (std::getline(in, line)) {
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    if (t.front() == '[' && !seen_movetext) {
      auto [key, value] = detail::parse_tag(t);
      if (key == "Result") {
        tag_result = detail::parse_result_token(value);
        if (!tag_result && value != "*") throw ParseError("bad Result tag: " + value);
      } else if (key == "Termination") {
        rec.termination = detail::lower(value) == "disconnect" ? Termination::Disconnect : Termination::Normal;
      } else {
        rec.metadata[key] = value;
      }
      continue;
    }
    seen_movetext = true;
    std::istringstream tokens{std::string(t)};
    std::string tok;
    while (tokens >> tok) {
      if (token_result) throw ParseError("token after result: " + tok);
      if (auto r = detail::parse_result_token(tok)) {
        token_result = r;
        continue;
      }
      if (tok == "*") throw ParseError("unfinished game");
      if (detail::is_move_number(tok)) continue;
      if (!parse_iccs(tok)) throw ParseError("bad move token '" + tok + "'");
      rec.moves.push_back(detail::lower(tok));
    }
  }
  if (!token_result && !tag_result) throw ParseError("missing result");
  if (token_result && tag_result && *token_result != *tag_result) throw ParseError("Result tag disagrees with movetext");
  rec.result = token_result ? *token_result : *tag_result;

  Position p = Position::initial();
  for (std::size_t i = 0; i < rec.moves.size(); ++i) {
    const Move m = *parse_iccs(rec.moves[i]);
    if (!is_legal(p, m)) throw IllegalMoveError(i, rec.moves[i]);
    p = apply_move(p, m);
  }
  return rec;
}

inline std::string serialize_record(const GameRecord& r) {
  std::string out;
  for (const auto& [k, v] : r.metadata) out += "[" + k + " \"" + v + "\"]\n";
  out += "[Result \"" + result_token(r.result) + "\"]\n";
  if (r.termination == Termination::Disconnect) out += "[Termination \"disconnect\"]\n";
  for (const auto& m : r.moves) out += m + ' ';
  out += result_token(r.result) + '\n';
  return out;
}

// Splits a multi-game file into documents: a tag line after movetext or a
// blank line after movetext starts the next document.
inline std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  bool in_movetext = false;
  std::istringstream in{std::string(text)};
  std::string line;
  auto flush = [&] {
    if (!detail::trim(current).empty()) docs.push_back(current);
    current.clear();
    in_movetext = false;
  };
  while (std::getline(in, line)) {
    const auto t = detail::trim(line);
    if (t.empty()) {
      if (in_movetext) flush();
      continue;
    }
    if (t.front() == '[' && in_movetext) flush();
    if (t.front() != '[') in_movetext = true;
    current += line;
    current += '\n';
  }
  flush();
  return docs;
}

struct CleanStats {
  std::size_t seen = 0;
  std::size_t dropped_short = 0;
  std::size_t dropped_disconnect = 0;
  std::size_t kept = 0;
};

inline constexpr int kMinRounds = 10;

// Drops games shorter than ten rounds (a round is one Red and one Black move)
// and games that ended by disconnection.
class Cleaner {
 public:
  bool accept(const GameRecord& r) {
    ++stats_.seen;
    if (r.plies() < 2 * kMinRounds) {
      ++stats_.dropped_short;
      return false;
    }
    if (r.termination == Termination::Disconnect) {
      ++stats_.dropped_disconnect;
      return false;
    }
    ++stats_.kept;
    return true;
  }
  const CleanStats& stats() const { return stats_; }

 private:
  CleanStats stats_;
};

inline std::vector<GameRecord> clean(const std::vector<GameRecord>& records, CleanStats* stats = nullptr) {
  Cleaner c;
  std::vector<GameRecord> out;
  for (const auto& r : records)
    if (c.accept(r)) out.push_back(r);
  if (stats) *stats = c.stats();
  return out;
}

// p(t) ~ log(a * t + b) + c with a = a_scale / T and b = e^log_b. The
// defaults give log(t / (2T) + e^-1) + 1.5. b is kept in log form so that
// w(0) = log_b + c is exact.
struct SampleCurve {
  double a_scale = 0.5;
  double log_b = -1.0;
  double c = 1.5;
};

inline double sample_weight(int t, int T, const SampleCurve& curve = {}) {
  if (T < 1) throw DomainError("game length must be >= 1");
  if (t < 0 || t >= T) throw DomainError("step " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
  const double a = curve.a_scale / T;
  return curve.log_b + std::log1p(a * t / std::exp(curve.log_b)) + curve.c;
}

enum class SampleMode { Uniform, Curve };

struct SamplePoint {
  Position position;
  Move chosen_move;
  int final_result = 0;  // mover's view: +1 win, 0 draw, -1 loss
  int t = 0;
  int T = 0;
};

struct DatasetIndex {
  std::string path;
  std::vector<std::uint64_t> offsets;
  std::vector<std::uint64_t> plies;
  std::size_t size() const { return offsets.size(); }
};

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

inline bool get_u64(std::istream& in, std::uint64_t& v) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

}  // namespace detail

inline DatasetIndex write_dataset(const std::string& path, const std::vector<GameRecord>& records) {
  DatasetIndex idx;
  idx.path = path;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  std::uint64_t offset = 0;
  for (const auto& r : records) {
    const auto text = serialize_record(r) + "\n";
    idx.offsets.push_back(offset);
    idx.plies.push_back(static_cast<std::uint64_t>(r.plies()));
    out << text;
    offset += text.size();
  }
  std::ofstream side(path + ".idx", std::ios::binary);
  if (!side) throw Error("cannot write " + path + ".idx");
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::put_u64(side, idx.offsets[i]);
    detail::put_u64(side, idx.plies[i]);
  }
  return idx;
}

inline DatasetIndex load_index(const std::string& path) {
  std::ifstream in(path + ".idx", std::ios::binary);
  if (!in) throw Error("cannot read " + path + ".idx");
  DatasetIndex idx;
  idx.path = path;
  std::uint64_t off = 0, n = 0;
  while (detail::get_u64(in, off)) {
    if (!detail::get_u64(in, n)) throw FormatError("truncated index " + path + ".idx");
    if (!idx.offsets.empty() && off <= idx.offsets.back()) throw FormatError("index offsets not increasing");
    idx.offsets.push_back(off);
    idx.plies.push_back(n);
  }
  return idx;
}

inline GameRecord read_record(const DatasetIndex& idx, std::size_t i) {
  std::ifstream in(idx.path, std::ios::binary);
  if (!in) throw Error("cannot read " + idx.path);
  in.seekg(static_cast<std::streamoff>(idx.offsets.at(i)));
  std::string text, line;
  while (std::getline(in, line) && !detail::trim(line).empty()) text += line + '\n';
  return parse_record(text);
}

// Fully replayed games held in memory for sampling.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(const std::vector<GameRecord>& records) {
    for (const auto& r : records) add(r);
  }
  static Dataset load(const DatasetIndex& idx) {
    Dataset d;
    for (std::size_t i = 0; i < idx.size(); ++i) d.add(read_record(idx, i));
    return d;
  }

  void add(const GameRecord& r) {
    if (r.moves.empty()) return;
    Game g;
    g.result = r.result;
    Board b = Board::initial();
    for (const auto& text : r.moves) {
      const Move m = *parse_iccs(text);
      g.boards.push_back(b);
      g.moves.push_back(m);
      b.make(m);
    }
    games_.push_back(std::move(g));
  }

  std::size_t games() const { return games_.size(); }
  int length(std::size_t g) const { return static_cast<int>(games_[g].moves.size()); }

  SamplePoint point(std::size_t g, int t) const {
    const Game& game = games_.at(g);
    SamplePoint s;
    s.position = Position(game.boards.at(static_cast<std::size_t>(t)));
    s.position.ply = t;
    s.chosen_move = game.moves[static_cast<std::size_t>(t)];
    s.final_result = result_for(game.result, s.position.side_to_move());
    s.t = t;
    s.T = length(g);
    return s;
  }

  // Every step of every game, in order.
  std::vector<SamplePoint> all_points() const {
    std::vector<SamplePoint> out;
    for (std::size_t g = 0; g < games_.size(); ++g)
      for (int t = 0; t < length(g); ++t) out.push_back(point(g, t));
    return out;
  }

 private:
  struct Game {
    std::vector<Board> boards;
    std::vector<Move> moves;
    Outcome result = Outcome::Draw;
  };
  std::vector<Game> games_;
};

// Two-stage draw: a game uniformly, then a step within it (uniform, or
// proportional to the per-game normalized sample_weight).
class StepSampler {
 public:
  StepSampler(const Dataset& data, SampleMode mode, const SampleCurve& curve = {}) : data_(&data) {
    for (std::size_t g = 0; g < data.games(); ++g) {
      const int T = data.length(g);
      std::vector<double> w(static_cast<std::size_t>(T), 1.0);
      if (mode == SampleMode::Curve)
        for (int t = 0; t < T; ++t) w[t] = sample_weight(t, T, curve);
      steps_.emplace_back(w.begin(), w.end());
    }
  }

  std::pair<std::size_t, int> draw_index(Rng& rng) {
    std::uniform_int_distribution<std::size_t> game(0, steps_.size() - 1);
    const auto g = game(rng);
    return {g, steps_[g](rng)};
  }

  SamplePoint draw(Rng& rng) {
    const auto [g, t] = draw_index(rng);
    return data_->point(g, t);
  }

 private:
  const Dataset* data_;
  std::vector<std::discrete_distribution<int>> steps_;
};

inline std::vector<SamplePoint> draw_samples(const Dataset& data, std::size_t n, SampleMode mode, std::uint64_t seed,
                                             const SampleCurve& curve = {}) {
  if (n == 0) return {};
  if (data.games() == 0) throw DomainError("cannot sample from an empty dataset");
  StepSampler sampler(data, mode, curve);
  Rng rng(seed);
  std::vector<SamplePoint> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sampler.draw(rng));
  return out;
}

inline std::vector<SamplePoint> draw_samples(const DatasetIndex& idx, std::size_t n, SampleMode mode,
                                             std::uint64_t seed, const SampleCurve& curve = {}) {
  if (n == 0) return {};
  return draw_samples(Dataset::load(idx), n, mode, seed, curve);
}

inline Move annotate_with_searcher(const Position& p, const SearchConfig& cfg, const EvalWeights& w = {}) {
  if (terminal(p).has_value()) throw TerminalPosition();
  return search(p, cfg, w).best;
}

struct SynthConfig {
  int games = 100;
  SearchConfig search{.depth = 2};
  int random_opening_plies = 6;  // uniformly random plies before the annotator takes over
  int ply_cap = 200;
  std::uint64_t seed = 1;
};

// Desk-scale labelled games: a short random opening, then both sides play the
// searcher's annotated move. Opening moves are part of the record.
inline std::vector<GameRecord> synthesize_games(const SynthConfig& cfg) {
  std::vector<GameRecord> out;
  for (int i = 0; i < cfg.games; ++i) {
    Rng rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    GameRecord rec;
    rec.metadata["Event"] = "synthetic";
    rec.metadata["Round"] = std::to_string(i + 1);
    Position p = Position::initial();
    std::optional<Outcome> end;
    while (!(end = terminal(p, cfg.ply_cap))) {
      Move m;
      if (p.ply < cfg.random_opening_plies) {
        const auto moves = legal_moves(p);
        std::uniform_int_distribution<std::size_t> pick(0, moves.size() - 1);
        m = moves[pick(rng)];
      } else {
        SearchConfig sc = cfg.search;
        sc.repetition_aware = true;
        m = search(p, sc).best;
      }
      rec.moves.push_back(to_iccs(m));
      p = apply_move(p, m);
    }
    rec.result = *end;
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace xq
