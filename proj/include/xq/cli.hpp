#pragma once

// Command implementations behind the `xq` executable. Each command writes to
// the given streams and returns the process exit code: 0 success, 1 a check
// failed, 2 bad input (usage, config, missing or corrupt files).

#include <atomic>
#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xq/config.hpp"
#include "xq/micrograd/gradcheck.hpp"

#ifndef XQ_GIT_DESCRIBE
#define XQ_GIT_DESCRIBE "unknown"
#endif

namespace xq::cli {

namespace fs = std::filesystem;

enum Exit : int { kOk = 0, kFail = 1, kBadInput = 2, kInterrupted = 130 };

// Set from a signal handler; long-running commands stop at the next
// checkpoint boundary and finalize their manifest.
inline std::atomic<bool> interrupted{false};

inline void install_signal_handlers() {
  auto on_signal = [](int) { interrupted = true; };
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
}

inline void write_atomically(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out << text;
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

// Config snapshot, seed, build version, timestamps and artifact paths of one
// run; rewritten atomically whenever it changes.
class RunManifest {
 public:
  RunManifest(fs::path dir, std::string command, const RunConfig& cfg, nlohmann::json args)
      : path_(std::move(dir) / "manifest.json") {
    j_ = {{"command", std::move(command)},
          {"args", std::move(args)},
          {"seed", cfg.seed},
          {"git_describe", XQ_GIT_DESCRIBE},
          {"config", to_json(cfg)},
          {"started_at", utc_now()},
          {"finished_at", nullptr},
          {"status", "running"},
          {"artifacts", nlohmann::json::object()}};
    write();
  }
  void artifact(const std::string& name, const fs::path& p) { j_["artifacts"][name] = p.string(); }
  void finish(const std::string& status) {
    j_["status"] = status;
    j_["finished_at"] = utc_now();
    write();
  }
  void write() const { write_atomically(path_, j_.dump(2) + "\n"); }

 private:
  fs::path path_;
  nlohmann::json j_;
};

// Keeps the JSON-lines rows whose `key` is <= last; used when resuming so the
// file matches an uninterrupted run.
inline void truncate_metrics(const fs::path& path, const char* key, int last) {
  std::ifstream in(path);
  if (!in) return;
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains(key) || j[key].get<int>() > last) break;
    kept += line + "\n";
  }
  in.close();
  write_atomically(path, kept);
}

// ---------------------------------------------------------------- perft

inline int cmd_perft(const std::string& fen, int depth, std::optional<std::uint64_t> expect, std::ostream& out,
                     std::ostream& err) {
  Position p;
  try {
    p = Position::from_fen(fen);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  }
  if (depth < 0) {
    err << "error: depth must be >= 0\n";
    return kBadInput;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto n = perft(p, depth);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "perft " << depth << " " << n << "\n";
  err << "nodes/sec " << static_cast<std::uint64_t>(secs > 0 ? n / secs : 0.0) << "\n";
  if (expect && *expect != n) {
    err << "mismatch: expected " << *expect << ", got " << n << "\n";
    return kFail;
  }
  return kOk;
}

// ---------------------------------------------------------------- data

inline int cmd_ingest(const std::vector<std::string>& paths, const std::string& out_path, std::ostream& out,
                      std::ostream& err) {
  Cleaner cleaner;
  std::vector<GameRecord> kept;
  std::size_t parsed = 0, failed = 0, files_ok = 0;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      err << path << ": cannot read\n";
      continue;
    }
    std::stringstream buf;
    buf << in.rdbuf();
    std::size_t ok_here = 0;
    const auto docs = split_documents(buf.str());
    for (std::size_t i = 0; i < docs.size(); ++i) {
      try {
        auto rec = parse_record(docs[i]);
        ++parsed;
        ++ok_here;
        if (cleaner.accept(rec)) kept.push_back(std::move(rec));
      } catch (const Error& e) {
        ++failed;
        err << path << ": record " << i << ": " << e.what() << "\n";
      }
    }
    if (ok_here > 0 || docs.empty()) ++files_ok;
  }
  const auto& st = cleaner.stats();
  nlohmann::ordered_json j{{"files", paths.size()},
                           {"parsed", parsed},
                           {"failed", failed},
                           {"dropped_short", st.dropped_short},
                           {"dropped_disconnect", st.dropped_disconnect},
                           {"kept", st.kept}};
  if (files_ok == 0) {
    out << j.dump() << "\n";
    err << "error: no input file could be ingested\n";
    return kFail;
  }
  try {
    write_dataset(out_path, kept);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  }
  out << j.dump() << "\n";
  return kOk;
}

inline std::vector<GameRecord> load_records(const std::string& path) {
  const auto idx = load_index(path);
  std::vector<GameRecord> out;
  for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(read_record(idx, i));
  return out;
}

inline std::vector<GameRecord> training_records(const RunConfig& cfg) {
  return cfg.data.dataset.empty() ? synthesize_games(cfg.synth_config()) : load_records(cfg.data.dataset);
}

inline int cmd_synth(const RunConfig& cfg, const std::string& out_path, std::ostream& out) {
  const auto recs = synthesize_games(cfg.synth_config());
  write_dataset(out_path, recs);
  std::size_t plies = 0;
  for (const auto& r : recs) plies += r.moves.size();
  out << nlohmann::ordered_json{{"games", recs.size()}, {"plies", plies}}.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- training

struct TrainOptions {
  fs::path out_dir;
  bool resume = false;
  std::optional<int> stop_after;  // stop at the first checkpoint boundary at or after this step
};

inline void save_state_file(const SLState& st, const fs::path& path) {
  std::ostringstream s;
  save_state(st, s);
  write_atomically(path, s.str());
}

inline SLState load_state_file(const fs::path& path, const mg::AdamConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  return load_state(in, cfg);
}

inline int cmd_train_sl(const RunConfig& cfg, const TrainOptions& opt, std::ostream& out, std::ostream& err) {
  fs::create_directories(opt.out_dir);
  const fs::path model = opt.out_dir / "model.xqnp", state_path = opt.out_dir / "trainer.state",
                 metrics = opt.out_dir / "metrics.jsonl";
  write_atomically(opt.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  RunManifest manifest(opt.out_dir, "train-sl", cfg, {{"resume", opt.resume}});
  manifest.artifact("checkpoint", model);
  manifest.artifact("trainer_state", state_path);
  manifest.artifact("metrics", metrics);
  manifest.artifact("config", opt.out_dir / "config.json");
  manifest.write();

  const SLConfig slc = cfg.sl_config();
  const auto records = training_records(cfg);
  SLSplit split;
  std::vector<SamplePoint> points;
  if (cfg.data.distinct_points > 0) {
    points = distinct_points(Dataset(records).all_points(), static_cast<std::size_t>(cfg.data.distinct_points));
    if (points.empty()) throw DomainError("training set is empty");
  } else {
    split = split_games(records, slc.eval_fraction, slc.seed);
  }

  Network<float> net(cfg.net(), cfg.seed);
  SLState st;
  st.adam.cfg.lr = slc.lr;
  if (opt.resume && fs::exists(model) && fs::exists(state_path)) {
    const auto expected = cfg.net();
    net = load_checkpoint(model.string(), &expected);
    st = load_state_file(state_path, st.adam.cfg);
    truncate_metrics(metrics, "step", st.step);
  } else {
    write_atomically(metrics, "");
    save_checkpoint(net, model.string());
    save_state_file(st, state_path);
  }

  std::ofstream log(metrics, std::ios::app);
  nlohmann::ordered_json last;
  auto sink = [&](const SLMetrics& m) {
    last = to_json_line(m);
    log << last.dump() << "\n";
    log.flush();
  };
  // Chunks end on metrics boundaries, so chunked and uninterrupted runs log
  // identical rows.
  while (st.step < slc.steps) {
    SLConfig chunk = slc;
    chunk.steps = std::min(slc.steps, (st.step / slc.log_every + 1) * slc.log_every);
    if (cfg.data.distinct_points > 0)
      train_sl(net, chunk, points, st, sink);
    else
      train_sl(net, chunk, split, st, sink);
    save_checkpoint(net, model.string());
    save_state_file(st, state_path);
    if (interrupted || (opt.stop_after && st.step >= *opt.stop_after && st.step < slc.steps)) {
      manifest.finish("interrupted");
      err << "stopped at step " << st.step << "\n";
      return interrupted ? kInterrupted : kOk;
    }
  }
  manifest.finish("complete");
  out << (last.is_null() ? nlohmann::ordered_json{{"step", st.step}} : last).dump() << "\n";
  return kOk;
}

inline int cmd_train_rl(const RunConfig& cfg, const std::string& init, const TrainOptions& opt, std::ostream& out,
                        std::ostream& err) {
  const auto expected = cfg.net();
  if (!fs::exists(init)) {
    err << "error: missing checkpoint " << init << "\n";
    return kBadInput;
  }
  fs::create_directories(opt.out_dir / "pool");
  const fs::path model = opt.out_dir / "model.xqnp", state_path = opt.out_dir / "trainer.state",
                 metrics = opt.out_dir / "metrics.jsonl", pool_manifest = opt.out_dir / "pool.json",
                 seed_ck = opt.out_dir / "pool" / "seed.xqnp";
  write_atomically(opt.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  RunManifest manifest(opt.out_dir, "train-rl", cfg, {{"init", init}, {"resume", opt.resume}});
  for (auto [name, p] : {std::pair{"checkpoint", model}, {"trainer_state", state_path}, {"metrics", metrics},
                         {"pool", pool_manifest}, {"config", opt.out_dir / "config.json"}})
    manifest.artifact(name, p);
  manifest.write();

  const RLConfig rlc = cfg.rl_config();
  const auto book = cfg.rl_openings.book();
  Network<float> net = load_checkpoint(init, &expected);
  SLState st;
  st.adam.cfg.lr = rlc.ppo.lr;
  std::unique_ptr<OpponentPool> pool;
  if (opt.resume && fs::exists(model) && fs::exists(state_path) && fs::exists(pool_manifest)) {
    net = load_checkpoint(model.string(), &expected);
    st = load_state_file(state_path, st.adam.cfg);
    pool = std::make_unique<OpponentPool>(
        OpponentPool::load_manifest(pool_manifest.string(), cfg.pool, (opt.out_dir / "pool").string(), &expected));
    truncate_metrics(metrics, "iteration", st.step);
  } else {
    save_checkpoint(net, seed_ck.string());
    pool = std::make_unique<OpponentPool>(net, seed_ck.string(), cfg.pool, (opt.out_dir / "pool").string());
    write_atomically(metrics, "");
    save_checkpoint(net, model.string());
    save_state_file(st, state_path);
    pool->save_manifest(pool_manifest.string());
  }

  std::ofstream log(metrics, std::ios::app);
  std::string last;
  while (st.step < rlc.iterations) {
    RLConfig one = rlc;
    one.iterations = st.step + 1;
    rl_train(net, one, *pool, book, st, [&](const RLMetrics& m) {
      last = to_json_line(m);
      log << last << "\n";
      log.flush();
    });
    save_checkpoint(net, model.string());
    save_state_file(st, state_path);
    pool->save_manifest(pool_manifest.string());
    if (interrupted || (opt.stop_after && st.step >= *opt.stop_after && st.step < rlc.iterations)) {
      manifest.finish("interrupted");
      err << "stopped at iteration " << st.step << "\n";
      return interrupted ? kInterrupted : kOk;
    }
  }
  manifest.finish("complete");
  out << (last.empty() ? nlohmann::json{{"iteration", st.step}}.dump() : last) << "\n";
  return kOk;
}

// ---------------------------------------------------------------- arena

// "random", "alphabeta:<depth>" or "checkpoint:<path>".
inline std::unique_ptr<Agent> make_agent(const std::string& spec, const SearchConfig& search) {
  if (spec == "random") return std::make_unique<RandomAgent>();
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon), arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  if (kind == "alphabeta") {
    SearchConfig s = search;
    if (!arg.empty()) {
      try {
        s.depth = std::stoi(arg);
      } catch (const std::exception&) {
        throw ConfigError("bad alpha-beta depth in '" + spec + "'");
      }
    }
    if (s.depth < 1) throw ConfigError("alpha-beta depth must be >= 1");
    return make_baseline_agent(s);
  }
  if (kind == "checkpoint" && !arg.empty()) {
    if (!fs::exists(arg)) throw FormatError("missing checkpoint " + arg);
    auto net = std::make_shared<const Network<float>>(load_checkpoint(arg));
    return std::make_unique<NetAgent>(net, spec);
  }
  throw ConfigError("unknown agent '" + spec + "' (expected random, alphabeta:<depth> or checkpoint:<path>)");
}

inline int cmd_arena(const std::string& a, const std::string& b, const RunConfig& cfg, std::ostream& out,
                     std::ostream& err) {
  std::unique_ptr<Agent> agent_a, agent_b;
  try {
    agent_a = make_agent(a, cfg.search);
    agent_b = make_agent(b, cfg.search);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  }
  const auto report = play_match(*agent_a, *agent_b, cfg.match_config());
  nlohmann::ordered_json j = report;
  out << j.dump() << "\n";
  err << report.agent_a << " vs " << report.agent_b << ": " << format_win_draw(report) << "\n";
  return kOk;
}

// ---------------------------------------------------------------- ucci

// Line-oriented engine protocol subset: ucci, isready, position, go, quit.
class UcciSession {
 public:
  UcciSession(std::shared_ptr<const Network<float>> net, double tau, std::optional<SearchConfig> search,
              std::uint64_t seed)
      : net_(std::move(net)), tau_(tau), search_(search), rng_(seed) {
    if (!net_ && !search_) throw ConfigError("ucci needs a checkpoint or an alpha-beta configuration");
  }

  // Returns false after "quit".
  bool handle(const std::string& line, std::ostream& out) {
    std::istringstream in(line);
    std::string cmd;
    if (!(in >> cmd)) return true;
    if (cmd == "ucci") {
      out << "id name xq\nucciok\n";
    } else if (cmd == "isready") {
      out << "readyok\n";
    } else if (cmd == "position") {
      position(in, out);
    } else if (cmd == "go") {
      go(in, out);
    } else if (cmd == "quit") {
      return false;
    } else {
      out << "info string unknown command " << cmd << "\n";
    }
    out.flush();
    return true;
  }

  void run(std::istream& in, std::ostream& out) {
    std::string line;
    while (std::getline(in, line))
      if (!handle(line, out)) break;
  }

  const Position& position() const { return pos_; }

 private:
  void position(std::istringstream& in, std::ostream& out) {
    std::string word;
    in >> word;
    std::string fen;
    if (word == "startpos") {
      fen = std::string(kStartFen);
    } else if (word == "fen") {
      std::string tok;
      while (in >> tok && tok != "moves") fen += (fen.empty() ? "" : " ") + tok;
      word = tok;
    } else {
      out << "info string expected startpos or fen\n";
      return;
    }
    Position p;
    try {
      p = Position::from_fen(fen);
    } catch (const Error& e) {
      out << "info string bad fen: " << e.what() << "\n";
      return;
    }
    if (word != "moves" && !(in >> word && word == "moves")) {
      pos_ = p;
      return;
    }
    std::string mv;
    for (int k = 0; in >> mv; ++k) {
      const auto m = parse_iccs(mv);
      if (!m || !is_legal(p, *m)) {
        out << "info string illegal move at " << k << "\n";
        break;
      }
      p = apply_move(p, *m);
    }
    pos_ = p;
  }

  void go(std::istringstream& in, std::ostream& out) {
    std::optional<int> depth;
    std::string tok;
    while (in >> tok)
      if (tok == "depth") {
        int d = 0;
        if (in >> d && d > 0) depth = d;
      }
    if (legal_moves(pos_).empty()) {
      out << "nobestmove\n";
      return;
    }
    Move m;
    if (search_ && (!net_ || depth)) {
      SearchConfig s = *search_;
      if (depth) s.depth = *depth;
      s.repetition_aware = true;
      m = search(pos_, s).best;
    } else {
      m = sample_move(*net_, pos_, tau_, rng_);
    }
    out << "bestmove " << to_iccs(m) << "\n";
  }

  std::shared_ptr<const Network<float>> net_;
  double tau_;
  std::optional<SearchConfig> search_;
  Rng rng_;
  Position pos_ = Position::initial();
};

// ---------------------------------------------------------------- gradcheck

inline int cmd_gradcheck(std::optional<std::string> inject, std::ostream& out, std::ostream& err, int seeds = 3) {
  std::optional<mg::FaultInjection> fault;
  if (inject) {
    const auto op = mg::op_from_name(*inject);
    if (!op || *op == mg::Op::Leaf) {
      err << "error: unknown op '" << *inject << "'\n";
      return kBadInput;
    }
    fault.emplace(*op);
  }
  std::vector<std::string> failing;
  for (const auto& c : mg::default_gradcheck_suite()) {
    double worst = 0;
    for (int s = 1; s <= seeds; ++s) worst = std::max(worst, mg::grad_check(c.spec, static_cast<std::uint64_t>(s)));
    const bool ok = worst < c.tolerance;
    out << std::left << std::setw(48) << mg::describe(c.spec) << " max_rel_error=" << std::scientific
        << std::setprecision(3) << worst << " tol=" << c.tolerance << std::defaultfloat << (ok ? " ok" : " FAIL")
        << "\n";
    if (!ok) failing.push_back(mg::describe(c.spec));
  }
  if (!failing.empty()) {
    for (const auto& f : failing) err << "gradient check failed: " << f << "\n";
    return kFail;
  }
  return kOk;
}

}  // namespace xq::cli
