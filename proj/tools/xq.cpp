#include <CLI11.hpp>

#include <iostream>

#include "xq/cli.hpp"

using namespace xq;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON run configuration");
  app->add_option("--seed", c.seed, "override the configuration seed");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? parse_config(nlohmann::json::object()) : load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Xiangqi engine: rules, data, training, evaluation"};
  app.require_subcommand(1);

  std::string fen(kStartFen);
  int depth = 1;
  std::optional<std::uint64_t> expect;
  auto* perft_cmd = app.add_subcommand("perft", "count leaf nodes of the legal move tree");
  perft_cmd->add_option("--fen", fen);
  perft_cmd->add_option("--depth", depth);
  perft_cmd->add_option("--expect", expect, "exit 1 unless the count matches");

  std::vector<std::string> inputs;
  std::string out_path;
  auto* ingest_cmd = app.add_subcommand("ingest", "parse, clean and index game records");
  ingest_cmd->add_option("paths", inputs)->required();
  ingest_cmd->add_option("--out", out_path)->required();

  Common synth_c;
  auto* synth_cmd = app.add_subcommand("synth", "generate alpha-beta annotated games");
  add_common(synth_cmd, synth_c);
  synth_cmd->add_option("--out", out_path)->required();

  Common sl_c;
  cli::TrainOptions sl_opt;
  std::optional<int> sl_stop;
  auto* sl_cmd = app.add_subcommand("train-sl", "supervised training");
  add_common(sl_cmd, sl_c);
  sl_cmd->add_option("--out", sl_opt.out_dir)->required();
  sl_cmd->add_flag("--resume", sl_opt.resume);
  sl_cmd->add_option("--stop-after", sl_stop, "stop at the first checkpoint at or after this step");

  Common rl_c;
  cli::TrainOptions rl_opt;
  std::optional<int> rl_stop;
  std::string init;
  auto* rl_cmd = app.add_subcommand("train-rl", "PPO self-play training against the opponent pool");
  add_common(rl_cmd, rl_c);
  rl_cmd->add_option("--init", init, "supervised checkpoint")->required();
  rl_cmd->add_option("--out", rl_opt.out_dir)->required();
  rl_cmd->add_flag("--resume", rl_opt.resume);
  rl_cmd->add_option("--stop-after", rl_stop, "stop after this iteration");

  Common arena_c;
  std::string agent_a, agent_b;
  auto* arena_cmd = app.add_subcommand("arena", "play a color-balanced match");
  add_common(arena_cmd, arena_c);
  arena_cmd->add_option("a", agent_a, "random | alphabeta:<depth> | checkpoint:<path>")->required();
  arena_cmd->add_option("b", agent_b)->required();

  Common ucci_c;
  std::string ucci_ckpt;
  double ucci_tau = 0;
  std::optional<int> ucci_depth;
  auto* ucci_cmd = app.add_subcommand("ucci", "engine protocol on standard input/output");
  add_common(ucci_cmd, ucci_c);
  ucci_cmd->add_option("--checkpoint", ucci_ckpt);
  ucci_cmd->add_option("--tau", ucci_tau);
  ucci_cmd->add_option("--alphabeta", ucci_depth, "answer go with alpha-beta at this depth");

  std::optional<std::string> inject;
  auto* grad_cmd = app.add_subcommand("gradcheck", "compare analytic and numeric gradients of every layer");
  grad_cmd->add_option("--inject-sign-flip", inject, "flip the sign of one backward rule (op name)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : cli::kBadInput;
  }

  cli::install_signal_handlers();
  try {
    if (*perft_cmd) return cli::cmd_perft(fen, depth, expect, std::cout, std::cerr);
    if (*ingest_cmd) return cli::cmd_ingest(inputs, out_path, std::cout, std::cerr);
    if (*synth_cmd) return cli::cmd_synth(resolve(synth_c), out_path, std::cout);
    if (*sl_cmd) {
      sl_opt.stop_after = sl_stop;
      return cli::cmd_train_sl(resolve(sl_c), sl_opt, std::cout, std::cerr);
    }
    if (*rl_cmd) {
      rl_opt.stop_after = rl_stop;
      return cli::cmd_train_rl(resolve(rl_c), init, rl_opt, std::cout, std::cerr);
    }
    if (*arena_cmd) return cli::cmd_arena(agent_a, agent_b, resolve(arena_c), std::cout, std::cerr);
    if (*ucci_cmd) {
      const RunConfig cfg = resolve(ucci_c);
      std::shared_ptr<const Network<float>> net;
      if (!ucci_ckpt.empty()) net = std::make_shared<const Network<float>>(load_checkpoint(ucci_ckpt));
      std::optional<SearchConfig> search;
      if (ucci_depth || !net) {
        search = cfg.search;
        if (ucci_depth) search->depth = *ucci_depth;
      }
      cli::UcciSession session(net, ucci_tau, search, cfg.seed);
      session.run(std::cin, std::cout);
      return cli::kOk;
    }
    if (*grad_cmd) return cli::cmd_gradcheck(inject, std::cout, std::cerr);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cli::kBadInput;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kBadInput;
  }
  return cli::kBadInput;
}
