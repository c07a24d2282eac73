#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "support/oracle.hpp"
#include "xq/models.hpp"

using namespace xq;

namespace {

NetConfig tiny_resnet(FeatureVariant f = FeatureVariant::BoardAllyEnemy) {
  NetConfig c;
  c.arch = Arch::ModResNetMicro;
  c.blocks = 1;
  c.channels = 8;
  c.head_dim = 8;
  c.features = f;
  return c;
}

NetConfig tiny_vit() {
  NetConfig c;
  c.arch = Arch::ViTMicro;
  c.layers = 1;
  c.d_model = 16;
  c.heads = 4;
  c.head_dim = 8;
  return c;
}

std::vector<NetConfig> all_tiny() {
  auto unmod = tiny_resnet();
  unmod.arch = Arch::ResNetUnmodified;
  auto fact = tiny_resnet();
  fact.policy = PolicyHead::Factorized16x90;
  auto vit_fact = tiny_vit();
  vit_fact.policy = PolicyHead::Factorized16x90;
  return {tiny_resnet(), tiny_vit(), unmod, fact, vit_fact, tiny_resnet(FeatureVariant::BoardOnly)};
}

}  // namespace

TEST(Build, ShapesAndTokens) {
  NetConfig vit;
  vit.arch = Arch::ViTMicro;
  vit.layers = 2;
  vit.d_model = 64;
  vit.heads = 4;
  Network<float> v(vit, 1);
  EXPECT_EQ(v.token_count(), 91);
  for (const auto& cfg : all_tiny()) {
    Network<float> net(cfg, 1);
    const auto out = net.forward({make_input(Position::initial(), cfg.features)});
    EXPECT_EQ(out.logits->shape, (mg::Shape{1, 8100}));
    EXPECT_EQ(out.value->shape, (mg::Shape{1, 1}));
  }
  NetConfig unmod = tiny_resnet();
  unmod.arch = Arch::ResNetUnmodified;
  EXPECT_EQ(Network<float>(unmod, 1).token_count(), 4);  // 10x9 -> 5x5 -> 2x2
  EXPECT_EQ(Network<float>(tiny_resnet(), 1).token_count(), 90);
}

TEST(Build, EntryBlocks) {
  Network<float> mod(tiny_resnet(), 1);
  auto names = mod.named_params();
  EXPECT_EQ(names[0].name, "entry.0.w");
  EXPECT_EQ(names[0].var->shape.rows, 28);  // 1x1 kernel over 28 planes
  NetConfig unmod = tiny_resnet();
  unmod.arch = Arch::ResNetUnmodified;
  Network<float> u(unmod, 1);
  EXPECT_EQ(u.named_params()[0].var->shape.rows, 49 * 28);  // 7x7 kernel
}

TEST(Build, SeedDeterminism) {
  for (const auto& cfg : all_tiny()) {
    Network<float> a(cfg, 7), b(cfg, 7), c(cfg, 8);
    const auto pa = a.named_params(), pb = b.named_params(), pc = c.named_params();
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      EXPECT_EQ(pa[i].var->value, pb[i].var->value);
      differs = differs || pa[i].var->value != pc[i].var->value;
    }
    EXPECT_TRUE(differs);
  }
}

TEST(Build, PlaneMismatchThrows) {
  Network<float> net(tiny_resnet(), 1);
  EXPECT_THROW(net.forward({make_input(Position::initial(), FeatureVariant::BoardOnly)}), ShapeMismatch);
  NetConfig bad = tiny_vit();
  bad.heads = 3;
  EXPECT_THROW(Network<float>(bad, 1), ConfigError);
}

TEST(Build, ConfigJsonRoundTripAndStrictness) {
  for (const auto& cfg : all_tiny()) EXPECT_EQ(nlohmann::json(cfg).get<NetConfig>(), cfg);
  EXPECT_THROW(nlohmann::json({{"arch", "resnet50"}}).get<NetConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"chanels", 3}}).get<NetConfig>(), ConfigError);
}

TEST(Infer, MaskingOverRandomPositions) {
  for (const auto& cfg : all_tiny()) {
    Network<float> net(cfg, 3);
    for (const auto& p : oracle::random_positions(60, 11, 120)) {
      const auto mask = oriented_mask(p);
      const auto inf = infer(net, p);
      double s = 0;
      for (int i = 0; i < kActions; ++i) {
        if (!mask[i]) EXPECT_EQ(inf.probs[i], 0.0);
        s += inf.probs[i];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
      EXPECT_GE(inf.value, -1.0f);
      EXPECT_LE(inf.value, 1.0f);
      for (float l : inf.logits) EXPECT_TRUE(std::isfinite(l));
    }
  }
}

TEST(Infer, SingleLegalMoveHasAllMass) {
  LegalityMask m;
  m.set(1234);
  std::vector<float> logits(kActions, 0.0f);
  logits[1234] = -50;
  const auto p = masked_distribution(logits, m, 1.0);
  EXPECT_EQ(p[1234], 1.0);
}

TEST(Infer, EqualLogitsAreUniform) {
  const auto mask = legality_mask(Position::initial());
  std::vector<float> logits(kActions, 0.3f);
  const auto p = masked_distribution(logits, mask, 1.0);
  for (int i = 0; i < kActions; ++i)
    if (mask[i]) EXPECT_NEAR(p[i], 1.0 / 44, 1e-6);
}

TEST(Infer, ValueRangeOnRandomInputs) {
  Network<float> net(tiny_resnet(), 5);
  Rng rng(5);
  std::vector<NetInput> batch;
  for (int i = 0; i < 1000; ++i) {
    NetInput in{{28, std::vector<float>(90 * 28)}, std::vector<int>(90, -1)};
    for (auto& v : in.obs.data) v = static_cast<float>(unit_draw(rng) * 20 - 10);
    batch.push_back(std::move(in));
  }
  mg::NoGrad off;
  const auto out = net.forward(batch);
  for (float v : out.value->value) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Infer, BatchMatchesSingle) {
  for (const auto& cfg : all_tiny()) {
    Network<float> net(cfg, 9);
    const auto ps = oracle::random_positions(5, 13, 60);
    std::vector<NetInput> in;
    std::vector<LegalityMask> masks;
    for (const auto& p : ps) {
      in.push_back(make_input(p, cfg.features));
      masks.push_back(oriented_mask(p));
    }
    const auto batch = infer_batch(net, in, masks);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto one = infer(net, ps[i]);
      for (int k = 0; k < kActions; ++k) EXPECT_NEAR(one.logits[k], batch[i].logits[k], 1e-5);
      EXPECT_NEAR(one.value, batch[i].value, 1e-5);
    }
  }
}

TEST(Sampling, TwoEqualMovesSplitEvenly) {
  LegalityMask m;
  m.set(10);
  m.set(20);
  std::vector<float> logits(kActions, 0.0f);
  auto p = masked_distribution(logits, m, 1.0);
  Rng rng(1);
  int first = 0;
  for (int i = 0; i < 10000; ++i) first += sample_index(p, rng) == 10;
  EXPECT_NEAR(first / 10000.0, 0.5, 0.02);
  logits[10] = 1.0f;
  p = masked_distribution(logits, m, 1.0);
  EXPECT_NEAR(p[10], 0.7310585786, 1e-9);
  first = 0;
  for (int i = 0; i < 10000; ++i) first += sample_index(p, rng) == 10;
  EXPECT_NEAR(first / 10000.0, 0.7311, 0.02);
}

TEST(Sampling, ShiftInvarianceAndTemperatureMonotonicity) {
  Rng rng(3);
  const auto mask = legality_mask(Position::initial());
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> logits(kActions), shifted(kActions);
    for (int i = 0; i < kActions; ++i) {
      logits[i] = static_cast<float>(unit_draw(rng) * 6 - 3);
      shifted[i] = logits[i] + 12.5f;
    }
    const auto a = masked_distribution(logits, mask, 1.0), b = masked_distribution(shifted, mask, 1.0);
    for (int i = 0; i < kActions; ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
    double prev = -1;
    for (double tau : {0.0, 0.1, 0.5, 1.0, 2.0, 5.0}) {
      const double h = entropy(masked_distribution(logits, mask, tau));
      EXPECT_LE(prev, h + 1e-12);
      prev = h;
    }
    // Argmax is unchanged by rescaling the logits by any positive factor.
    std::vector<float> scaled(kActions);
    for (int i = 0; i < kActions; ++i) scaled[i] = logits[i] * 3.7f;
    EXPECT_EQ(masked_distribution(logits, mask, 0.0), masked_distribution(scaled, mask, 0.0));
  }
}

TEST(Sampling, ZeroTemperatureIsArgmax) {
  Network<float> net(tiny_resnet(), 2);
  for (const auto& p : oracle::random_positions(30, 17, 100)) {
    const auto inf = infer(net, p);
    Move best{};
    double bl = -1e30;
    for (Move m : legal_moves(p)) {
      const double l = inf.logits[oriented_index(move_to_index(m), p.side_to_move())];
      if (l > bl) {
        bl = l;
        best = m;
      }
    }
    Rng rng(1);
    EXPECT_EQ(sample_move(net, p, 0.0, rng), best);
    EXPECT_TRUE(is_legal(p, sample_move(net, p, 1.0, rng)));
  }
  Rng rng(1);
  EXPECT_THROW(sample_move(net, Position::from_fen("4k3R/R8/9/9/9/9/9/9/9/3K5 b"), 1.0, rng), TerminalPosition);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  for (const auto& cfg : all_tiny()) {
    Network<float> net(cfg, 21);
    std::stringstream buf;
    save_checkpoint(net, buf);
    auto loaded = load_checkpoint(buf);
    EXPECT_EQ(loaded.config(), cfg);
    for (const auto& p : oracle::random_positions(5, 23, 80)) {
      const auto a = infer(net, p), b = infer(loaded, p);
      EXPECT_EQ(a.logits, b.logits);
      EXPECT_EQ(a.value, b.value);
    }
    EXPECT_EQ(probe_hash(net), probe_hash(loaded));
  }
}

TEST(Checkpoint, Errors) {
  Network<float> net(tiny_resnet(), 21);
  std::stringstream buf;
  save_checkpoint(net, buf);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 4), "XQNP");
  for (std::size_t cut : {std::size_t(2), std::size_t(10), bytes.size() / 2, bytes.size() - 1}) {
    std::stringstream t(bytes.substr(0, cut));
    EXPECT_THROW(load_checkpoint(t), FormatError) << cut;
  }
  std::string bad = bytes;
  bad[0] = 'Y';
  std::stringstream b1(bad);
  EXPECT_THROW(load_checkpoint(b1), FormatError);
  bad = bytes;
  bad[4] = 9;
  std::stringstream b2(bad);
  EXPECT_THROW(load_checkpoint(b2), FormatError);
  bad = bytes;
  bad[bytes.size() - 1] ^= 0x40;  // last parameter (value bias) becomes 2.0
  std::stringstream b3(bad);
  EXPECT_THROW(load_checkpoint(b3), FormatError);

  const auto other = tiny_resnet(FeatureVariant::BoardOnly);
  std::stringstream b4(bytes);
  EXPECT_THROW(load_checkpoint(b4, &other), ManifestMismatch);
}

TEST(Checkpoint, CloneIsIndependent) {
  Network<float> net(tiny_resnet(), 4);
  auto copy = net.clone();
  EXPECT_EQ(probe_hash(net), probe_hash(copy));
  copy.params()[0]->value[0] += 1.0f;
  EXPECT_NE(probe_hash(net), probe_hash(copy));
}

TEST(ViT, PermutingTokensWithPositionsPermutesOutputs) {
  Network<double> net(tiny_vit(), 31);
  mg::Var<double> pos;
  for (auto& p : net.named_params())
    if (p.name == "pos") pos = p.var;
  ASSERT_TRUE(pos);
  const auto p = oracle::random_positions(1, 37, 40)[0];
  NetInput in = make_input(p, FeatureVariant::BoardAllyEnemy);
  std::vector<int> perm(90);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), Rng(5));
  mg::NoGrad off;
  const auto base = net.forward({in});
  // Cell f moves to row perm[f], both in the input and in the positional table.
  NetInput moved = in;
  const int planes = in.obs.planes, d = pos->shape.cols;
  const auto old_pos = pos->value;
  for (int f = 0; f < 90; ++f) {
    std::copy_n(in.obs.data.begin() + f * planes, planes, moved.obs.data.begin() + perm[f] * planes);
    std::copy_n(old_pos.begin() + f * d, d, pos->value.begin() + perm[f] * d);
  }
  const auto out = net.forward({moved});
  EXPECT_NEAR(out.value->value[0], base.value->value[0], 1e-12);
  for (int f = 0; f < 90; ++f)
    for (int t = 0; t < 90; ++t)
      EXPECT_NEAR(out.logits->value[perm[f] * 90 + perm[t]], base.logits->value[f * 90 + t], 1e-12);
}
