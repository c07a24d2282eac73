#pragma once

// Policy-value networks: micro ResNet (modified entry), unmodified ResNet
// entry for ablations, and a per-cell-token ViT. Outputs are in the
// observation (mover-relative) frame.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xq/agent.hpp"
#include "xq/encoding.hpp"
#include "xq/micrograd/layers.hpp"

namespace xq {

enum class Arch { ModResNetMicro, ViTMicro, ResNetUnmodified };
enum class PolicyHead { Flat8100, Factorized16x90 };

struct NetConfig {
  Arch arch = Arch::ModResNetMicro;
  int blocks = 4;     // ResNet variants
  int channels = 64;  // ResNet variants
  int layers = 4;     // ViT
  int d_model = 128;  // ViT
  int heads = 4;      // ViT
  int head_dim = 32;  // from/to projection width of the flat policy head
  FeatureVariant features = FeatureVariant::BoardAllyEnemy;
  PolicyHead policy = PolicyHead::Flat8100;
  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(Arch, {{Arch::ModResNetMicro, "mod_resnet_micro"},
                                    {Arch::ViTMicro, "vit_micro"},
                                    {Arch::ResNetUnmodified, "resnet_unmodified"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PolicyHead, {{PolicyHead::Flat8100, "flat8100"},
                                          {PolicyHead::Factorized16x90, "factorized16x90"}})
NLOHMANN_JSON_SERIALIZE_ENUM(FeatureVariant, {{FeatureVariant::BoardOnly, "board"},
                                              {FeatureVariant::BoardAlly, "board_ally"},
                                              {FeatureVariant::BoardAllyEnemy, "board_ally_enemy"}})

namespace detail {

// Strict enum lookup: the json macros silently map unknown strings to the
// first enumerator.
template <class E>
E enum_from(const nlohmann::json& j, const char* key) {
  const E e = j.get<E>();
  if (nlohmann::json(e) != j) throw ConfigError(std::string("unknown value for ") + key + ": " + j.dump());
  return e;
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = nlohmann::json{{"arch", c.arch},       {"blocks", c.blocks},     {"channels", c.channels},
                     {"layers", c.layers},   {"d_model", c.d_model},   {"heads", c.heads},
                     {"head_dim", c.head_dim}, {"features", c.features}, {"policy_head", c.policy}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
  detail::reject_unknown(j, {"arch", "blocks", "channels", "layers", "d_model", "heads", "head_dim", "features", "policy_head"},
                         "model");
  c = NetConfig{};
  if (j.contains("arch")) c.arch = detail::enum_from<Arch>(j["arch"], "arch");
  if (j.contains("features")) c.features = detail::enum_from<FeatureVariant>(j["features"], "features");
  if (j.contains("policy_head")) c.policy = detail::enum_from<PolicyHead>(j["policy_head"], "policy_head");
  for (auto [key, field] : {std::pair{"blocks", &c.blocks}, {"channels", &c.channels}, {"layers", &c.layers},
                            {"d_model", &c.d_model}, {"heads", &c.heads}, {"head_dim", &c.head_dim}})
    if (j.contains(key)) *field = j[key].get<int>();
}

inline void validate(const NetConfig& c) {
  auto need = [](bool ok, const std::string& why) {
    if (!ok) throw ConfigError("model: " + why);
  };
  need(c.head_dim > 0, "head_dim must be positive");
  if (c.arch == Arch::ViTMicro) {
    need(c.layers >= 0 && c.d_model > 0 && c.heads > 0, "ViT sizes must be positive");
    need(c.d_model % c.heads == 0, "d_model must be divisible by heads");
  } else {
    need(c.blocks >= 0 && c.channels > 0, "ResNet sizes must be positive");
  }
}

// One forward pass worth of outputs: logits [B, 8100], value [B, 1] in [-1, 1].
template <class T>
struct NetOutput {
  mg::Var<T> logits;
  mg::Var<T> value;
};

// Per-sample input: observation plus, for the factorized head, the piece slot
// of each mover-relative cell (-1 when the cell holds no mover piece).
struct NetInput {
  Observation obs;
  std::vector<int> slots;
};

inline std::vector<int> cell_slots(const Position& p) {
  std::vector<int> slots(kSquares, -1);
  const auto s = piece_slots(p);
  for (std::size_t i = 0; i < s.size(); ++i) slots[oriented(s[i], p.side_to_move())] = static_cast<int>(i);
  return slots;
}

inline NetInput make_input(const Position& p, FeatureVariant v) { return {encode(p, v), cell_slots(p)}; }

template <class T>
class Network {
 public:
  Network(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg);
    mg::InitRng rng(seed);
    const int planes = plane_count(cfg.features);
    using namespace mg;
    std::vector<LayerSpec> entry, trunk;
    if (cfg.arch == Arch::ViTMicro) {
      const int d = cfg.d_model;
      entry = {Dense{planes, d}};
      pos_ = normal_init<T>({kSquares, d}, 0.02, rng);
      readout_ = normal_init<T>({1, d}, 0.02, rng);
      for (int l = 0; l < cfg.layers; ++l) {
        trunk.push_back(Residual{{LayerNorm{d}, MultiHeadAttention{d, cfg.heads}}});
        trunk.push_back(Residual{{LayerNorm{d}, Dense{d, 2 * d}, GELU{}, Dense{2 * d, d}}});
      }
      trunk.push_back(LayerNorm{d});
      width_ = d;
    } else {
      const int c = cfg.channels;
      if (cfg.arch == Arch::ModResNetMicro)
        entry = {Conv2D{1, planes, c, 1}, LayerNorm{c}, ReLU{}};
      else
        entry = {Conv2D{7, planes, c, 2}, LayerNorm{c}, ReLU{}, MaxPool2D{}};
      for (int b = 0; b < cfg.blocks; ++b) {
        trunk.push_back(Residual{{Conv2D{3, c, c, 1}, LayerNorm{c}, ReLU{}, Conv2D{3, c, c, 1}, LayerNorm{c}}});
        trunk.push_back(ReLU{});
      }
      width_ = c;
    }
    entry_ = Sequential<T>(entry, rng);
    trunk_ = Sequential<T>(trunk, rng);
    FeatShape s = cfg.arch == Arch::ViTMicro ? FeatShape{kSquares, 1, planes} : FeatShape{kRanks, kFiles, planes};
    s = entry_.infer(s);
    if (cfg.arch == Arch::ViTMicro) s.h += 1;  // readout token
    s = trunk_.infer(s);
    trunk_shape_ = s;
    if (cfg.policy == PolicyHead::Factorized16x90) {
      policy_ = Sequential<T>({Dense{width_, kMaxPieces}}, rng);
      policy2_ = Sequential<T>({Dense{width_, kSquares}}, rng);
    } else if (cfg.arch == Arch::ResNetUnmodified) {
      // Spatial resolution is gone; a dense layer over the flattened map.
      policy_ = Sequential<T>({Dense{s.rows() * s.c, kActions}}, rng);
    } else {
      policy_ = Sequential<T>({Dense{width_, cfg.head_dim}}, rng);   // from-square queries
      policy2_ = Sequential<T>({Dense{width_, cfg.head_dim}}, rng);  // to-square keys
      // Small keys make the initial policy close to uniform over legal moves.
      std::vector<NamedParam<T>> keys;
      policy2_.collect("", keys);
      for (auto& v : keys[0].var->value) v = static_cast<T>(rng.normal() * 0.02);
    }
    value_ = Sequential<T>({Dense{width_, width_}, ReLU{}, Dense{width_, 1}}, rng);
  }

  // Copies would silently share parameter storage; use clone().
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetConfig& config() const { return cfg_; }
  int token_count() const { return trunk_shape_.rows(); }

  std::vector<mg::NamedParam<T>> named_params() const {
    std::vector<mg::NamedParam<T>> out;
    if (pos_) out.push_back({"pos", pos_});
    if (readout_) out.push_back({"readout", readout_});
    entry_.collect("entry.", out);
    trunk_.collect("trunk.", out);
    policy_.collect("policy.", out);
    policy2_.collect("policy2.", out);
    value_.collect("value.", out);
    return out;
  }

  std::vector<mg::Var<T>> params() const {
    std::vector<mg::Var<T>> out;
    for (auto& p : named_params()) out.push_back(p.var);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& p : named_params()) n += p.var->value.size();
    return n;
  }

  // Independent copy (parameters are not shared).
  Network clone() const {
    Network copy(cfg_, 0);
    copy.copy_params_from(*this);
    return copy;
  }

  template <class U>
  void copy_params_from(const Network<U>& other) {
    auto dst = named_params();
    auto src = other.named_params();
    if (dst.size() != src.size()) throw ManifestMismatch("parameter lists differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].var->shape != src[i].var->shape) throw ManifestMismatch("shape differs for " + dst[i].name);
      for (std::size_t j = 0; j < dst[i].var->value.size(); ++j)
        dst[i].var->value[j] = static_cast<T>(src[i].var->value[j]);
    }
  }

  NetOutput<T> forward(const std::vector<NetInput>& batch) const {
    using namespace mg;
    const int b = static_cast<int>(batch.size());
    if (b == 0) throw ShapeMismatch("empty batch");
    const int planes = plane_count(cfg_.features);
    std::vector<T> x(static_cast<std::size_t>(b) * kSquares * planes);
    for (int i = 0; i < b; ++i) {
      if (batch[i].obs.planes != planes)
        throw ShapeMismatch("observation has " + std::to_string(batch[i].obs.planes) + " planes, network expects " +
                            std::to_string(planes));
      std::copy(batch[i].obs.data.begin(), batch[i].obs.data.end(), x.begin() + std::size_t(i) * kSquares * planes);
    }
    Act<T> a{tensor<T>({b * kSquares, planes}, std::move(x)), b, kRanks, kFiles};
    Var<T> cells, pooled;
    if (cfg_.arch == Arch::ViTMicro) {
      a = entry_(Act<T>{a.x, b, kSquares, 1});
      auto tokens = concat_groups(repeat_rows(readout_, b), add_tiled(a.x, pos_), b);
      a = trunk_(Act<T>{tokens, b, kSquares + 1, 1});
      cells = group_rows(a.x, b, 1, kSquares);
      pooled = group_rows(a.x, b, 0, 1);
    } else {
      a = trunk_(entry_(a));
      cells = a.x;
      pooled = mean_groups(a.x, b);
    }
    NetOutput<T> out;
    if (cfg_.policy == PolicyHead::Factorized16x90) {
      std::vector<std::vector<int>> slots;
      for (const auto& in : batch) {
        if (in.slots.size() != static_cast<std::size_t>(kSquares)) throw ShapeMismatch("factorized head needs piece slots");
        slots.push_back(in.slots);
      }
      auto s = policy_(Act<T>{pooled, b, 1, 1}).x;
      auto d = policy2_(Act<T>{pooled, b, 1, 1}).x;
      out.logits = pair_sum(s, d, slots);
    } else if (cfg_.arch == Arch::ResNetUnmodified) {
      auto flat = reshape(cells, {b, trunk_shape_.rows() * trunk_shape_.c});
      out.logits = policy_(Act<T>{flat, b, 1, 1}).x;
    } else {
      auto q = policy_(Act<T>{cells, b, kSquares, 1}).x;
      auto k = policy2_(Act<T>{cells, b, kSquares, 1}).x;
      auto l = scale(group_matmul_nt(q, k, b), T(1) / std::sqrt(static_cast<T>(cfg_.head_dim)));
      out.logits = reshape(l, {b, kActions});
    }
    out.value = tanh(value_(Act<T>{pooled, b, 1, 1}).x);
    return out;
  }

 private:
  NetConfig cfg_;
  int width_ = 0;
  mg::FeatShape trunk_shape_;
  mg::Var<T> pos_, readout_;
  mg::Sequential<T> entry_, trunk_, policy_, policy2_, value_;
};

// ---------------------------------------------------------------- inference

struct Inference {
  std::vector<float> logits;  // 8100, observation frame
  float value = 0;
  std::vector<double> probs;  // 8100, masked softmax at tau = 1
};

// p_i proportional to exp(logit_i / tau) over masked-in entries, exactly 0
// elsewhere. tau == 0 puts all mass on the argmax (lowest index on ties).
template <class Logits, class Mask>
std::vector<double> masked_distribution(const Logits& logits, const Mask& mask, double tau) {
  if (tau < 0) throw DomainError("temperature must be >= 0");
  const std::size_t n = static_cast<std::size_t>(kActions);
  std::vector<double> p(n, 0.0);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t arg = n;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i] && (arg == n || static_cast<double>(logits[i]) > best)) {
      best = static_cast<double>(logits[i]);
      arg = i;
    }
  if (arg == n) throw TerminalPosition();
  if (tau == 0) {
    p[arg] = 1.0;
    return p;
  }
  double z = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) z += p[i] = std::exp((static_cast<double>(logits[i]) - best) / tau);
  for (auto& v : p) v /= z;
  return p;
}

inline double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

template <class T>
std::vector<Inference> infer_batch(const Network<T>& net, const std::vector<NetInput>& inputs,
                                   const std::vector<LegalityMask>& masks) {
  mg::NoGrad off;
  const auto out = net.forward(inputs);
  std::vector<Inference> res(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    res[i].logits.assign(out.logits->value.begin() + i * kActions, out.logits->value.begin() + (i + 1) * kActions);
    res[i].value = static_cast<float>(out.value->value[i]);
    res[i].probs = masked_distribution(res[i].logits, masks[i], 1.0);
  }
  return res;
}

template <class T>
Inference infer(const Network<T>& net, const NetInput& input, const LegalityMask& mask) {
  return std::move(infer_batch(net, {input}, {mask})[0]);
}

template <class T>
Inference infer(const Network<T>& net, const Position& p) {
  return infer(net, make_input(p, net.config().features), oriented_mask(p));
}

inline double unit_draw(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Draws an index from `p` by inverse CDF over ascending index.
inline int sample_index(const std::vector<double>& p, Rng& rng) {
  const double u = unit_draw(rng);
  double acc = 0;
  int last = -1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0) continue;
    acc += p[i];
    last = static_cast<int>(i);
    if (u < acc) return last;
  }
  return last;
}

struct MoveChoice {
  Move move;
  int index = 0;  // observation-frame action index
  double logprob = 0;
  float value = 0;
};

template <class T>
MoveChoice sample_choice(const Network<T>& net, const Position& p, double tau, Rng& rng) {
  if (legal_moves(p).empty()) throw TerminalPosition();
  const auto inf = infer(net, p);
  const auto dist = tau == 1.0 ? inf.probs : masked_distribution(inf.logits, oriented_mask(p), tau);
  int idx;
  if (tau == 0) {
    // Argmax with ties to the lowest absolute action index.
    double best = -std::numeric_limits<double>::infinity();
    int best_abs = kActions;
    idx = -1;
    for (Move m : legal_moves(p)) {
      const int abs = move_to_index(m), o = oriented_index(abs, p.side_to_move());
      const double l = inf.logits[o];
      if (l > best || (l == best && abs < best_abs)) {
        best = l;
        best_abs = abs;
        idx = o;
      }
    }
  } else {
    idx = sample_index(dist, rng);
  }
  MoveChoice c;
  c.index = idx;
  c.move = index_to_move(oriented_index(idx, p.side_to_move()));
  c.logprob = std::log(inf.probs[idx]);
  c.value = inf.value;
  return c;
}

template <class T>
Move sample_move(const Network<T>& net, const Position& p, double tau, Rng& rng) {
  return sample_choice(net, p, tau, rng).move;
}

class NetAgent final : public Agent {
 public:
  NetAgent(std::shared_ptr<const Network<float>> net, std::string name) : net_(std::move(net)), name_(std::move(name)) {}
  Move choose(const Position& p, double tau, Rng& rng) const override { return sample_move(*net_, p, tau, rng); }
  std::string name() const override { return name_; }
  const Network<float>& network() const { return *net_; }

 private:
  std::shared_ptr<const Network<float>> net_;
  std::string name_;
};

// ---------------------------------------------------------------- checkpoints

inline constexpr char kCheckpointMagic[4] = {'X', 'Q', 'N', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// FNV-1a over the raw bytes of the network's outputs on the initial position.
template <class T>
std::uint64_t probe_hash(const Network<T>& net) {
  const auto inf = infer(net, Position::initial());
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&](float f) {
    unsigned char b[4];
    std::memcpy(b, &f, 4);
    for (unsigned char c : b) h = (h ^ c) * 0x100000001b3ull;
  };
  for (float f : inf.logits) feed(f);
  feed(inf.value);
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint truncated");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

}  // namespace detail

inline nlohmann::json checkpoint_descriptor(const Network<float>& net) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : net.named_params())
    manifest.push_back({{"name", p.name}, {"shape", {p.var->shape.rows, p.var->shape.cols}}});
  return {{"config", net.config()}, {"params", manifest}, {"probe_hash", hex64(probe_hash(net))}};
}

inline void save_checkpoint(const Network<float>& net, std::ostream& out) {
  const std::string desc = checkpoint_descriptor(net).dump();
  out.write(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(desc.size()));
  out.write(desc.data(), static_cast<std::streamsize>(desc.size()));
  for (const auto& p : net.named_params())
    for (float f : p.var->value) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(out, bits);
    }
}

// Writes to a sibling temp file and renames, so readers never see a partial file.
inline void save_checkpoint(const Network<float>& net, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp);
    save_checkpoint(net, out);
    if (!out) throw FormatError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move checkpoint into " + path);
}

// Reads a checkpoint. When `expected` is given its config must match exactly.
inline Network<float> load_checkpoint(std::istream& in, const NetConfig* expected = nullptr) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic");
  const std::uint32_t version = detail::get_u32(in);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t len = detail::get_u32(in);
  if (len > (1u << 26)) throw FormatError("descriptor too large");
  std::string desc(len, '\0');
  if (!in.read(desc.data(), len)) throw FormatError("checkpoint truncated in descriptor");
  nlohmann::json j;
  NetConfig cfg;
  try {
    j = nlohmann::json::parse(desc);
    cfg = j.at("config").get<NetConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint descriptor: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad checkpoint descriptor: ") + e.what());
  }
  if (expected && !(*expected == cfg))
    throw ManifestMismatch("checkpoint config " + nlohmann::json(cfg).dump() + " != expected " +
                           nlohmann::json(*expected).dump());
  Network<float> net(cfg, 0);
  const auto params = net.named_params();
  const auto& manifest = j.at("params");
  if (manifest.size() != params.size()) throw ManifestMismatch("parameter count differs from the architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = manifest[i];
    if (m.at("name") != params[i].name ||
        m.at("shape") != nlohmann::json{params[i].var->shape.rows, params[i].var->shape.cols})
      throw ManifestMismatch("manifest entry " + std::to_string(i) + " (" + m.dump() + ") does not match " +
                             params[i].name);
  }
  for (const auto& p : params)
    for (auto& f : p.var->value) {
      const std::uint32_t bits = detail::get_u32(in);
      std::memcpy(&f, &bits, 4);
    }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after parameters");
  if (j.at("probe_hash") != hex64(probe_hash(net))) throw FormatError("probe hash mismatch");
  return net;
}

inline Network<float> load_checkpoint(const std::string& path, const NetConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  return load_checkpoint(in, expected);
}

}  // namespace xq
