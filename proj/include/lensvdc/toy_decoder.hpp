#pragma once

// A small pre-norm decoder with every intermediate stream exposed:
//
//   h_attn = Attention(RmsNorm(h));  h = h + h_attn
//   h_ffn  = FFN(RmsNorm(h));        h = h + h_ffn
//
// Attention is causal multi-head with rotary positions (base 10000) over a
// per-generation KV cache. The FFN is gated SiLU (gate, up, down).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lensvdc/core_tensor.hpp"
#include "lensvdc/logit_lens.hpp"
#include "lensvdc/trace.hpp"

namespace lensvdc {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ContextOverflow : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t num_layers = 8;
  std::size_t hidden_dim = 16;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 32;
  std::size_t vocab_size = 64;
  std::size_t max_context = 96;
  GridShape grid{4, 4};  // h*w pseudo-visual tokens

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void check_config(const ModelConfig& c) {
  if (c.num_layers < 2) throw ConfigError("num_layers must be >= 2");
  if (c.hidden_dim == 0 || c.num_heads == 0) throw ConfigError("hidden_dim and num_heads must be positive");
  if (c.hidden_dim % c.num_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(c.hidden_dim) + " is not divisible by num_heads " +
                      std::to_string(c.num_heads));
  }
  if (c.ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
  if (c.vocab_size < 8) throw ConfigError("vocab_size must be >= 8");
  if (c.max_context == 0) throw ConfigError("max_context must be positive");
  if (c.grid.cells() == 0) throw ConfigError("grid must have at least one cell");
}

struct LayerWeights {
  std::vector<double> attn_norm;
  Matrix wq, wk, wv, wo;  // d×d
  std::vector<double> ffn_norm;
  Matrix w_gate, w_up;  // d×ffn
  Matrix w_down;        // ffn×d
};

struct ToyModel {
  ModelConfig config;
  std::uint64_t seed = 0;
  Matrix embeddings;  // V×d
  std::vector<LayerWeights> layers;
  std::vector<double> final_norm;
  Matrix unembedding;  // d×V
};

// xorshift64* seeded through splitmix64 so that seed 0 is usable.
class Xorshift64Star {
 public:
  explicit Xorshift64Star(std::uint64_t seed) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    state_ = z ^ (z >> 31);
    if (state_ == 0) state_ = 0x2545F4914F6CDD1DULL;
  }

  std::uint64_t next() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  // Uniform in [0, 1) from the top 53 bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform in [-1, 1).
  double symmetric() { return 2.0 * uniform() - 1.0; }

  std::uint64_t below(std::uint64_t n) { return next() % n; }

 private:
  std::uint64_t state_;
};

namespace detail {

inline Matrix random_matrix(Xorshift64Star& rng, std::size_t rows, std::size_t cols, double scale) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.symmetric() * scale;
  return m;
}

}  // namespace detail

// Every weight is U[-1, 1) · 1/sqrt(d), drawn in a fixed order (embeddings,
// then per layer q, k, v, o, gate, up, down, then the unembedding). Norm gains
// start at 1.
inline ToyModel new_model(const ModelConfig& config, std::uint64_t seed, bool tie_embeddings = false) {
  check_config(config);
  const std::size_t d = config.hidden_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Xorshift64Star rng(seed);

  ToyModel m;
  m.config = config;
  m.seed = seed;
  m.embeddings = detail::random_matrix(rng, config.vocab_size, d, scale);
  m.layers.resize(config.num_layers);
  for (auto& lw : m.layers) {
    lw.attn_norm.assign(d, 1.0);
    lw.ffn_norm.assign(d, 1.0);
    lw.wq = detail::random_matrix(rng, d, d, scale);
    lw.wk = detail::random_matrix(rng, d, d, scale);
    lw.wv = detail::random_matrix(rng, d, d, scale);
    lw.wo = detail::random_matrix(rng, d, d, scale);
    lw.w_gate = detail::random_matrix(rng, d, config.ffn_dim, scale);
    lw.w_up = detail::random_matrix(rng, d, config.ffn_dim, scale);
    lw.w_down = detail::random_matrix(rng, config.ffn_dim, d, scale);
  }
  m.final_norm.assign(d, 1.0);
  if (tie_embeddings) {
    m.unembedding = Matrix(d, config.vocab_size);
    for (std::size_t v = 0; v < config.vocab_size; ++v) {
      for (std::size_t i = 0; i < d; ++i) m.unembedding(i, v) = m.embeddings(v, i);
    }
  } else {
    m.unembedding = detail::random_matrix(rng, d, config.vocab_size, scale);
  }
  return m;
}

// FNV-1a over the bit patterns of every weight, in declaration order.
inline std::uint64_t weight_checksum(const ToyModel& m) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](std::span<const double> values) {
    for (double v : values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xFF;
        h *= 0x100000001B3ULL;
      }
    }
  };
  mix(m.embeddings.data());
  for (const auto& lw : m.layers) {
    mix(lw.attn_norm);
    mix(lw.wq.data());
    mix(lw.wk.data());
    mix(lw.wv.data());
    mix(lw.wo.data());
    mix(lw.ffn_norm);
    mix(lw.w_gate.data());
    mix(lw.w_up.data());
    mix(lw.w_down.data());
  }
  mix(m.final_norm);
  mix(m.unembedding.data());
  return h;
}

inline constexpr double kRopeBase = 10000.0;

// Rotates consecutive pairs (x[2i], x[2i+1]) of one head by pos·base^(-2i/hd).
// An odd trailing dimension is left unrotated.
inline void apply_rope(std::span<double> head, std::size_t pos) {
  const std::size_t hd = head.size();
  for (std::size_t i = 0; 2 * i + 1 < hd; ++i) {
    const double freq = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
    const double angle = static_cast<double>(pos) * freq;
    const double c = std::cos(angle), s = std::sin(angle);
    const double x0 = head[2 * i], x1 = head[2 * i + 1];
    head[2 * i] = x0 * c - x1 * s;
    head[2 * i + 1] = x0 * s + x1 * c;
  }
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

// Keys (after rotary) and values per layer per position.
struct KvCache {
  std::vector<std::vector<std::vector<double>>> keys;
  std::vector<std::vector<std::vector<double>>> values;

  explicit KvCache(std::size_t num_layers = 0) : keys(num_layers), values(num_layers) {}
  std::size_t length() const { return keys.empty() ? 0 : keys.front().size(); }
};

struct LayerStreams {
  std::vector<double> h_before;
  std::vector<double> h_attn;
  std::vector<double> h_after_attn;
  std::vector<double> h_ffn;
  std::vector<double> h_after;
  Matrix attention_weights;  // heads × context, row of the current query
};

struct StepStreams {
  std::size_t position = 0;  // position of the token just fed
  std::vector<LayerStreams> layers;

  const std::vector<double>& final_hidden() const { return layers.back().h_after; }
};

inline StepStreams forward_step(const ToyModel& model, KvCache& cache, TokenId token) {
  const ModelConfig& cfg = model.config;
  if (token >= cfg.vocab_size) throw std::out_of_range("forward_step: token id out of range");
  if (cache.keys.size() != cfg.num_layers) cache = KvCache(cfg.num_layers);
  const std::size_t pos = cache.length();
  if (pos >= cfg.max_context) {
    throw ContextOverflow("context overflow: max_context " + std::to_string(cfg.max_context) + " reached");
  }
  const std::size_t d = cfg.hidden_dim;
  const std::size_t heads = cfg.num_heads;
  const std::size_t hd = d / heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  StepStreams out;
  out.position = pos;
  out.layers.reserve(cfg.num_layers);
  auto row = model.embeddings.row(token);
  std::vector<double> h(row.begin(), row.end());

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const LayerWeights& lw = model.layers[l];
    LayerStreams ls;
    ls.h_before = h;

    const auto x = rms_norm(h, lw.attn_norm);
    auto q = vecmat(x, lw.wq);
    auto k = vecmat(x, lw.wk);
    auto v = vecmat(x, lw.wv);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      apply_rope(std::span<double>(q).subspan(hh * hd, hd), pos);
      apply_rope(std::span<double>(k).subspan(hh * hd, hd), pos);
    }
    cache.keys[l].push_back(std::move(k));
    cache.values[l].push_back(std::move(v));
    const auto& keys = cache.keys[l];
    const auto& vals = cache.values[l];
    const std::size_t ctx = keys.size();

    Matrix weights(heads, ctx);
    std::vector<double> mixed(d, 0.0);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      auto w = weights.row(hh);
      for (std::size_t j = 0; j < ctx; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < hd; ++i) dot += q[hh * hd + i] * keys[j][hh * hd + i];
        w[j] = dot * inv_sqrt_hd;
      }
      softmax_inplace(w);
      for (std::size_t j = 0; j < ctx; ++j) {
        for (std::size_t i = 0; i < hd; ++i) mixed[hh * hd + i] += w[j] * vals[j][hh * hd + i];
      }
    }
    ls.h_attn = vecmat(mixed, lw.wo);
    for (std::size_t i = 0; i < d; ++i) h[i] += ls.h_attn[i];
    ls.h_after_attn = h;

    const auto y = rms_norm(h, lw.ffn_norm);
    auto gate = vecmat(y, lw.w_gate);
    const auto up = vecmat(y, lw.w_up);
    for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = silu(gate[i]) * up[i];
    ls.h_ffn = vecmat(gate, lw.w_down);
    for (std::size_t i = 0; i < d; ++i) h[i] += ls.h_ffn[i];
    ls.h_after = h;
    ls.attention_weights = std::move(weights);
    out.layers.push_back(std::move(ls));
  }
  return out;
}

// The decoder's own next-token logits.
inline std::vector<double> output_logits(const ToyModel& model, const StepStreams& streams) {
  return project(streams.final_hidden(), model.final_norm, model.unembedding);
}

// ---------------------------------------------------------------------------
// Generation with per-layer instrumentation

enum class HeadAggregation { Mean, Max };

inline const char* to_string(HeadAggregation a) { return a == HeadAggregation::Mean ? "mean" : "max"; }

struct Prompt {
  std::vector<TokenId> tokens;
  SegmentMap segments;
};

struct GenerateOptions {
  std::size_t max_new = 16;
  std::size_t topk = kDefaultTopK;
  std::optional<TokenId> end_token;
  // Aggregation of heads for visual_grid and instruction_attn. group_ratio is
  // always the head mean so that it stays a distribution.
  HeadAggregation head_aggregation = HeadAggregation::Mean;
  LensOptions lens;
};

// Layout: [system | vision (h*w) | instruction], token ids drawn from the seed.
// Id 0 is avoided so a conventional end token never appears in the prompt.
inline Prompt synthetic_prompt(const ModelConfig& cfg, std::uint64_t seed, std::size_t system_len = 4,
                               std::size_t instruction_len = 6) {
  check_config(cfg);
  if (instruction_len == 0) throw ConfigError("instruction_len must be >= 1");
  Xorshift64Star rng(seed ^ 0x5EED5EED5EED5EEDULL);
  Prompt p;
  const std::size_t vision_len = cfg.grid.cells();
  const std::size_t total = system_len + vision_len + instruction_len;
  for (std::size_t i = 0; i < total; ++i) {
    p.tokens.push_back(static_cast<TokenId>(1 + rng.below(cfg.vocab_size - 1)));
  }
  p.segments.system = {0, system_len};
  p.segments.vision = {system_len, system_len + vision_len};
  p.segments.instruction = {system_len + vision_len, total};
  p.segments.output_start = total;
  return p;
}

namespace detail {

inline void check_prompt(const ToyModel& model, const Prompt& prompt, const Vocab& vocab,
                         const GenerateOptions& opts) {
  const ModelConfig& cfg = model.config;
  const SegmentMap& s = prompt.segments;
  if (prompt.tokens.empty()) throw ConfigError("prompt is empty");
  if (s.system.begin != 0 || s.system.end != s.vision.begin || s.vision.end != s.instruction.begin ||
      s.instruction.end != s.output_start || s.output_start != prompt.tokens.size()) {
    throw ConfigError("segment map must tile the prompt: system, vision, instruction, then output_start");
  }
  if (s.vision.size() != cfg.grid.cells()) {
    throw ConfigError("vision segment length " + std::to_string(s.vision.size()) + " != grid cells " +
                      std::to_string(cfg.grid.cells()));
  }
  if (s.instruction.empty()) throw ConfigError("instruction segment is empty");
  for (TokenId id : prompt.tokens) {
    if (id >= cfg.vocab_size) throw ConfigError("prompt token id out of range");
  }
  if (vocab.size() != cfg.vocab_size) {
    throw ConfigError("vocab size " + std::to_string(vocab.size()) + " != model vocab_size " +
                      std::to_string(cfg.vocab_size));
  }
  if (opts.topk < 5 || opts.topk > cfg.vocab_size) throw ConfigError("topk must be in [5, vocab_size]");
  const std::size_t needed = prompt.tokens.size() + (opts.max_new > 0 ? opts.max_new - 1 : 0);
  if (prompt.tokens.size() > cfg.max_context || needed > cfg.max_context) {
    throw ContextOverflow("prompt too long: " + std::to_string(prompt.tokens.size()) + " prompt tokens + " +
                          std::to_string(opts.max_new) + " new exceed max_context " +
                          std::to_string(cfg.max_context));
  }
}

inline double aggregate_heads(const Matrix& w, std::size_t col, HeadAggregation agg) {
  double acc = agg == HeadAggregation::Mean ? 0.0 : w(0, col);
  for (std::size_t h = 0; h < w.rows(); ++h) {
    acc = agg == HeadAggregation::Mean ? acc + w(h, col) : std::max(acc, w(h, col));
  }
  return agg == HeadAggregation::Mean ? acc / static_cast<double>(w.rows()) : acc;
}

}  // namespace detail

inline DecodeTrace trace_header(const ToyModel& model, const Prompt& prompt, const GenerateOptions& opts) {
  DecodeTrace tr;
  tr.num_layers = model.config.num_layers;
  tr.vocab_size = model.config.vocab_size;
  tr.topk = opts.topk;
  tr.grid = model.config.grid;
  tr.segments = prompt.segments;
  tr.meta["model"] = "toy-decoder";
  tr.meta["seed"] = std::to_string(model.seed);
  tr.meta["head_aggregation"] = to_string(opts.head_aggregation);
  tr.meta["lens"] = opts.lens.apply_final_norm ? "final-norm" : "raw";
  return tr;
}

// Lens readout and attention aggregates for one forward pass. The emitted
// token is the greedy choice from the decoder's own output logits.
inline StepTrace record_step(const ToyModel& model, const StepStreams& streams, const SegmentMap& seg,
                             const Vocab& vocab, const GenerateOptions& opts, std::size_t t) {
  StepTrace st;
  st.t = t;
  const auto logits = output_logits(model, streams);
  st.emitted = candidates(logits, vocab, 1).front();
  for (std::size_t l = 0; l < streams.layers.size(); ++l) {
    const LayerStreams& ls = streams.layers[l];
    LayerRecord rec;
    rec.layer = l + 1;
    const Matrix& w = ls.attention_weights;
    for (std::size_t pos = 0; pos < w.cols(); ++pos) {
      const double mass = detail::aggregate_heads(w, pos, HeadAggregation::Mean);
      TokenGroup g = TokenGroup::Output;
      if (seg.system.contains(pos)) g = TokenGroup::System;
      else if (seg.vision.contains(pos)) g = TokenGroup::Vision;
      else if (seg.instruction.contains(pos)) g = TokenGroup::Instruction;
      rec.group_ratio[static_cast<std::size_t>(g)] += mass;
    }
    std::vector<double> grid;
    for (std::size_t pos = seg.vision.begin; pos < seg.vision.end; ++pos) {
      grid.push_back(detail::aggregate_heads(w, pos, opts.head_aggregation));
    }
    rec.visual_grid = std::move(grid);
    std::vector<double> instr;
    for (std::size_t pos = seg.instruction.begin; pos < seg.instruction.end; ++pos) {
      instr.push_back(detail::aggregate_heads(w, pos, opts.head_aggregation));
    }
    rec.instruction_attn = std::move(instr);

    auto lens = [&](const std::vector<double>& hidden) {
      return candidates(project(hidden, model.final_norm, model.unembedding, opts.lens), vocab, opts.topk);
    };
    rec.stream(StreamKind::LayerOut) = lens(ls.h_after);
    rec.stream(StreamKind::AttnOut) = lens(ls.h_attn);
    rec.stream(StreamKind::FfnOut) = lens(ls.h_ffn);
    st.layers.push_back(std::move(rec));
  }
  return st;
}

// Greedy loop shared by generate and online correction. `next_token` receives
// each recorded step and returns the token to feed back into the context.
template <typename NextToken>
DecodeTrace run_decode(const ToyModel& model, const Prompt& prompt, const Vocab& vocab,
                       const GenerateOptions& opts, NextToken&& next_token) {
  detail::check_prompt(model, prompt, vocab, opts);
  DecodeTrace tr = trace_header(model, prompt, opts);
  if (opts.max_new == 0) return tr;
  KvCache cache(model.config.num_layers);
  StepStreams streams;
  for (TokenId id : prompt.tokens) streams = forward_step(model, cache, id);
  for (std::size_t t = 1; t <= opts.max_new; ++t) {
    tr.steps.push_back(record_step(model, streams, prompt.segments, vocab, opts, t));
    const StepTrace& st = tr.steps.back();
    const TokenId fed = next_token(st);
    if (opts.end_token && st.emitted.token_id == *opts.end_token) break;
    if (t == opts.max_new) break;
    streams = forward_step(model, cache, fed);
  }
  return tr;
}

inline DecodeTrace generate(const ToyModel& model, const Prompt& prompt, const Vocab& vocab,
                            const GenerateOptions& opts) {
  return run_decode(model, prompt, vocab, opts, [](const StepTrace& st) { return st.emitted.token_id; });
}

// ---------------------------------------------------------------------------
// Model files hold the config and seed; weights are regenerated on load and
// checked against the stored checksum.

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["num_layers"] = c.num_layers;
  j["hidden_dim"] = c.hidden_dim;
  j["num_heads"] = c.num_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["vocab_size"] = c.vocab_size;
  j["max_context"] = c.max_context;
  j["grid"] = {{"h", c.grid.h}, {"w", c.grid.w}};
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_context = j.at("max_context").get<std::size_t>();
  c.grid = {j.at("grid").at("h").get<std::size_t>(), j.at("grid").at("w").get<std::size_t>()};
  return c;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline nlohmann::ordered_json model_to_json(const ToyModel& m) {
  nlohmann::ordered_json j;
  j["format"] = "lensvdc-toy-model";
  j["version"] = 1;
  j["seed"] = m.seed;
  j["config"] = config_to_json(m.config);
  j["checksum"] = hex64(weight_checksum(m));
  return j;
}

inline ToyModel model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "lensvdc-toy-model") throw ConfigError("not a toy model file");
  if (j.value("version", 0) != 1) throw ConfigError("unsupported model file version");
  ToyModel m = new_model(config_from_json(j.at("config")), j.at("seed").get<std::uint64_t>());
  if (j.contains("checksum") && j["checksum"].get<std::string>() != hex64(weight_checksum(m))) {
    throw ConfigError("model checksum mismatch: weights differ from the recorded model");
  }
  return m;
}

}  // namespace lensvdc
