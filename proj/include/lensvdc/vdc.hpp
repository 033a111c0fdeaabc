#pragma once

// Validated dominance correction. At each step the emitted token is checked
// against the rank-1 (dominant) tokens of the configured streams over the
// unskipped layers; a token that is never dominant is replaced by the token
// that is dominant at the most layers.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lensvdc/sad.hpp"
#include "lensvdc/toy_decoder.hpp"
#include "lensvdc/trace.hpp"

namespace lensvdc {

enum class SourceSet { LayerOnly, AttnFfn, AttnFfnLayer };

inline constexpr std::array<SourceSet, 3> kAllSources = {SourceSet::LayerOnly, SourceSet::AttnFfn,
                                                         SourceSet::AttnFfnLayer};

inline std::vector<StreamKind> streams_of(SourceSet s) {
  switch (s) {
    case SourceSet::LayerOnly: return {StreamKind::LayerOut};
    case SourceSet::AttnFfn: return {StreamKind::AttnOut, StreamKind::FfnOut};
    case SourceSet::AttnFfnLayer: return {StreamKind::LayerOut, StreamKind::AttnOut, StreamKind::FfnOut};
  }
  return {};
}

inline std::string_view to_string(SourceSet s) {
  switch (s) {
    case SourceSet::LayerOnly: return "layer";
    case SourceSet::AttnFfn: return "attn-ffn";
    case SourceSet::AttnFfnLayer: return "attn-ffn-layer";
  }
  return "?";
}

inline SourceSet parse_source(std::string_view s) {
  for (SourceSet v : kAllSources) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown source set '" + std::string(s) + "' (layer, attn-ffn, attn-ffn-layer)");
}

// Resolution of equal counts in the replacement argmax.
//   Deepest:   latest dominant layer deeper wins, then lower token id at the
//              token's earliest dominant layer.
//   Shallowest: earliest dominant layer shallower wins, then the same id rule.
enum class TieBreak { Deepest, Shallowest };

inline std::string_view to_string(TieBreak t) { return t == TieBreak::Deepest ? "deepest" : "shallowest"; }

inline TieBreak parse_tie_break(std::string_view s) {
  if (s == "deepest") return TieBreak::Deepest;
  if (s == "shallowest") return TieBreak::Shallowest;
  throw std::invalid_argument("unknown tie-break '" + std::string(s) + "' (deepest, shallowest)");
}

struct VdcConfig {
  SourceSet validation = SourceSet::AttnFfn;
  SourceSet correction = SourceSet::AttnFfnLayer;
  std::size_t skip_layers = 0;
  TieBreak tie_break = TieBreak::Deepest;
  bool feedback = true;  // online only: feed the corrected token back
};

struct Witness {
  std::size_t layer;
  StreamKind stream;
  friend bool operator==(const Witness&, const Witness&) = default;
};

// How often one normalized token is dominant across the unskipped layers.
struct TokenCount {
  std::string token;
  std::size_t count = 0;              // layers where dominant in >= 1 source stream
  std::vector<std::size_t> layers;    // those layers, ascending
  TokenId earliest_id = 0;            // lowest id among occurrences at layers.front()
  Candidate best;                     // highest-scoring dominant occurrence

  std::size_t earliest_layer() const { return layers.front(); }
  std::size_t latest_layer() const { return layers.back(); }
};

namespace detail {

inline void check_skip(const DominanceProfile& p, std::size_t skip_layers) {
  if (skip_layers >= p.num_layers()) {
    throw AnalysisError("skip_layers " + std::to_string(skip_layers) + " leaves no layers out of " +
                        std::to_string(p.num_layers()));
  }
}

inline bool ranks_before(const TokenCount& a, const TokenCount& b, TieBreak rule) {
  if (a.count != b.count) return a.count > b.count;
  if (rule == TieBreak::Deepest) {
    if (a.latest_layer() != b.latest_layer()) return a.latest_layer() > b.latest_layer();
  } else {
    if (a.earliest_layer() != b.earliest_layer()) return a.earliest_layer() < b.earliest_layer();
  }
  return a.earliest_id < b.earliest_id;
}

}  // namespace detail

inline std::vector<Witness> witnesses(const std::string& token, const DominanceProfile& p, SourceSet source,
                                      std::size_t skip_layers) {
  detail::check_skip(p, skip_layers);
  std::vector<Witness> out;
  for (std::size_t l = skip_layers + 1; l <= p.num_layers(); ++l) {
    for (StreamKind s : streams_of(source)) {
      if (p.dominant(s, l) == token) out.push_back({l, s});
    }
  }
  return out;
}

inline bool validated(const std::string& token, const DominanceProfile& p, const VdcConfig& cfg) {
  detail::check_skip(p, cfg.skip_layers);
  for (std::size_t l = cfg.skip_layers + 1; l <= p.num_layers(); ++l) {
    for (StreamKind s : streams_of(cfg.validation)) {
      if (p.dominant(s, l) == token) return true;
    }
  }
  return false;
}

// Per-layer OR indicator summed over unskipped layers, for every token that is
// dominant somewhere in the correction streams. Sorted best-first.
inline std::vector<TokenCount> dominance_counts(const DominanceProfile& p, const VdcConfig& cfg) {
  detail::check_skip(p, cfg.skip_layers);
  std::vector<TokenCount> counts;
  std::unordered_map<std::string, std::size_t> slot;
  for (std::size_t l = cfg.skip_layers + 1; l <= p.num_layers(); ++l) {
    for (StreamKind s : streams_of(cfg.correction)) {
      const Candidate& c = p.at(s, l).top;
      auto [it, inserted] = slot.try_emplace(c.normalized, counts.size());
      if (inserted) {
        counts.push_back({c.normalized, 0, {}, c.token_id, c});
      }
      TokenCount& tc = counts[it->second];
      if (tc.layers.empty() || tc.layers.back() != l) {
        tc.layers.push_back(l);
        ++tc.count;
      } else if (tc.layers.front() == l) {
        tc.earliest_id = std::min(tc.earliest_id, c.token_id);
      }
      if (!inserted && (c.score > tc.best.score || (c.score == tc.best.score && c.token_id < tc.best.token_id))) {
        tc.best = c;
      }
    }
  }
  std::stable_sort(counts.begin(), counts.end(), [&](const TokenCount& a, const TokenCount& b) {
    return detail::ranks_before(a, b, cfg.tie_break);
  });
  return counts;
}

inline std::string replacement(const DominanceProfile& p, const VdcConfig& cfg) {
  return dominance_counts(p, cfg).front().token;
}

struct VdcStepReport {
  std::size_t t = 0;
  Candidate original;
  bool validated = false;
  std::optional<Candidate> replacement;
  std::vector<TokenCount> counts;
  std::vector<Witness> witnesses;  // validation-source hits for the original

  const Candidate& output() const { return replacement ? *replacement : original; }
};

inline VdcStepReport correct_step(const StepTrace& step, const VdcConfig& cfg) {
  const DominanceProfile p = dominance_profile(step);
  VdcStepReport r;
  r.t = step.t;
  r.original = step.emitted;
  r.witnesses = witnesses(step.emitted.normalized, p, cfg.validation, cfg.skip_layers);
  r.validated = !r.witnesses.empty();
  r.counts = dominance_counts(p, cfg);
  if (!r.validated) r.replacement = r.counts.front().best;
  return r;
}

struct VdcResult {
  std::vector<Candidate> corrected;
  std::vector<VdcStepReport> reports;

  std::size_t replaced() const {
    return static_cast<std::size_t>(
        std::count_if(reports.begin(), reports.end(), [](const auto& r) { return !r.validated; }));
  }
};

// Offline correction. The trace cannot be re-conditioned, so `feedback` has no
// effect here.
inline VdcResult correct_trace(const DecodeTrace& trace, const VdcConfig& cfg) {
  if (cfg.skip_layers >= trace.num_layers) {
    throw AnalysisError("skip_layers " + std::to_string(cfg.skip_layers) + " must be below num_layers " +
                        std::to_string(trace.num_layers));
  }
  VdcResult out;
  for (const auto& st : trace.steps) {
    out.reports.push_back(correct_step(st, cfg));
    out.corrected.push_back(out.reports.back().output());
  }
  return out;
}

struct OnlineVdcResult {
  VdcResult result;
  DecodeTrace trace;  // original emissions
};

// Greedy decoding with correction inside the loop; dominants come from the
// same forward pass that produces the token.
inline OnlineVdcResult decode_with_vdc(const ToyModel& model, const Prompt& prompt, const Vocab& vocab,
                                       const VdcConfig& cfg, const GenerateOptions& opts) {
  if (cfg.skip_layers >= model.config.num_layers) {
    throw ConfigError("skip_layers " + std::to_string(cfg.skip_layers) + " must be below num_layers " +
                      std::to_string(model.config.num_layers));
  }
  OnlineVdcResult out;
  out.trace = run_decode(model, prompt, vocab, opts, [&](const StepTrace& st) {
    out.result.reports.push_back(correct_step(st, cfg));
    const Candidate& chosen = out.result.reports.back().output();
    out.result.corrected.push_back(chosen);
    return cfg.feedback ? chosen.token_id : st.emitted.token_id;
  });
  return out;
}

// Layer histogram of correction tokens. `replacements` counts each replaced
// token once, at the deepest layer where it is dominant; `occurrences` counts
// every layer where it is dominant.
struct HistogramBin {
  std::size_t layer;
  std::size_t replacements = 0;
  std::size_t occurrences = 0;
};

inline std::vector<HistogramBin> correction_layer_histogram(const std::vector<VdcStepReport>& reports,
                                                            std::size_t num_layers) {
  std::vector<HistogramBin> bins;
  for (std::size_t l = 1; l <= num_layers; ++l) bins.push_back({l});
  for (const auto& r : reports) {
    if (!r.replacement) continue;
    for (const auto& tc : r.counts) {
      if (tc.token != r.replacement->normalized) continue;
      ++bins[tc.latest_layer() - 1].replacements;
      for (std::size_t l : tc.layers) ++bins[l - 1].occurrences;
      break;
    }
  }
  return bins;
}

}  // namespace lensvdc
