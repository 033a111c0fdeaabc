#pragma once

// Dominant-token tracking across layers and streams, and detection of tokens
// that reach the output without ever being rank-1 in the attention or FFN
// branch (subdominant accumulation).

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lensvdc/gate.hpp"
#include "lensvdc/trace.hpp"

namespace lensvdc {

inline constexpr std::size_t kSubdominantFirstRank = 2;
inline constexpr std::size_t kSubdominantLastRank = 5;

struct LayerDominance {
  Candidate top;                        // rank-1 candidate
  std::vector<std::string> subdominant;  // normalized, ranks 2..5
};

struct DominanceProfile {
  std::size_t t = 0;
  std::array<std::vector<LayerDominance>, 3> by_stream;  // [stream][layer-1]

  std::size_t num_layers() const { return by_stream[0].size(); }
  const LayerDominance& at(StreamKind s, std::size_t layer) const { return by_stream[index_of(s)][layer - 1]; }
  const std::string& dominant(StreamKind s, std::size_t layer) const { return at(s, layer).top.normalized; }
};

inline DominanceProfile dominance_profile(const StepTrace& step) {
  DominanceProfile p;
  p.t = step.t;
  for (StreamKind s : kAllStreams) {
    auto& dst = p.by_stream[index_of(s)];
    dst.reserve(step.layers.size());
    for (const auto& rec : step.layers) {
      const auto& list = rec.stream(s);
      if (list.size() < kSubdominantLastRank) {
        throw AnalysisError("dominance profile needs top-5 candidates, step " + std::to_string(step.t) +
                            " layer " + std::to_string(rec.layer) + " has " + std::to_string(list.size()));
      }
      LayerDominance ld{list[0], {}};
      for (std::size_t r = kSubdominantFirstRank; r <= kSubdominantLastRank; ++r) {
        ld.subdominant.push_back(list[r - 1].normalized);
      }
      dst.push_back(std::move(ld));
    }
  }
  return p;
}

// Per-stream mask over layers: true where the normalized dominant differs
// from the previous layer. Layer 1 is always marked.
inline std::vector<bool> rank1_change_column(const StepTrace& step, StreamKind stream) {
  std::vector<bool> col(step.layers.size(), true);
  for (std::size_t l = 1; l < step.layers.size(); ++l) {
    col[l] = step.layers[l].stream(stream).front().normalized !=
             step.layers[l - 1].stream(stream).front().normalized;
  }
  return col;
}

struct ChangeMask {
  std::size_t layers = 0;
  std::size_t steps = 0;
  std::vector<bool> data;  // layer-major: (l-1)*steps + (t-1)

  bool at(std::size_t layer, std::size_t t) const { return data[(layer - 1) * steps + (t - 1)]; }
};

inline ChangeMask rank1_changes(const DecodeTrace& trace, StreamKind stream) {
  ChangeMask m{trace.num_layers, trace.steps.size(), std::vector<bool>(trace.num_layers * trace.steps.size())};
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto col = rank1_change_column(trace.steps[t], stream);
    for (std::size_t l = 0; l < col.size(); ++l) m.data[l * m.steps + t] = col[l];
  }
  return m;
}

// Smallest layer from which the LayerOut dominant equals the emitted token at
// every deeper layer.
inline std::optional<std::size_t> stabilization_layer(const StepTrace& step) {
  const std::string& emitted = step.emitted.normalized;
  std::optional<std::size_t> result;
  for (std::size_t l = step.layers.size(); l >= 1; --l) {
    if (step.layers[l - 1].stream(StreamKind::LayerOut).front().normalized != emitted) break;
    result = l;
  }
  return result;
}

struct SadEntry {
  std::size_t t = 0;
  Candidate emitted;
  bool sad_flag = false;
  bool attn_dominant_ever = false;
  bool ffn_dominant_ever = false;
  std::size_t subdominant_hits = 0;
  std::optional<std::size_t> stabilization_layer;
  std::array<std::vector<bool>, 3> rank1_change_mask;
};

inline SadEntry detect_sad(const StepTrace& step, std::size_t skip_layers) {
  if (skip_layers >= step.layers.size()) {
    throw AnalysisError("skip_layers " + std::to_string(skip_layers) + " must be below the layer count " +
                        std::to_string(step.layers.size()));
  }
  const DominanceProfile p = dominance_profile(step);
  SadEntry e;
  e.t = step.t;
  e.emitted = step.emitted;
  const std::string& x = step.emitted.normalized;
  for (std::size_t l = skip_layers + 1; l <= p.num_layers(); ++l) {
    if (p.dominant(StreamKind::AttnOut, l) == x) e.attn_dominant_ever = true;
    if (p.dominant(StreamKind::FfnOut, l) == x) e.ffn_dominant_ever = true;
    for (StreamKind s : {StreamKind::AttnOut, StreamKind::FfnOut}) {
      for (const auto& sub : p.at(s, l).subdominant) {
        if (sub == x) {
          ++e.subdominant_hits;
          break;
        }
      }
    }
  }
  e.sad_flag = !e.attn_dominant_ever && !e.ffn_dominant_ever;
  e.stabilization_layer = stabilization_layer(step);
  for (StreamKind s : kAllStreams) e.rank1_change_mask[index_of(s)] = rank1_change_column(step, s);
  return e;
}

struct SadReport {
  std::size_t skip_layers = 0;
  std::vector<SadEntry> entries;

  std::size_t flagged() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.sad_flag ? 1 : 0;
    return n;
  }
};

inline SadReport sad_report(const DecodeTrace& trace, std::size_t skip_layers) {
  SadReport r{skip_layers, {}};
  for (const auto& st : trace.steps) r.entries.push_back(detect_sad(st, skip_layers));
  return r;
}

// First five candidates per layer, in score order.
inline std::vector<std::vector<Candidate>> top5_table(const StepTrace& step, StreamKind stream) {
  std::vector<std::vector<Candidate>> table;
  for (const auto& rec : step.layers) {
    const auto& list = rec.stream(stream);
    if (list.size() < 5) throw AnalysisError("top5_table needs at least 5 candidates per layer");
    table.emplace_back(list.begin(), list.begin() + 5);
  }
  return table;
}

}  // namespace lensvdc
