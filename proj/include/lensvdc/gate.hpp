#pragma once

// Perception analyses over a trace: token-group attention ratios per layer,
// stage-averaged visual heatmaps and their difference maps.

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "lensvdc/core_tensor.hpp"
#include "lensvdc/trace.hpp"

namespace lensvdc {

// Raised when an analysis needs an optional trace field that is absent.
struct MissingField : std::runtime_error {
  std::string field;
  explicit MissingField(std::string name)
      : std::runtime_error("trace lacks required field '" + name + "'"), field(std::move(name)) {}
};

struct AnalysisError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Stage {
  std::string name;
  std::size_t first = 1;  // inclusive, 1-based
  std::size_t last = 1;   // inclusive

  std::size_t size() const { return last - first + 1; }
  friend bool operator==(const Stage&, const Stage&) = default;
};

struct StageSpec {
  std::vector<Stage> stages;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

inline void check_stages(const StageSpec& spec, std::size_t num_layers) {
  if (spec.stages.size() < 2) throw AnalysisError("a stage spec needs at least 2 stages");
  std::size_t expect = 1;
  for (const auto& s : spec.stages) {
    if (s.first != expect || s.last < s.first) {
      throw AnalysisError("stage '" + s.name + "' does not continue the partition at layer " +
                          std::to_string(expect));
    }
    expect = s.last + 1;
  }
  if (expect != num_layers + 1) {
    throw AnalysisError("stages cover layers 1.." + std::to_string(expect - 1) + " but the trace has " +
                        std::to_string(num_layers));
  }
}

// Four stages with boundaries scaled from a 32-layer reference at layers 2, 16
// and 26, each stage kept non-empty.
inline StageSpec default_stages(std::size_t num_layers) {
  if (num_layers < 4) throw AnalysisError("default_stages needs at least 4 layers");
  const double L = static_cast<double>(num_layers);
  auto scaled = [L](double ref) { return static_cast<std::size_t>(std::round(L * ref / 32.0)); };
  std::size_t b1 = scaled(2), b2 = scaled(16), b3 = scaled(26);
  b1 = std::max<std::size_t>(b1, 1);
  b2 = std::max(b2, b1 + 1);
  b3 = std::max(b3, b2 + 1);
  b3 = std::min(b3, num_layers - 1);
  b2 = std::min(b2, b3 - 1);
  b1 = std::min(b1, b2 - 1);
  return StageSpec{{{"Global", 1, b1}, {"Approach", b1 + 1, b2}, {"Tighten", b2 + 1, b3},
                    {"Explore", b3 + 1, num_layers}}};
}

// Parses "Name:first-last,Name:first-last,...".
inline StageSpec parse_stages(const std::string& text) {
  StageSpec spec;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    const std::size_t colon = item.find(':');
    const std::size_t dash = item.find('-', colon == std::string::npos ? 0 : colon);
    if (colon == std::string::npos || dash == std::string::npos) {
      throw AnalysisError("bad stage item '" + item + "', expected Name:first-last");
    }
    try {
      spec.stages.push_back({item.substr(0, colon), std::stoul(item.substr(colon + 1, dash - colon - 1)),
                             std::stoul(item.substr(dash + 1))});
    } catch (const std::logic_error&) {
      throw AnalysisError("bad layer numbers in stage item '" + item + "'");
    }
    pos = comma + 1;
  }
  return spec;
}

// Mean over output steps of each layer's group_ratio: L×4 (system, vision,
// instruction, output).
inline Matrix attention_ratios(const DecodeTrace& trace) {
  if (trace.steps.empty()) throw AnalysisError("empty trace");
  Matrix out(trace.num_layers, 4);
  for (const auto& st : trace.steps) {
    for (const auto& rec : st.layers) {
      for (std::size_t g = 0; g < 4; ++g) out(rec.layer - 1, g) += rec.group_ratio[g];
    }
  }
  const double n = static_cast<double>(trace.steps.size());
  for (double& v : out.data()) v /= n;
  return out;
}

inline Matrix stage_average(const DecodeTrace& trace, std::size_t first, std::size_t last) {
  if (trace.steps.empty()) throw AnalysisError("empty trace");
  if (!trace.grid) throw MissingField("grid");
  if (first < 1 || last < first || last > trace.num_layers) {
    throw AnalysisError("stage range " + std::to_string(first) + "-" + std::to_string(last) +
                        " outside 1.." + std::to_string(trace.num_layers));
  }
  Matrix out(trace.grid->h, trace.grid->w);
  for (const auto& st : trace.steps) {
    for (std::size_t l = first; l <= last; ++l) {
      const auto& grid = st.layers[l - 1].visual_grid;
      if (!grid) throw MissingField("visual_grid");
      for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += (*grid)[i];
    }
  }
  const double n = static_cast<double>(trace.steps.size() * (last - first + 1));
  for (double& v : out.data()) v /= n;
  return out;
}

inline Matrix stage_average(const DecodeTrace& trace, const Stage& stage) {
  return stage_average(trace, stage.first, stage.last);
}

namespace detail {
inline Matrix subtract(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}
}  // namespace detail

// Per stage: stage average minus the average over all layers and steps.
inline std::vector<Matrix> stage_to_global(const DecodeTrace& trace, const StageSpec& stages) {
  check_stages(stages, trace.num_layers);
  const Matrix global = stage_average(trace, 1, trace.num_layers);
  std::vector<Matrix> out;
  for (const auto& s : stages.stages) out.push_back(detail::subtract(stage_average(trace, s), global));
  return out;
}

// For consecutive stages i, i+1: average(i+1) - average(i).
inline std::vector<Matrix> inter_stage(const DecodeTrace& trace, const StageSpec& stages) {
  check_stages(stages, trace.num_layers);
  std::vector<Matrix> avgs;
  for (const auto& s : stages.stages) avgs.push_back(stage_average(trace, s));
  std::vector<Matrix> out;
  for (std::size_t i = 0; i + 1 < avgs.size(); ++i) out.push_back(detail::subtract(avgs[i + 1], avgs[i]));
  return out;
}

// L × |instruction|: mean over steps of the per-token instruction attention.
inline Matrix instruction_heatmap(const DecodeTrace& trace) {
  if (trace.steps.empty()) throw AnalysisError("empty trace");
  const std::size_t n = trace.segments.instruction.size();
  Matrix out(trace.num_layers, n);
  for (const auto& st : trace.steps) {
    for (const auto& rec : st.layers) {
      if (!rec.instruction_attn) throw MissingField("instruction_attn");
      for (std::size_t i = 0; i < n; ++i) out(rec.layer - 1, i) += (*rec.instruction_attn)[i];
    }
  }
  const double steps = static_cast<double>(trace.steps.size());
  for (double& v : out.data()) v /= steps;
  return out;
}

struct GateReport {
  StageSpec stages;
  Matrix ratios;
  std::vector<Matrix> stage_avg;
  std::vector<Matrix> stage_to_global;
  std::vector<Matrix> inter_stage;
};

// Ratios always; heatmaps and difference maps only when `with_heatmaps`.
inline GateReport gate_report(const DecodeTrace& trace, const StageSpec& stages, bool with_heatmaps) {
  check_stages(stages, trace.num_layers);
  GateReport r;
  r.stages = stages;
  r.ratios = attention_ratios(trace);
  if (with_heatmaps) {
    for (const auto& s : stages.stages) r.stage_avg.push_back(stage_average(trace, s));
    r.stage_to_global = stage_to_global(trace, stages);
    r.inter_stage = inter_stage(trace, stages);
  }
  return r;
}

}  // namespace lensvdc
