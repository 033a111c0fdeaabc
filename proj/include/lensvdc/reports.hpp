#pragma once

// JSON and CSV renderings of analysis results. JSON objects keep insertion
// order; CSV numbers use the shortest round-trip decimal form.

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lensvdc/chair.hpp"
#include "lensvdc/core_tensor.hpp"
#include "lensvdc/gate.hpp"
#include "lensvdc/sad.hpp"
#include "lensvdc/vdc.hpp"

namespace lensvdc {

using ojson = nlohmann::ordered_json;

inline std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline ojson to_json(const Candidate& c) {
  ojson j;
  j["id"] = c.token_id;
  j["surface"] = c.surface;
  j["normalized"] = c.normalized;
  j["score"] = c.score;
  return j;
}

inline ojson to_json(const VdcConfig& cfg) {
  ojson j;
  j["validation"] = std::string(to_string(cfg.validation));
  j["correction"] = std::string(to_string(cfg.correction));
  j["skip_layers"] = cfg.skip_layers;
  j["tie_break"] = std::string(to_string(cfg.tie_break));
  j["feedback"] = cfg.feedback;
  return j;
}

inline ojson to_json(const VdcStepReport& r) {
  ojson j;
  j["t"] = r.t;
  j["original"] = to_json(r.original);
  j["validated"] = r.validated;
  j["replacement"] = r.replacement ? to_json(*r.replacement) : ojson(nullptr);
  ojson counts = ojson::object();
  for (const auto& tc : r.counts) counts[tc.token] = tc.count;
  j["counts"] = std::move(counts);
  ojson wit = ojson::array();
  for (const auto& w : r.witnesses) {
    wit.push_back(ojson{{"layer", w.layer}, {"stream", std::string(stream_key(w.stream))}});
  }
  j["witness_layers"] = std::move(wit);
  return j;
}

inline ojson vdc_report_json(const VdcResult& res, const VdcConfig& cfg, bool online) {
  ojson j;
  j["mode"] = online ? "online" : "offline";
  j["config"] = to_json(cfg);
  j["replaced"] = res.replaced();
  ojson seq = ojson::array();
  ojson ids = ojson::array();
  for (const auto& c : res.corrected) {
    seq.push_back(c.normalized);
    ids.push_back(c.token_id);
  }
  j["corrected"] = std::move(seq);
  j["corrected_ids"] = std::move(ids);
  ojson steps = ojson::array();
  for (const auto& r : res.reports) steps.push_back(to_json(r));
  j["steps"] = std::move(steps);
  return j;
}

inline ojson sad_report_json(const SadReport& rep) {
  ojson j;
  j["skip_layers"] = rep.skip_layers;
  j["steps_total"] = rep.entries.size();
  j["flagged"] = rep.flagged();
  ojson steps = ojson::array();
  for (const auto& e : rep.entries) {
    ojson s;
    s["t"] = e.t;
    s["emitted"] = to_json(e.emitted);
    s["sad_flag"] = e.sad_flag;
    s["attn_dominant_ever"] = e.attn_dominant_ever;
    s["ffn_dominant_ever"] = e.ffn_dominant_ever;
    s["subdominant_hits"] = e.subdominant_hits;
    s["stabilization_layer"] = e.stabilization_layer ? ojson(*e.stabilization_layer) : ojson(nullptr);
    ojson masks;
    for (StreamKind k : kAllStreams) {
      ojson bits = ojson::array();
      for (bool b : e.rank1_change_mask[index_of(k)]) bits.push_back(b ? 1 : 0);
      masks[std::string(stream_key(k))] = std::move(bits);
    }
    s["rank1_changes"] = std::move(masks);
    steps.push_back(std::move(s));
  }
  j["steps"] = std::move(steps);
  return j;
}

inline ojson chair_json(const ChairResult& r) {
  ojson j;
  j["chair_s"] = r.chair_s;
  j["chair_i"] = r.chair_i;
  j["captions"] = r.captions;
  j["hallucinated_captions"] = r.hallucinated_captions;
  j["mentions"] = r.mentions;
  j["hallucinated_mentions"] = r.hallucinated_mentions;
  ojson details = ojson::array();
  for (const auto& d : r.details) details.push_back(ojson{{"mentioned", d.mentioned}, {"hallucinated", d.hallucinated}});
  j["details"] = std::move(details);
  return j;
}

inline ojson stages_json(const StageSpec& spec) {
  ojson arr = ojson::array();
  for (const auto& s : spec.stages) arr.push_back(ojson{{"name", s.name}, {"first", s.first}, {"last", s.last}});
  return arr;
}

// ---------------------------------------------------------------------------
// CSV

namespace csv {

inline void grid(std::ostream& os, const Matrix& m) {
  os << "row";
  for (std::size_t c = 0; c < m.cols(); ++c) os << ",c" << c;
  os << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    os << r;
    for (std::size_t c = 0; c < m.cols(); ++c) os << ',' << format_double(m(r, c));
    os << '\n';
  }
}

// Inverse of grid(): skips the header and the leading row-index column.
inline Matrix read_grid(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("grid csv: missing header");
  std::vector<double> data;
  std::size_t rows = 0, cols = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc()) throw std::invalid_argument("grid csv: bad number '" + cell + "'");
      data.push_back(v);
      ++n;
    }
    if (rows > 0 && n != cols) throw std::invalid_argument("grid csv: ragged rows");
    cols = n;
    ++rows;
  }
  return Matrix(rows, cols, std::move(data));
}

inline void ratios(std::ostream& os, const Matrix& m) {
  os << "layer,system,vision,instruction,output\n";
  for (std::size_t l = 0; l < m.rows(); ++l) {
    os << l + 1;
    for (std::size_t g = 0; g < m.cols(); ++g) os << ',' << format_double(m(l, g));
    os << '\n';
  }
}

inline void instruction_heatmap(std::ostream& os, const Matrix& m, std::size_t first_position) {
  os << "layer";
  for (std::size_t c = 0; c < m.cols(); ++c) os << ",pos" << first_position + c;
  os << '\n';
  for (std::size_t l = 0; l < m.rows(); ++l) {
    os << l + 1;
    for (std::size_t c = 0; c < m.cols(); ++c) os << ',' << format_double(m(l, c));
    os << '\n';
  }
}

inline std::string quote(const std::string& s) {
  bool needs = s.find_first_of(",\"\n\r") != std::string::npos || s.empty();
  if (!needs) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline void top5(std::ostream& os, const std::vector<std::vector<Candidate>>& table) {
  os << "layer";
  for (int r = 1; r <= 5; ++r) os << ",rank" << r << ",score" << r;
  os << '\n';
  for (std::size_t l = 0; l < table.size(); ++l) {
    os << l + 1;
    for (const auto& c : table[l]) os << ',' << quote(c.normalized) << ',' << format_double(c.score);
    os << '\n';
  }
}

inline void change_mask(std::ostream& os, const ChangeMask& m) {
  os << "layer";
  for (std::size_t t = 1; t <= m.steps; ++t) os << ",t" << t;
  os << '\n';
  for (std::size_t l = 1; l <= m.layers; ++l) {
    os << l;
    for (std::size_t t = 1; t <= m.steps; ++t) os << ',' << (m.at(l, t) ? 1 : 0);
    os << '\n';
  }
}

inline void histogram(std::ostream& os, const std::vector<HistogramBin>& bins) {
  os << "layer,replacements,occurrences\n";
  for (const auto& b : bins) os << b.layer << ',' << b.replacements << ',' << b.occurrences << '\n';
}

}  // namespace csv

}  // namespace lensvdc
