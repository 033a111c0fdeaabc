#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lensvdc/tokens.hpp"

namespace lensvdc {

inline constexpr int kTraceVersion = 1;
inline constexpr std::size_t kDefaultTopK = 10;
inline constexpr double kRatioTolerance = 1e-6;

// Half-open [begin, end) range of prompt positions.
struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end > begin ? end - begin : 0; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t pos) const { return pos >= begin && pos < end; }
  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

struct SegmentMap {
  TokenRange system;
  TokenRange vision;
  TokenRange instruction;
  std::size_t output_start = 0;

  friend bool operator==(const SegmentMap&, const SegmentMap&) = default;
};

// Order of the four token groups in LayerRecord::group_ratio.
enum class TokenGroup : std::uint8_t { System = 0, Vision = 1, Instruction = 2, Output = 3 };
inline constexpr std::array<const char*, 4> kGroupNames = {"system", "vision", "instruction", "output"};

struct GridShape {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t cells() const { return h * w; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

struct LayerRecord {
  std::size_t layer = 0;  // 1-based
  std::array<double, 4> group_ratio{};
  std::optional<std::vector<double>> visual_grid;       // h*w, row-major
  std::optional<std::vector<double>> instruction_attn;  // one entry per instruction token
  std::array<std::vector<Candidate>, 3> streams;        // indexed by StreamKind

  const std::vector<Candidate>& stream(StreamKind s) const { return streams[index_of(s)]; }
  std::vector<Candidate>& stream(StreamKind s) { return streams[index_of(s)]; }

  friend bool operator==(const LayerRecord&, const LayerRecord&) = default;
};

struct StepTrace {
  std::size_t t = 0;  // 1-based output position
  Candidate emitted;
  std::vector<LayerRecord> layers;

  friend bool operator==(const StepTrace&, const StepTrace&) = default;
};

struct DecodeTrace {
  int version = kTraceVersion;
  std::size_t num_layers = 0;
  std::size_t vocab_size = 0;
  std::size_t topk = kDefaultTopK;
  std::optional<GridShape> grid;
  SegmentMap segments;
  std::vector<StepTrace> steps;
  std::map<std::string, std::string> meta;

  friend bool operator==(const DecodeTrace&, const DecodeTrace&) = default;
};

struct Violation {
  std::size_t step = 0;   // 0 = header
  std::size_t layer = 0;  // 0 = not layer specific
  std::string field;
  std::string message;

  std::string to_string() const {
    std::string s = field + ": " + message;
    if (step > 0) s += " at step " + std::to_string(step);
    if (layer > 0) s += " layer " + std::to_string(layer);
    return s;
  }
};

struct ValidationError : std::runtime_error {
  std::vector<Violation> violations;
  explicit ValidationError(std::vector<Violation> v)
      : std::runtime_error(summarize(v)), violations(std::move(v)) {}

 private:
  static std::string summarize(const std::vector<Violation>& v) {
    std::string s = "trace failed validation (" + std::to_string(v.size()) + " violation(s))";
    for (std::size_t i = 0; i < v.size() && i < 5; ++i) s += "\n  " + v[i].to_string();
    return s;
  }
};

struct ParseError : std::runtime_error {
  std::size_t line;
  ParseError(std::size_t line_no, const std::string& what)
      : std::runtime_error("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

class ViolationSink {
 public:
  explicit ViolationSink(std::vector<Violation>& out) : out_(out) {}
  void add(std::size_t step, std::size_t layer, std::string field, std::string message) {
    out_.push_back({step, layer, std::move(field), std::move(message)});
  }

 private:
  std::vector<Violation>& out_;
};

inline void check_candidate(const Candidate& c, std::size_t vocab_size,
                            const std::vector<std::string>& markers, std::size_t step,
                            std::size_t layer, const std::string& field, ViolationSink& sink) {
  if (!std::isfinite(c.score)) sink.add(step, layer, field, "non-finite score");
  if (vocab_size > 0 && c.token_id >= vocab_size) {
    sink.add(step, layer, field, "token id " + std::to_string(c.token_id) + " >= vocab_size");
  }
  if (c.normalized != normalize_token(c.surface, markers)) {
    sink.add(step, layer, field, "normalized form does not match surface '" + c.surface + "'");
  }
}

}  // namespace detail

// Checks every structural invariant of a trace. Total: never throws on any
// value a parser can produce.
inline std::vector<Violation> validate(const DecodeTrace& trace,
                                       const std::vector<std::string>& markers = default_markers()) {
  std::vector<Violation> out;
  detail::ViolationSink sink(out);

  if (trace.version != kTraceVersion) {
    sink.add(0, 0, "version", "unsupported version " + std::to_string(trace.version));
  }
  if (trace.num_layers < 1) sink.add(0, 0, "num_layers", "must be >= 1");
  if (trace.topk < 5) sink.add(0, 0, "topk", "must be >= 5");
  if (trace.vocab_size < trace.topk) sink.add(0, 0, "vocab_size", "smaller than topk");
  if (trace.grid && trace.grid->cells() == 0) sink.add(0, 0, "grid", "empty grid");

  const SegmentMap& seg = trace.segments;
  if (seg.system.end < seg.system.begin) sink.add(0, 0, "segments.system", "end before begin");
  if (seg.vision.empty()) sink.add(0, 0, "segments.vision", "empty range");
  if (seg.instruction.empty()) sink.add(0, 0, "segments.instruction", "empty range");
  if (seg.system.end > seg.vision.begin) sink.add(0, 0, "segments", "system overlaps or follows vision");
  if (seg.vision.end > seg.instruction.begin) {
    sink.add(0, 0, "segments", "vision overlaps or follows instruction");
  }
  if (seg.instruction.end > seg.output_start) {
    sink.add(0, 0, "segments", "instruction overlaps or follows output_start");
  }

  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const StepTrace& step = trace.steps[i];
    const std::size_t t = i + 1;
    if (step.t != t) {
      sink.add(t, 0, "t", "expected " + std::to_string(t) + ", found " + std::to_string(step.t));
    }
    detail::check_candidate(step.emitted, trace.vocab_size, markers, t, 0, "emitted", sink);
    if (step.layers.size() != trace.num_layers) {
      sink.add(t, 0, "layers", "expected " + std::to_string(trace.num_layers) + " layers, found " +
                                   std::to_string(step.layers.size()));
    }
    for (std::size_t j = 0; j < step.layers.size(); ++j) {
      const LayerRecord& rec = step.layers[j];
      const std::size_t l = j + 1;
      if (rec.layer != l) {
        sink.add(t, l, "layer", "expected index " + std::to_string(l) + ", found " +
                                    std::to_string(rec.layer));
      }
      double sum = 0.0;
      bool bad = false;
      for (double r : rec.group_ratio) {
        if (!std::isfinite(r) || r < 0.0) bad = true;
        sum += r;
      }
      if (bad || !(std::abs(sum - 1.0) <= kRatioTolerance)) {
        sink.add(t, l, "group_ratio", "ratio sum/negativity");
      }
      if (rec.visual_grid) {
        if (!trace.grid) {
          sink.add(t, l, "visual_grid", "present but header has no grid");
        } else if (rec.visual_grid->size() != trace.grid->cells()) {
          sink.add(t, l, "visual_grid", "size " + std::to_string(rec.visual_grid->size()) +
                                            " != h*w " + std::to_string(trace.grid->cells()));
        }
        for (double v : *rec.visual_grid) {
          if (!std::isfinite(v) || v < 0.0) {
            sink.add(t, l, "visual_grid", "negative or non-finite entry");
            break;
          }
        }
      }
      if (rec.instruction_attn) {
        if (rec.instruction_attn->size() != seg.instruction.size()) {
          sink.add(t, l, "instruction_attn", "size " + std::to_string(rec.instruction_attn->size()) +
                                                 " != instruction length");
        }
        for (double v : *rec.instruction_attn) {
          if (!std::isfinite(v) || v < 0.0) {
            sink.add(t, l, "instruction_attn", "negative or non-finite entry");
            break;
          }
        }
      }
      for (StreamKind s : kAllStreams) {
        const auto& list = rec.stream(s);
        const std::string field = "streams." + std::string(stream_key(s));
        if (list.size() != trace.topk) {
          sink.add(t, l, field, "length " + std::to_string(list.size()) + " != topk " +
                                    std::to_string(trace.topk));
        }
        for (std::size_t k = 0; k < list.size(); ++k) {
          detail::check_candidate(list[k], trace.vocab_size, markers, t, l, field, sink);
          if (k > 0 && list[k].score > list[k - 1].score) {
            sink.add(t, l, field, "not sorted by score descending");
            break;
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines serialization

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson candidate_to_json(const Candidate& c) {
  ojson j;
  j["id"] = c.token_id;
  j["surface"] = c.surface;
  j["normalized"] = c.normalized;
  j["score"] = c.score;
  return j;
}

inline ojson header_to_json(const DecodeTrace& tr) {
  ojson j;
  j["version"] = tr.version;
  j["num_layers"] = tr.num_layers;
  j["vocab_size"] = tr.vocab_size;
  j["topk"] = tr.topk;
  if (tr.grid) j["grid"] = ojson{{"h", tr.grid->h}, {"w", tr.grid->w}};
  ojson seg;
  seg["system"] = {tr.segments.system.begin, tr.segments.system.end};
  seg["vision"] = {tr.segments.vision.begin, tr.segments.vision.end};
  seg["instruction"] = {tr.segments.instruction.begin, tr.segments.instruction.end};
  seg["output_start"] = tr.segments.output_start;
  j["segments"] = std::move(seg);
  ojson meta = ojson::object();
  for (const auto& [k, v] : tr.meta) meta[k] = v;
  j["meta"] = std::move(meta);
  return j;
}

inline ojson step_to_json(const StepTrace& st) {
  ojson j;
  j["t"] = st.t;
  j["emitted"] = candidate_to_json(st.emitted);
  ojson layers = ojson::array();
  for (const auto& rec : st.layers) {
    ojson lj;
    lj["layer"] = rec.layer;
    lj["group_ratio"] = rec.group_ratio;
    if (rec.visual_grid) lj["visual_grid"] = *rec.visual_grid;
    if (rec.instruction_attn) lj["instruction_attn"] = *rec.instruction_attn;
    ojson streams;
    for (StreamKind s : kAllStreams) {
      ojson arr = ojson::array();
      for (const auto& c : rec.stream(s)) arr.push_back(candidate_to_json(c));
      streams[std::string(stream_key(s))] = std::move(arr);
    }
    lj["streams"] = std::move(streams);
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j;
}

// Field access that reports the line number on type/presence errors and
// records unknown keys.
class LineReader {
 public:
  LineReader(std::size_t line, std::vector<std::string>* warnings) : line_(line), warnings_(warnings) {}

  const nlohmann::json& require(const nlohmann::json& obj, const char* key, const std::string& ctx) const {
    auto it = obj.find(key);
    if (it == obj.end()) throw ParseError(line_, "missing field '" + ctx + key + "'");
    return *it;
  }

  template <typename T>
  T get(const nlohmann::json& obj, const char* key, const std::string& ctx) const {
    const auto& v = require(obj, key, ctx);
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ParseError(line_, "field '" + ctx + key + "' has the wrong type");
    }
  }

  void object(const nlohmann::json& obj, const std::string& ctx) const {
    if (!obj.is_object()) throw ParseError(line_, "expected object for '" + ctx + "'");
  }

  void warn_unknown(const nlohmann::json& obj, std::initializer_list<const char*> known,
                    const std::string& ctx) const {
    if (!warnings_) return;
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      bool found = false;
      for (const char* k : known) found = found || it.key() == k;
      if (!found) {
        warnings_->push_back("line " + std::to_string(line_) + ": ignoring unknown field '" + ctx +
                             it.key() + "'");
      }
    }
  }

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
  std::vector<std::string>* warnings_;
};

inline TokenRange range_from_json(const LineReader& r, const nlohmann::json& seg, const char* key) {
  auto v = r.get<std::vector<std::size_t>>(seg, key, "segments.");
  if (v.size() != 2) throw ParseError(r.line(), std::string("segments.") + key + " must be [begin, end]");
  return {v[0], v[1]};
}

inline Candidate candidate_from_json(const LineReader& r, const nlohmann::json& j, const std::string& ctx) {
  r.object(j, ctx);
  Candidate c;
  c.token_id = r.get<TokenId>(j, "id", ctx + ".");
  c.surface = r.get<std::string>(j, "surface", ctx + ".");
  c.normalized = r.get<std::string>(j, "normalized", ctx + ".");
  c.score = r.get<double>(j, "score", ctx + ".");
  r.warn_unknown(j, {"id", "surface", "normalized", "score"}, ctx + ".");
  return c;
}

inline void header_from_json(const LineReader& r, const nlohmann::json& j, DecodeTrace& tr) {
  r.object(j, "header");
  tr.version = r.get<int>(j, "version", "");
  if (tr.version != kTraceVersion) {
    throw ParseError(r.line(), "unsupported version " + std::to_string(tr.version));
  }
  tr.num_layers = r.get<std::size_t>(j, "num_layers", "");
  tr.vocab_size = r.get<std::size_t>(j, "vocab_size", "");
  tr.topk = r.get<std::size_t>(j, "topk", "");
  if (auto it = j.find("grid"); it != j.end()) {
    r.object(*it, "grid");
    tr.grid = GridShape{r.get<std::size_t>(*it, "h", "grid."), r.get<std::size_t>(*it, "w", "grid.")};
  }
  const auto& seg = r.require(j, "segments", "");
  r.object(seg, "segments");
  tr.segments.system = range_from_json(r, seg, "system");
  tr.segments.vision = range_from_json(r, seg, "vision");
  tr.segments.instruction = range_from_json(r, seg, "instruction");
  tr.segments.output_start = r.get<std::size_t>(seg, "output_start", "segments.");
  r.warn_unknown(seg, {"system", "vision", "instruction", "output_start"}, "segments.");
  if (auto it = j.find("meta"); it != j.end()) {
    r.object(*it, "meta");
    for (auto m = it->begin(); m != it->end(); ++m) {
      tr.meta[m.key()] = m->is_string() ? m->get<std::string>() : m->dump();
    }
  }
  r.warn_unknown(j, {"version", "num_layers", "vocab_size", "topk", "grid", "segments", "meta"}, "");
}

inline StepTrace step_from_json(const LineReader& r, const nlohmann::json& j) {
  r.object(j, "step");
  StepTrace st;
  st.t = r.get<std::size_t>(j, "t", "");
  st.emitted = candidate_from_json(r, r.require(j, "emitted", ""), "emitted");
  const auto& layers = r.require(j, "layers", "");
  if (!layers.is_array()) throw ParseError(r.line(), "field 'layers' must be an array");
  for (const auto& lj : layers) {
    r.object(lj, "layers[]");
    LayerRecord rec;
    rec.layer = r.get<std::size_t>(lj, "layer", "layers[].");
    auto ratio = r.get<std::vector<double>>(lj, "group_ratio", "layers[].");
    if (ratio.size() != 4) throw ParseError(r.line(), "group_ratio must have 4 entries");
    std::copy(ratio.begin(), ratio.end(), rec.group_ratio.begin());
    if (lj.contains("visual_grid")) {
      rec.visual_grid = r.get<std::vector<double>>(lj, "visual_grid", "layers[].");
    }
    if (lj.contains("instruction_attn")) {
      rec.instruction_attn = r.get<std::vector<double>>(lj, "instruction_attn", "layers[].");
    }
    const auto& streams = r.require(lj, "streams", "layers[].");
    r.object(streams, "streams");
    for (StreamKind s : kAllStreams) {
      const std::string key(stream_key(s));
      const auto& arr = r.require(streams, key.c_str(), "streams.");
      if (!arr.is_array()) throw ParseError(r.line(), "streams." + key + " must be an array");
      for (const auto& cj : arr) rec.stream(s).push_back(candidate_from_json(r, cj, "streams." + key));
    }
    r.warn_unknown(streams, {"layer", "attn", "ffn"}, "streams.");
    r.warn_unknown(lj, {"layer", "group_ratio", "visual_grid", "instruction_attn", "streams"}, "layers[].");
    st.layers.push_back(std::move(rec));
  }
  r.warn_unknown(j, {"t", "emitted", "layers"}, "");
  return st;
}

}  // namespace detail

inline void write_trace(const DecodeTrace& trace, std::ostream& sink) {
  auto violations = validate(trace);
  if (!violations.empty()) throw ValidationError(std::move(violations));
  sink << detail::header_to_json(trace).dump() << '\n';
  for (const auto& st : trace.steps) sink << detail::step_to_json(st).dump() << '\n';
  sink.flush();
  if (!sink) throw IoError("write_trace: output stream failure");
}

inline std::string trace_to_string(const DecodeTrace& trace) {
  std::ostringstream os;
  write_trace(trace, os);
  return os.str();
}

// Parses a trace; unknown fields are reported through `warnings` when given.
inline DecodeTrace read_trace(std::istream& source, std::vector<std::string>* warnings = nullptr) {
  DecodeTrace tr;
  std::string line;
  std::size_t line_no = 0;
  std::size_t last_complete = 0;
  bool have_header = false;
  while (std::getline(source, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON (last complete line ") +
                                    std::to_string(last_complete) + "): " + e.what());
    }
    detail::LineReader reader(line_no, warnings);
    if (!have_header) {
      detail::header_from_json(reader, j, tr);
      have_header = true;
    } else {
      tr.steps.push_back(detail::step_from_json(reader, j));
    }
    last_complete = line_no;
  }
  if (source.bad()) throw IoError("read_trace: input stream failure");
  if (!have_header) throw ParseError(line_no, "missing header line");
  auto violations = validate(tr);
  if (!violations.empty()) throw ValidationError(std::move(violations));
  return tr;
}

inline DecodeTrace trace_from_string(const std::string& text, std::vector<std::string>* warnings = nullptr) {
  std::istringstream is(text);
  return read_trace(is, warnings);
}

}  // namespace lensvdc
