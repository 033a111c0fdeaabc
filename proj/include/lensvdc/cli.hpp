#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 validation
// error (bad trace, missing field, inconsistent flags), 3 I/O error.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lensvdc/chair.hpp"
#include "lensvdc/gate.hpp"
#include "lensvdc/reports.hpp"
#include "lensvdc/sad.hpp"
#include "lensvdc/toy_decoder.hpp"
#include "lensvdc/trace.hpp"
#include "lensvdc/vdc.hpp"

namespace lensvdc::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kInvalid = 2, kIo = 3 };

namespace detail {

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error reading '" + path + "'");
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("error writing '" + path + "'");
}

inline nlohmann::json read_json(const std::string& path) {
  const std::string text = read_text(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, "'" + path + "': " + e.what());
  }
}

inline DecodeTrace load_trace(const std::string& path, std::ostream& err) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::string> warnings;
  DecodeTrace tr = read_trace(in, &warnings);
  for (const auto& w : warnings) err << "warning: " << w << '\n';
  return tr;
}

// Writes to `path`, or to `out` when the path is empty or "-".
inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
  } else {
    write_text(path, text);
  }
}

inline std::string json_text(const ojson& j) { return j.dump(2) + "\n"; }

inline std::string file_safe(const std::string& name) {
  std::string s;
  for (char c : name) s += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return s;
}

struct ModelFlags {
  std::string model_path;
  ModelConfig config;
  std::uint64_t seed = 0;
};

inline void add_model_flags(CLI::App* app, ModelFlags& f, bool allow_file) {
  if (allow_file) app->add_option("--model", f.model_path, "Model file written by 'model new'");
  app->add_option("--layers", f.config.num_layers, "Number of decoder layers")->capture_default_str();
  app->add_option("--hidden", f.config.hidden_dim, "Hidden size")->capture_default_str();
  app->add_option("--heads", f.config.num_heads, "Attention heads")->capture_default_str();
  app->add_option("--ffn", f.config.ffn_dim, "FFN inner size")->capture_default_str();
  app->add_option("--vocab-size", f.config.vocab_size, "Vocabulary size")->capture_default_str();
  app->add_option("--max-context", f.config.max_context, "Maximum context length")->capture_default_str();
  app->add_option("--grid-h", f.config.grid.h, "Visual grid height")->capture_default_str();
  app->add_option("--grid-w", f.config.grid.w, "Visual grid width")->capture_default_str();
  app->add_option("--seed", f.seed, "Weight seed")->capture_default_str();
}

inline ToyModel resolve_model(const ModelFlags& f) {
  if (!f.model_path.empty()) return model_from_json(read_json(f.model_path));
  return new_model(f.config, f.seed);
}

struct VdcFlags {
  std::string validation = "attn-ffn";
  std::string correction = "attn-ffn-layer";
  std::size_t skip_layers = 0;
  std::string tie_break = "deepest";
  bool feedback = true;

  VdcConfig resolve() const {
    VdcConfig c;
    c.validation = parse_source(validation);
    c.correction = parse_source(correction);
    c.skip_layers = skip_layers;
    c.tie_break = parse_tie_break(tie_break);
    c.feedback = feedback;
    return c;
  }
};

inline void add_vdc_flags(CLI::App* app, VdcFlags& f, bool online) {
  const std::set<std::string> sources = {"layer", "attn-ffn", "attn-ffn-layer"};
  app->add_option("--validation", f.validation, "Validation source")
      ->check(CLI::IsMember(sources))
      ->capture_default_str();
  app->add_option("--correction", f.correction, "Correction source")
      ->check(CLI::IsMember(sources))
      ->capture_default_str();
  app->add_option("--skip-layers", f.skip_layers, "Ignore the first N layers (presets 0, 2, 10, 16)")
      ->capture_default_str();
  app->add_option("--tie-break", f.tie_break, "Replacement tie rule")
      ->check(CLI::IsMember({"deepest", "shallowest"}))
      ->capture_default_str();
  if (online) app->add_flag("--feedback,!--no-feedback", f.feedback, "Feed corrected tokens back (default on)");
}

struct GenFlags {
  std::string vocab_path;
  std::size_t max_new = 16;
  std::size_t topk = kDefaultTopK;
  std::size_t system_len = 4;
  std::size_t instruction_len = 6;
  std::uint64_t prompt_seed = 0;
  std::optional<TokenId> stop_token;
  std::string head_aggregation = "mean";
  std::string lens = "final-norm";
};

inline void add_gen_flags(CLI::App* app, GenFlags& f) {
  app->add_option("--vocab", f.vocab_path, "Vocabulary JSON (array of surfaces); built-in if absent");
  app->add_option("--max-new", f.max_new, "Tokens to generate")->capture_default_str();
  app->add_option("--topk", f.topk, "Candidates recorded per stream and layer")->capture_default_str();
  app->add_option("--system-len", f.system_len, "Synthetic prompt system tokens")->capture_default_str();
  app->add_option("--instruction-len", f.instruction_len, "Synthetic prompt instruction tokens")
      ->capture_default_str();
  app->add_option("--prompt-seed", f.prompt_seed, "Seed for the synthetic prompt")->capture_default_str();
  app->add_option("--stop-token", f.stop_token, "Stop after emitting this token id");
  app->add_option("--head-aggregation", f.head_aggregation, "Head aggregation for heatmaps")
      ->check(CLI::IsMember({"mean", "max"}))
      ->capture_default_str();
  app->add_option("--lens", f.lens, "Lens projection")
      ->check(CLI::IsMember({"final-norm", "raw"}))
      ->capture_default_str();
}

struct GenContext {
  ToyModel model;
  Vocab vocab;
  Prompt prompt;
  GenerateOptions opts;
};

inline GenContext resolve_generation(const ModelFlags& mf, const GenFlags& gf) {
  GenContext c{resolve_model(mf), {}, {}, {}};
  c.vocab = gf.vocab_path.empty() ? toy_vocab(c.model.config.vocab_size) : vocab_from_json(read_json(gf.vocab_path));
  c.prompt = synthetic_prompt(c.model.config, gf.prompt_seed, gf.system_len, gf.instruction_len);
  c.opts.max_new = gf.max_new;
  c.opts.topk = gf.topk;
  c.opts.end_token = gf.stop_token;
  c.opts.head_aggregation = gf.head_aggregation == "max" ? HeadAggregation::Max : HeadAggregation::Mean;
  c.opts.lens.apply_final_norm = gf.lens == "final-norm";
  return c;
}

inline void check_skip(std::size_t skip, std::size_t layers) {
  if (skip >= layers) {
    throw AnalysisError("--skip-layers " + std::to_string(skip) + " must be below the layer count " +
                        std::to_string(layers));
  }
}

inline StageSpec resolve_stages(const std::string& text, std::size_t layers) {
  StageSpec s = text.empty() ? default_stages(layers) : parse_stages(text);
  check_stages(s, layers);
  return s;
}

// Writes the grid CSVs of a GATE report into `dir`; returns file names.
inline std::vector<std::string> write_gate_files(const std::filesystem::path& dir, const DecodeTrace& trace,
                                                 const GateReport& rep, bool instruction) {
  std::vector<std::string> files;
  auto put = [&](const std::string& name, auto&& writer) {
    std::ostringstream os;
    writer(os);
    write_text((dir / name).string(), os.str());
    files.push_back(name);
  };
  put("ratios.csv", [&](std::ostream& os) { csv::ratios(os, rep.ratios); });
  const auto& st = rep.stages.stages;
  for (std::size_t i = 0; i < rep.stage_avg.size(); ++i) {
    const std::string n = file_safe(st[i].name);
    put("stage_avg_" + n + ".csv", [&](std::ostream& os) { csv::grid(os, rep.stage_avg[i]); });
    put("stage_to_global_" + n + ".csv", [&](std::ostream& os) { csv::grid(os, rep.stage_to_global[i]); });
  }
  for (std::size_t i = 0; i < rep.inter_stage.size(); ++i) {
    put("inter_stage_" + file_safe(st[i].name) + "_" + file_safe(st[i + 1].name) + ".csv",
        [&](std::ostream& os) { csv::grid(os, rep.inter_stage[i]); });
  }
  if (instruction) {
    const Matrix heat = instruction_heatmap(trace);
    put("instruction_heatmap.csv",
        [&](std::ostream& os) { csv::instruction_heatmap(os, heat, trace.segments.instruction.begin); });
  }
  return files;
}

inline bool has_grids(const DecodeTrace& tr) {
  if (!tr.grid) return false;
  for (const auto& st : tr.steps) {
    for (const auto& rec : st.layers) {
      if (!rec.visual_grid) return false;
    }
  }
  return true;
}

inline bool has_instruction_attn(const DecodeTrace& tr) {
  for (const auto& st : tr.steps) {
    for (const auto& rec : st.layers) {
      if (!rec.instruction_attn) return false;
    }
  }
  return true;
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

}  // namespace detail

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Layer-wise logit-lens instrumentation and validated dominance correction"};
  app.name("lensvdc");
  app.require_subcommand(1);

  // model new
  auto* model_cmd = app.add_subcommand("model", "Toy decoder models")->require_subcommand(1);
  auto* model_new = model_cmd->add_subcommand("new", "Create a seeded toy model file");
  ModelFlags model_new_flags;
  std::string model_out;
  add_model_flags(model_new, model_new_flags, false);
  model_new->add_option("-o,--output", model_out, "Model file (stdout if absent)");

  // trace generate / validate
  auto* trace_cmd = app.add_subcommand("trace", "Decode traces")->require_subcommand(1);
  auto* trace_gen = trace_cmd->add_subcommand("generate", "Greedy decode with the toy model and record a trace");
  ModelFlags gen_model;
  GenFlags gen_flags;
  std::string gen_out;
  add_model_flags(trace_gen, gen_model, true);
  add_gen_flags(trace_gen, gen_flags);
  trace_gen->add_option("-o,--output", gen_out, "Trace file (stdout if absent)");

  auto* trace_val = trace_cmd->add_subcommand("validate", "Check a trace file");
  std::string val_path;
  trace_val->add_option("trace", val_path, "Trace file")->required();

  // analyze gate / sad
  auto* analyze_cmd = app.add_subcommand("analyze", "Trace analyses")->require_subcommand(1);
  auto* gate_cmd = analyze_cmd->add_subcommand("gate", "Attention ratios, stage heatmaps and difference maps");
  std::string gate_path, gate_dir, gate_stages;
  bool gate_heatmaps = false;
  gate_cmd->add_option("trace", gate_path, "Trace file")->required();
  gate_cmd->add_option("--out-dir", gate_dir, "Directory for CSV grids")->required();
  gate_cmd->add_option("--stages", gate_stages, "Stage spec Name:first-last,... (default: scaled 4-stage split)");
  gate_cmd->add_flag("--heatmaps", gate_heatmaps, "Also emit stage heatmaps, difference maps and instruction heatmap");

  auto* sad_cmd = analyze_cmd->add_subcommand("sad", "Dominance tracking and subdominant-accumulation detection");
  std::string sad_path, sad_out;
  std::size_t sad_skip = 0;
  sad_cmd->add_option("trace", sad_path, "Trace file")->required();
  sad_cmd->add_option("--skip-layers", sad_skip, "Ignore the first N layers")->capture_default_str();
  sad_cmd->add_option("-o,--output", sad_out, "JSON report (stdout if absent)");

  // correct (offline)
  auto* correct_cmd = app.add_subcommand("correct", "Validated dominance correction over a trace");
  std::string correct_path, correct_out;
  VdcFlags correct_flags;
  correct_cmd->add_option("trace", correct_path, "Trace file")->required();
  add_vdc_flags(correct_cmd, correct_flags, false);
  correct_cmd->add_option("-o,--output", correct_out, "JSON report (stdout if absent)");

  // decode-vdc (online)
  auto* online_cmd = app.add_subcommand("decode-vdc", "Greedy decoding with online correction");
  ModelFlags online_model;
  GenFlags online_gen;
  VdcFlags online_flags;
  std::string online_out, online_trace;
  add_model_flags(online_cmd, online_model, true);
  add_gen_flags(online_cmd, online_gen);
  add_vdc_flags(online_cmd, online_flags, true);
  online_cmd->add_option("-o,--output", online_out, "JSON report (stdout if absent)");
  online_cmd->add_option("--trace-out", online_trace, "Also write the trace of original emissions");

  // eval chair
  auto* eval_cmd = app.add_subcommand("eval", "Caption metrics")->require_subcommand(1);
  auto* chair_cmd = eval_cmd->add_subcommand("chair", "CHAIR_S / CHAIR_I over a caption corpus");
  std::string lexicon_path, corpus_path, chair_out;
  chair_cmd->add_option("--lexicon", lexicon_path, "Lexicon JSON {canonical: [synonyms]}")->required();
  chair_cmd->add_option("--corpus", corpus_path, "Corpus JSON-lines {caption, objects}")->required();
  chair_cmd->add_option("-o,--output", chair_out, "JSON result (stdout if absent)");

  // report
  auto* report_cmd = app.add_subcommand("report", "Export plot-ready CSV/JSON for every analysis");
  std::string report_path, report_dir, report_stages;
  VdcFlags report_flags;
  report_cmd->add_option("trace", report_path, "Trace file")->required();
  report_cmd->add_option("--out-dir", report_dir, "Output directory")->required();
  report_cmd->add_option("--stages", report_stages, "Stage spec Name:first-last,...");
  add_vdc_flags(report_cmd, report_flags, false);

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (model_new->parsed()) {
      const ToyModel m = new_model(model_new_flags.config, model_new_flags.seed);
      emit(model_out, json_text(model_to_json(m)), out);
    } else if (trace_gen->parsed()) {
      const GenContext c = resolve_generation(gen_model, gen_flags);
      emit(gen_out, trace_to_string(generate(c.model, c.prompt, c.vocab, c.opts)), out);
    } else if (trace_val->parsed()) {
      load_trace(val_path, err);
      out << "OK\n";
    } else if (gate_cmd->parsed()) {
      const DecodeTrace tr = load_trace(gate_path, err);
      const StageSpec stages = resolve_stages(gate_stages, tr.num_layers);
      const GateReport rep = gate_report(tr, stages, gate_heatmaps);
      bool instruction = false;
      if (gate_heatmaps) {
        if (!has_instruction_attn(tr)) throw MissingField("instruction_attn");
        instruction = true;
      }
      ensure_dir(gate_dir);
      ojson summary;
      summary["stages"] = stages_json(stages);
      summary["files"] = write_gate_files(gate_dir, tr, rep, instruction);
      out << json_text(summary);
    } else if (sad_cmd->parsed()) {
      const DecodeTrace tr = load_trace(sad_path, err);
      check_skip(sad_skip, tr.num_layers);
      emit(sad_out, json_text(sad_report_json(sad_report(tr, sad_skip))), out);
    } else if (correct_cmd->parsed()) {
      const DecodeTrace tr = load_trace(correct_path, err);
      const VdcConfig cfg = correct_flags.resolve();
      check_skip(cfg.skip_layers, tr.num_layers);
      emit(correct_out, json_text(vdc_report_json(correct_trace(tr, cfg), cfg, false)), out);
    } else if (online_cmd->parsed()) {
      const GenContext c = resolve_generation(online_model, online_gen);
      const VdcConfig cfg = online_flags.resolve();
      check_skip(cfg.skip_layers, c.model.config.num_layers);
      const OnlineVdcResult res = decode_with_vdc(c.model, c.prompt, c.vocab, cfg, c.opts);
      if (!online_trace.empty()) write_text(online_trace, trace_to_string(res.trace));
      emit(online_out, json_text(vdc_report_json(res.result, cfg, true)), out);
    } else if (chair_cmd->parsed()) {
      const ObjectLexicon lexicon = ObjectLexicon::from_json(read_json(lexicon_path));
      std::istringstream corpus(read_text(corpus_path));
      std::vector<std::string> captions;
      std::vector<std::set<std::string>> truths;
      std::string line;
      std::size_t line_no = 0;
      while (std::getline(corpus, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          const auto j = nlohmann::json::parse(line);
          captions.push_back(j.at("caption").get<std::string>());
          truths.push_back(j.at("objects").get<std::set<std::string>>());
        } catch (const nlohmann::json::exception& e) {
          throw ParseError(line_no, std::string("corpus: ") + e.what());
        }
      }
      emit(chair_out, json_text(chair_json(chair(captions, truths, lexicon))), out);
    } else if (report_cmd->parsed()) {
      const DecodeTrace tr = load_trace(report_path, err);
      const VdcConfig cfg = report_flags.resolve();
      check_skip(cfg.skip_layers, tr.num_layers);
      const StageSpec stages = resolve_stages(report_stages, tr.num_layers);
      const std::filesystem::path dir(report_dir);
      ensure_dir(dir);

      const bool grids = has_grids(tr) && !tr.steps.empty();
      std::vector<std::string> files;
      if (!tr.steps.empty()) {
        files = write_gate_files(dir, tr, gate_report(tr, stages, grids), has_instruction_attn(tr));
      }
      for (StreamKind s : kAllStreams) {
        const std::string key(stream_key(s));
        std::ostringstream os;
        csv::change_mask(os, rank1_changes(tr, s));
        write_text((dir / ("rank1_changes_" + key + ".csv")).string(), os.str());
        files.push_back("rank1_changes_" + key + ".csv");
        for (const auto& st : tr.steps) {
          std::ostringstream ts;
          csv::top5(ts, top5_table(st, s));
          const std::string name = "top5_" + key + "_t" + std::to_string(st.t) + ".csv";
          write_text((dir / name).string(), ts.str());
          files.push_back(name);
        }
      }
      const VdcResult vdc = correct_trace(tr, cfg);
      const auto bins = correction_layer_histogram(vdc.reports, tr.num_layers);
      std::ostringstream hs;
      csv::histogram(hs, bins);
      write_text((dir / "correction_layers.csv").string(), hs.str());
      files.push_back("correction_layers.csv");
      const SadReport sad = sad_report(tr, cfg.skip_layers);
      write_text((dir / "sad.json").string(), json_text(sad_report_json(sad)));
      write_text((dir / "vdc.json").string(), json_text(vdc_report_json(vdc, cfg, false)));
      files.push_back("sad.json");
      files.push_back("vdc.json");

      std::size_t bin_total = 0;
      for (const auto& b : bins) bin_total += b.replacements;
      ojson summary;
      summary["steps"] = tr.steps.size();
      summary["num_layers"] = tr.num_layers;
      summary["stages"] = stages_json(stages);
      summary["vdc"] = to_json(cfg);
      summary["replaced"] = vdc.replaced();
      summary["histogram_total"] = bin_total;
      summary["sad_flagged"] = sad.flagged();
      summary["files"] = files;
      write_text((dir / "report.json").string(), json_text(summary));
      out << json_text(summary);
    }
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  } catch (const ValidationError& e) {
    err << "error: trace failed validation\n";
    for (const auto& v : e.violations) err << "  " << v.to_string() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInvalid;
  }
  return kOk;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace lensvdc::cli
