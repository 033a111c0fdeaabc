#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace lensvdc {

using TokenId = std::uint32_t;

// The three per-layer signals read through the lens: the residual stream after
// the layer, the attention branch output and the FFN branch output.
enum class StreamKind : std::uint8_t { LayerOut = 0, AttnOut = 1, FfnOut = 2 };

inline constexpr std::array<StreamKind, 3> kAllStreams = {StreamKind::LayerOut, StreamKind::AttnOut,
                                                          StreamKind::FfnOut};

inline constexpr std::size_t index_of(StreamKind s) { return static_cast<std::size_t>(s); }

// Key used in trace files and CSV names.
inline constexpr std::string_view stream_key(StreamKind s) {
  switch (s) {
    case StreamKind::LayerOut: return "layer";
    case StreamKind::AttnOut: return "attn";
    case StreamKind::FfnOut: return "ffn";
  }
  return "?";
}

inline StreamKind parse_stream(std::string_view key) {
  if (key == "layer") return StreamKind::LayerOut;
  if (key == "attn") return StreamKind::AttnOut;
  if (key == "ffn") return StreamKind::FfnOut;
  throw std::invalid_argument("unknown stream '" + std::string(key) + "'");
}

struct Candidate {
  TokenId token_id = 0;
  std::string surface;
  std::string normalized;
  double score = 0.0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

inline const std::vector<std::string>& default_markers() {
  static const std::vector<std::string> markers = {"\xE2\x96\x81" /* ▁ */, "\xC4\xA0" /* Ġ */, " "};
  return markers;
}

namespace detail {

inline std::string strip_markers(std::string_view s, const std::vector<std::string>& markers) {
  bool stripped = true;
  while (stripped && !s.empty()) {
    stripped = false;
    for (const auto& m : markers) {
      if (!m.empty() && s.substr(0, m.size()) == m) {
        s.remove_prefix(m.size());
        stripped = true;
      }
    }
  }
  return std::string(s);
}

inline std::string ascii_lower(std::string s) {
  for (char& c : s) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return s;
}

}  // namespace detail

// Lowercase and drop leading subword/whitespace markers. Iterated to a fixed
// point so the result is stable under re-application for any marker set.
inline std::string normalize_token(std::string_view surface,
                                   const std::vector<std::string>& markers = default_markers()) {
  std::string cur(surface);
  for (;;) {
    std::string next = detail::ascii_lower(detail::strip_markers(cur, markers));
    if (next == cur) return cur;
    cur = std::move(next);
  }
}

struct Vocab {
  std::vector<std::string> surfaces;
  std::vector<std::string> markers = default_markers();

  std::size_t size() const { return surfaces.size(); }
  const std::string& surface(TokenId id) const { return surfaces.at(id); }
  std::string normalized(TokenId id) const { return normalize_token(surfaces.at(id), markers); }
};

inline Vocab vocab_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("vocab: expected a JSON array of strings");
  Vocab v;
  v.surfaces.reserve(j.size());
  for (const auto& s : j) {
    if (!s.is_string()) throw std::invalid_argument("vocab: non-string entry");
    v.surfaces.push_back(s.get<std::string>());
  }
  return v;
}

inline nlohmann::json vocab_to_json(const Vocab& v) { return nlohmann::json(v.surfaces); }

// Vocabulary for the built-in decoder. Surfaces mix marker prefixes and casing
// so that distinct ids can share a normalized form ("Black", "▁black").
inline Vocab toy_vocab(std::size_t size) {
  static const std::array<const char*, 48> words = {
      "</s>",   "black",  "red",    "apple", "table", "dog",    "brick",  "side",
      "tile",   "of",     "the",    "a",     "image", "object", "person", "sitting",
      "standing", "walk", "ahead",  "behind", "woman", "right", "left",   "on",
      "is",     "in",     "white",  "green", "blue",  "cat",    "wall",   "road",
      "tree",   "sky",    "grass",  "car",   "chair", "cup",    "plate",  "window",
      "door",   "light",  "shadow", "small", "large", "near",   "far",    "with"};
  Vocab v;
  v.surfaces.reserve(size);
  for (std::size_t id = 0; id < size; ++id) {
    const std::size_t w = id % words.size();
    const std::size_t variant = id / words.size();
    std::string s = words[w];
    if (w == 0 && variant == 0) {
      v.surfaces.push_back(s);
      continue;
    }
    switch (variant % 4) {
      case 0: s = "\xE2\x96\x81" + s; break;
      case 1: s[0] = static_cast<char>(s[0] - 'a' + 'A'); break;
      case 2: s = "\xC4\xA0" + s; break;
      default: s = s + "_" + std::to_string(variant); break;
    }
    if (w == 0) s = "</s>#" + std::to_string(variant);
    v.surfaces.push_back(std::move(s));
  }
  return v;
}

}  // namespace lensvdc
