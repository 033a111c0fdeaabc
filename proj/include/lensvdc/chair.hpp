#pragma once

// CHAIR caption hallucination metrics:
//   chair_i = |hallucinated object mentions| / |all object mentions|
//   chair_s = |captions with >= 1 hallucinated mention| / |captions|

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace lensvdc {

struct ChairError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class ObjectLexicon {
 public:
  ObjectLexicon() = default;

  // canonical object -> surface synonyms. Synonyms are lowercased and must not
  // be shared between objects.
  explicit ObjectLexicon(const std::map<std::string, std::vector<std::string>>& entries) {
    if (entries.empty()) throw ChairError("object lexicon is empty");
    for (const auto& [canonical, syns] : entries) {
      if (syns.empty()) throw ChairError("object '" + canonical + "' has no synonyms");
      for (const auto& raw : syns) {
        std::string s = lower(raw);
        if (s.empty()) throw ChairError("object '" + canonical + "' has an empty synonym");
        auto [it, inserted] = synonym_to_object_.emplace(s, canonical);
        if (!inserted && it->second != canonical) {
          throw ChairError("synonym '" + s + "' is shared by '" + it->second + "' and '" + canonical + "'");
        }
      }
    }
    for (const auto& [syn, obj] : synonym_to_object_) by_length_.push_back(syn);
    std::stable_sort(by_length_.begin(), by_length_.end(),
                     [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
  }

  static ObjectLexicon from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ChairError("lexicon must be a JSON object {canonical: [synonyms]}");
    std::map<std::string, std::vector<std::string>> entries;
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!it->is_array()) throw ChairError("lexicon entry '" + it.key() + "' must be an array");
      for (const auto& s : *it) {
        if (!s.is_string()) throw ChairError("lexicon entry '" + it.key() + "' has a non-string synonym");
        entries[it.key()].push_back(s.get<std::string>());
      }
      entries.try_emplace(it.key());
    }
    return ObjectLexicon(entries);
  }

  // Synonyms, longest first.
  const std::vector<std::string>& synonyms_by_length() const { return by_length_; }
  const std::string* object_for(const std::string& synonym) const {
    auto it = synonym_to_object_.find(synonym);
    return it == synonym_to_object_.end() ? nullptr : &it->second;
  }

  static std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  }

 private:
  std::map<std::string, std::string> synonym_to_object_;
  std::vector<std::string> by_length_;
};

namespace detail {
inline bool word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }
}  // namespace detail

// Canonical objects mentioned in the caption, in order of appearance. Matching
// is case-insensitive at word boundaries; at each position the longest
// synonym wins and matches do not overlap.
inline std::vector<std::string> extract_objects(const std::string& caption, const ObjectLexicon& lexicon) {
  const std::string text = ObjectLexicon::lower(caption);
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const bool at_boundary = pos == 0 || !detail::word_char(text[pos - 1]);
    std::size_t matched = 0;
    if (at_boundary && detail::word_char(text[pos])) {
      for (const auto& syn : lexicon.synonyms_by_length()) {
        const std::size_t end = pos + syn.size();
        if (end > text.size() || text.compare(pos, syn.size(), syn) != 0) continue;
        if (end < text.size() && detail::word_char(text[end])) continue;
        out.push_back(*lexicon.object_for(syn));
        matched = syn.size();
        break;
      }
    }
    pos += matched > 0 ? matched : 1;
  }
  return out;
}

struct CaptionDetail {
  std::vector<std::string> mentioned;
  std::vector<std::string> hallucinated;
};

struct ChairResult {
  double chair_s = 0.0;
  double chair_i = 0.0;
  std::size_t captions = 0;
  std::size_t hallucinated_captions = 0;
  std::size_t mentions = 0;
  std::size_t hallucinated_mentions = 0;
  std::vector<CaptionDetail> details;
};

// Ground-truth entries are lowercased and mapped through the lexicon when they
// name a synonym, so "Desk" in the annotations counts as "table".
inline ChairResult chair(const std::vector<std::string>& captions,
                         const std::vector<std::set<std::string>>& ground_truths, const ObjectLexicon& lexicon) {
  if (captions.size() != ground_truths.size()) {
    throw ChairError("captions (" + std::to_string(captions.size()) + ") and ground truths (" +
                     std::to_string(ground_truths.size()) + ") differ in length");
  }
  if (captions.empty()) throw ChairError("empty corpus");
  ChairResult r;
  r.captions = captions.size();
  for (std::size_t i = 0; i < captions.size(); ++i) {
    std::set<std::string> truth;
    for (const auto& raw : ground_truths[i]) {
      std::string g = ObjectLexicon::lower(raw);
      const std::string* obj = lexicon.object_for(g);
      truth.insert(obj ? *obj : g);
    }
    CaptionDetail d;
    d.mentioned = extract_objects(captions[i], lexicon);
    for (const auto& obj : d.mentioned) {
      if (!truth.contains(obj)) d.hallucinated.push_back(obj);
    }
    r.mentions += d.mentioned.size();
    r.hallucinated_mentions += d.hallucinated.size();
    r.hallucinated_captions += d.hallucinated.empty() ? 0 : 1;
    r.details.push_back(std::move(d));
  }
  r.chair_s = static_cast<double>(r.hallucinated_captions) / static_cast<double>(r.captions);
  r.chair_i = r.mentions == 0 ? 0.0 : static_cast<double>(r.hallucinated_mentions) / static_cast<double>(r.mentions);
  return r;
}

}  // namespace lensvdc
