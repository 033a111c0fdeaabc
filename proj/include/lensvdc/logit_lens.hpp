#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lensvdc/core_tensor.hpp"
#include "lensvdc/tokens.hpp"

namespace lensvdc {

struct LensOptions {
  // Final norm before unembedding (standard logit lens). When false the raw
  // hidden state is unembedded directly.
  bool apply_final_norm = true;
  double eps = kNormEps;
};

// Reads a hidden state as vocabulary logits: rms_norm(hidden, gain) · unembedding.
// Every stream (layer, attention, FFN) goes through this same path.
inline std::vector<double> project(std::span<const double> hidden, std::span<const double> final_norm_gain,
                                   const Matrix& unembedding, const LensOptions& opts = {}) {
  if (hidden.size() != unembedding.rows()) {
    throw ShapeError("project: hidden size " + std::to_string(hidden.size()) + " != unembedding rows " +
                     std::to_string(unembedding.rows()));
  }
  if (!opts.apply_final_norm) return vecmat(hidden, unembedding);
  return vecmat(rms_norm(hidden, final_norm_gain, opts.eps), unembedding);
}

inline std::vector<Candidate> candidates(std::span<const double> logits, const Vocab& vocab, std::size_t k) {
  if (logits.size() > vocab.size()) {
    throw ShapeError("candidates: " + std::to_string(logits.size()) + " logits for a vocabulary of " +
                     std::to_string(vocab.size()));
  }
  std::vector<Candidate> out;
  for (const auto& [index, value] : topk(logits, k)) {
    const auto id = static_cast<TokenId>(index);
    out.push_back({id, vocab.surface(id), vocab.normalized(id), value});
  }
  return out;
}

}  // namespace lensvdc
