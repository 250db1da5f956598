#pragma once

// Corpus-level BLEU and perplexity helpers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "care/errors.hpp"

namespace care {

inline constexpr const char* kBleuSmoothingNote =
    "BLEU: corpus-level, clipped n-gram precision, uniform geometric mean, brevity penalty; "
    "orders >= 2 with zero matches use 1/(candidate n-grams + 1)";

using TokenSeq = std::vector<std::string>;

inline std::map<TokenSeq, std::size_t> ngram_counts(const TokenSeq& tokens, std::size_t n) {
  std::map<TokenSeq, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[TokenSeq(tokens.begin() + static_cast<std::ptrdiff_t>(i), tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

struct BleuStats {
  std::vector<std::size_t> matches;  // index k-1 for order k
  std::vector<std::size_t> totals;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

inline BleuStats bleu_stats(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
                            std::size_t n) {
  if (n < 1 || n > 4) throw ContractError("bleu order must lie in 1..4");
  if (hypotheses.empty()) throw ContractError("bleu over an empty hypothesis set");
  if (hypotheses.size() != references.size()) throw ContractError("bleu needs one reference per hypothesis");
  BleuStats s;
  s.matches.assign(n, 0);
  s.totals.assign(n, 0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    s.hypothesis_length += hypotheses[i].size();
    s.reference_length += references[i].size();
    for (std::size_t k = 1; k <= n; ++k) {
      const auto hyp = ngram_counts(hypotheses[i], k);
      const auto ref = ngram_counts(references[i], k);
      for (const auto& [gram, count] : hyp) {
        s.totals[k - 1] += count;
        auto it = ref.find(gram);
        if (it != ref.end()) s.matches[k - 1] += std::min(count, it->second);
      }
    }
  }
  return s;
}

inline double bleu_from_stats(const BleuStats& s) {
  const std::size_t n = s.matches.size();
  if (s.hypothesis_length == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    double p;
    if (s.matches[k] > 0) {
      p = static_cast<double>(s.matches[k]) / static_cast<double>(s.totals[k]);
    } else if (k == 0) {
      return 0.0;
    } else {
      p = 1.0 / (static_cast<double>(s.totals[k]) + 1.0);
    }
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(s.hypothesis_length);
  const double r = static_cast<double>(s.reference_length);
  const double log_bp = c < r ? 1.0 - r / c : 0.0;
  return std::exp(log_sum / static_cast<double>(n) + log_bp);
}

inline double bleu_n(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references, std::size_t n) {
  return bleu_from_stats(bleu_stats(hypotheses, references, n));
}

/// exp(total NLL / total tokens).
inline double perplexity_from_nll(double total_nll, std::size_t tokens) {
  if (tokens == 0) throw ContractError("perplexity over zero tokens");
  return std::exp(total_nll / static_cast<double>(tokens));
}

}  // namespace care
