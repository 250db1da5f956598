#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "care/metrics.hpp"
#include "care/rng.hpp"

namespace care::test {

inline bool gram_equal(const TokenSeq& a, std::size_t i, const TokenSeq& b, std::size_t j, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k)
    if (a[i + k] != b[j + k]) return false;
  return true;
}

inline std::size_t occurrences(const TokenSeq& seq, const TokenSeq& src, std::size_t at, std::size_t n) {
  std::size_t c = 0;
  for (std::size_t j = 0; j + n <= seq.size(); ++j) c += gram_equal(seq, j, src, at, n);
  return c;
}

// Position-scanning BLEU: each distinct hypothesis n-gram is counted at its
// first occurrence and clipped by its count in the reference.
inline double bleu_oracle(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs, std::size_t n) {
  std::vector<std::size_t> match(n, 0), total(n, 0);
  std::size_t c = 0, r = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    c += h.size();
    r += refs[s].size();
    for (std::size_t k = 1; k <= n; ++k) {
      for (std::size_t i = 0; i + k <= h.size(); ++i) {
        ++total[k - 1];
        bool first = true;
        for (std::size_t p = 0; p < i && first; ++p) first = !gram_equal(h, p, h, i, k);
        if (!first) continue;
        match[k - 1] += std::min(occurrences(h, h, i, k), occurrences(refs[s], h, i, k));
      }
    }
  }
  if (c == 0 || match[0] == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double p = match[k] > 0 ? static_cast<double>(match[k]) / static_cast<double>(total[k])
                                  : 1.0 / (static_cast<double>(total[k]) + 1.0);
    log_sum += std::log(p);
  }
  const double log_bp = c < r ? 1.0 - static_cast<double>(r) / static_cast<double>(c) : 0.0;
  return std::exp(log_sum / static_cast<double>(n) + log_bp);
}

inline TokenSeq random_sentence(Rng& rng, std::size_t vocab) {
  TokenSeq s(rng.below(9));
  for (auto& t : s) t = "w" + std::to_string(rng.below(vocab));
  return s;
}

}  // namespace care::test
