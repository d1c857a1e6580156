#pragma once

// Reference implementations written independently of the library code.

#include <cmath>
#include <cstdlib>
#include <optional>
#include <vector>

#include "cjlm/corpus.hpp"

namespace cjlm::oracle {

// Affiliation by enumerating every aligned target word and ranking by
// (distance, left-before-right is worse).
inline std::optional<std::vector<int>> affiliation(int t, const std::vector<std::pair<int, int>>& links,
                                                   int target_len) {
  int best = -1;
  for (int j = 0; j < target_len; ++j) {
    bool aligned = false;
    for (const auto& [s, tt] : links) aligned |= tt == j;
    if (!aligned) continue;
    if (best < 0) {
      best = j;
      continue;
    }
    const int d = std::abs(j - t);
    const int bd = std::abs(best - t);
    if (d < bd || (d == bd && j > best)) best = j;
  }
  if (best < 0) return std::nullopt;
  std::vector<int> sources;
  for (int s = 0; s < 64; ++s) {
    for (const auto& [ls, lt] : links) {
      if (ls == s && lt == best) {
        sources.push_back(s);
        break;
      }
    }
  }
  return sources;
}

inline long double logistic(long double x) { return 1.0L / (1.0L + std::exp(-x)); }

}  // namespace cjlm::oracle
