// amdec/hypothesis.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <vector>

#include "amdec/ctc.hpp"
#include "amdec/types.hpp"

namespace amdec {

// Partial label sequence with per-component scores and the incremental CTC
// prefix-scorer state. `tokens` excludes sos; a finished hypothesis ends
// with eos.
struct Hypothesis {
  std::vector<int> tokens;
  double alpha_ctc = 0.0;
  double alpha_ar = 0.0;
  double alpha_amd = 0.0;
  CtcPrefixState ctc_state;
  bool finished = false;
};

// lambda1*a_ctc + lambda2*a_ar + lambda3*a_amd. A zero weight drops its term
// entirely, so a -inf component only propagates when its weight is positive.
inline double fused_score(const Hypothesis& h, const FusionWeights& w) {
  double s = 0.0;
  if (w.lambda1 > 0) s += w.lambda1 * h.alpha_ctc;
  if (w.lambda2 > 0) s += w.lambda2 * h.alpha_ar;
  if (w.lambda3 > 0) s += w.lambda3 * h.alpha_amd;
  return s;
}

// Deterministic total order on (score, hypothesis): higher score first, then
// the shorter token sequence, then lexicographically smaller token ids.
inline bool hyp_better(double score_a, const std::vector<int>& a, double score_b,
                       const std::vector<int>& b) {
  if (score_a != score_b) return score_a > score_b;
  if (a.size() != b.size()) return a.size() < b.size();
  return a < b;
}

struct NBestEntry {
  Hypothesis hyp;
  double fused = 0.0;
};

// Sorted, descending by fused score with the deterministic tie-break.
struct NBestList {
  std::vector<NBestEntry> entries;

  const NBestEntry& best() const {
    if (entries.empty()) throw Error("empty n-best list");
    return entries.front();
  }
};

}  // namespace amdec
