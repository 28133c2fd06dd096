// amdec/ctc.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <utility>
#include <vector>

#include "amdec/common.hpp"
#include "amdec/types.hpp"

namespace amdec {

// ---------------------------------------------------------------------------
// Frame-level CTC emission posteriors, log domain, blank included in V.

struct CtcPosteriors {
  Mat log_probs;  // T' x V

  Eigen::Index frames() const { return log_probs.rows(); }
  Eigen::Index vocab() const { return log_probs.cols(); }

  void validate(double tol = 1e-9) const {
    for (Eigen::Index t = 0; t < log_probs.rows(); ++t) {
      const double lse = log_sum_exp_row(log_probs.row(t));
      if (std::abs(lse) > tol)
        throw ConfigError("CTC posterior row " + std::to_string(t) + " is not normalized");
    }
  }
};

// Best path: per-frame argmax (frame ties break toward the lower token id),
// collapse adjacent repeats, delete blanks.
inline std::vector<int> ctc_greedy(const CtcPosteriors& post, const Vocab& vocab) {
  std::vector<int> out;
  int prev = -1;
  for (Eigen::Index t = 0; t < post.frames(); ++t) {
    int best = 0;
    double best_lp = post.log_probs(t, 0);
    for (Eigen::Index k = 1; k < post.vocab(); ++k) {
      if (post.log_probs(t, k) > best_lp) {
        best_lp = post.log_probs(t, k);
        best = int(k);
      }
    }
    if (best != vocab.blank_id && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Label-synchronous prefix scoring.
//
// The state carries, per frame, the log-probability of all alignments that
// spell exactly the current prefix and end in its last non-blank symbol
// (r_nb) or in blank (r_b). Extension with a non-blank token costs O(T') and
// returns the prefix score: the log-probability mass of every complete label
// sequence that begins with the extended prefix.
//
// Extending with eos instead returns the probability of the prefix as a
// complete sequence, logadd(r_nb[T'-1], r_b[T'-1]); the returned state is
// terminal and must not be extended further.

struct CtcPrefixState {
  Vec r_nb;          // log P(alignments of prefix ending non-blank), per frame
  Vec r_b;           // log P(alignments of prefix ending in blank), per frame
  int last = -1;     // last token id; -1 for the empty prefix
  double score = 0;  // alpha_ctc of this prefix
  bool terminal = false;
};

inline CtcPrefixState ctc_prefix_init(const CtcPosteriors& post, const Vocab& vocab) {
  const Eigen::Index t_max = post.frames();
  CtcPrefixState st;
  st.r_nb = Vec::Constant(t_max, kNegInf);
  st.r_b = Vec(t_max);
  double acc = 0.0;
  for (Eigen::Index t = 0; t < t_max; ++t) {
    acc += post.log_probs(t, vocab.blank_id);
    st.r_b[t] = acc;
  }
  st.score = 0.0;  // total mass of all sequences is 1
  return st;
}

inline std::pair<CtcPrefixState, double> ctc_prefix_extend(const CtcPrefixState& state,
                                                           int tok,
                                                           const CtcPosteriors& post,
                                                           const Vocab& vocab) {
  if (tok == vocab.blank_id) throw ConfigError("cannot extend a CTC prefix with blank");
  if (state.terminal) throw ConfigError("cannot extend a terminal CTC prefix state");
  const Eigen::Index t_max = post.frames();

  if (tok == vocab.eos_id) {
    CtcPrefixState done = state;
    done.terminal = true;
    double complete;
    if (t_max == 0) {
      complete = (state.last == -1) ? 0.0 : kNegInf;
    } else {
      complete = log_add(state.r_nb[t_max - 1], state.r_b[t_max - 1]);
    }
    done.score = complete;
    return {std::move(done), complete};
  }

  CtcPrefixState next;
  next.r_nb = Vec::Constant(std::max<Eigen::Index>(t_max, 0), kNegInf);
  next.r_b = Vec::Constant(std::max<Eigen::Index>(t_max, 0), kNegInf);
  next.last = tok;

  // Base values at "frame -1": the empty prefix has mass 1 in the blank
  // lane, any non-empty prefix has none.
  const bool empty_prefix = (state.last == -1);
  double psi = kNegInf;
  double prev_g_nb = kNegInf;
  double prev_g_b = empty_prefix ? 0.0 : kNegInf;
  double prev_h_nb = kNegInf;
  double prev_h_b = kNegInf;
  for (Eigen::Index t = 0; t < t_max; ++t) {
    // First frame at which the new token can be emitted on top of the old
    // prefix: after a blank, or after a different non-blank.
    double phi = prev_g_b;
    if (state.last != tok) phi = log_add(phi, prev_g_nb);
    const double lp_tok = post.log_probs(t, tok);
    const double lp_blank = post.log_probs(t, vocab.blank_id);
    next.r_nb[t] = log_add(prev_h_nb, phi) + lp_tok;
    next.r_b[t] = log_add(prev_h_b, prev_h_nb) + lp_blank;
    psi = log_add(psi, phi + lp_tok);
    prev_g_nb = state.r_nb[t];
    prev_g_b = state.r_b[t];
    prev_h_nb = next.r_nb[t];
    prev_h_b = next.r_b[t];
  }
  next.score = psi;
  return {std::move(next), psi};
}

// ---------------------------------------------------------------------------
// CTC loss with gradient w.r.t. the log-probability matrix.

struct CtcLossResult {
  double loss = 0.0;  // -log P(ref | posteriors); +inf when no alignment fits
  Mat grad;           // d loss / d log_probs, zero when infeasible
  bool feasible = true;
};

inline CtcLossResult ctc_loss(const CtcPosteriors& post, const std::vector<int>& ref,
                              const Vocab& vocab) {
  for (int y : ref)
    if (y == vocab.blank_id) throw ConfigError("CTC reference may not contain blank");
  const Eigen::Index t_max = post.frames();
  const int u = int(ref.size());
  const int s_len = 2 * u + 1;  // blank-interleaved label sequence

  CtcLossResult res;
  res.grad = Mat::Zero(t_max, post.vocab());

  auto label = [&](int s) { return (s % 2 == 0) ? vocab.blank_id : ref[s / 2]; };

  // Minimum frames: every label needs one, plus a separating blank between
  // adjacent repeats.
  Eigen::Index need = u;
  for (int i = 1; i < u; ++i)
    if (ref[i] == ref[i - 1]) ++need;
  if (t_max < need) {
    res.loss = kPosInf;
    res.feasible = false;
    return res;
  }
  if (t_max == 0) {  // only the empty reference fits, with probability 1
    res.loss = 0.0;
    return res;
  }

  Mat alpha = Mat::Constant(t_max, s_len, kNegInf);
  Mat beta = Mat::Constant(t_max, s_len, kNegInf);

  alpha(0, 0) = post.log_probs(0, label(0));
  if (s_len > 1) alpha(0, 1) = post.log_probs(0, label(1));
  for (Eigen::Index t = 1; t < t_max; ++t) {
    for (int s = 0; s < s_len; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (s >= 2 && label(s) != vocab.blank_id && label(s) != label(s - 2))
        a = log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a + post.log_probs(t, label(s));
    }
  }

  double total = alpha(t_max - 1, s_len - 1);
  if (s_len > 1) total = log_add(total, alpha(t_max - 1, s_len - 2));
  if (total == kNegInf) {
    res.loss = kPosInf;
    res.feasible = false;
    return res;
  }
  res.loss = -total;

  beta(t_max - 1, s_len - 1) = post.log_probs(t_max - 1, label(s_len - 1));
  if (s_len > 1) beta(t_max - 1, s_len - 2) = post.log_probs(t_max - 1, label(s_len - 2));
  for (Eigen::Index t = t_max - 2; t >= 0; --t) {
    for (int s = 0; s < s_len; ++s) {
      double b = beta(t + 1, s);
      if (s + 1 < s_len) b = log_add(b, beta(t + 1, s + 1));
      if (s + 2 < s_len && label(s) != vocab.blank_id && label(s) != label(s + 2))
        b = log_add(b, beta(t + 1, s + 2));
      beta(t, s) = b + post.log_probs(t, label(s));
    }
  }

  // gamma_t(s) = alpha_t(s) * beta_t(s) / (p_t(label s) * P). Summing over
  // states with the same label gives the occupancy; the gradient of
  // -log P w.r.t. log p_t(k) is minus that occupancy.
  for (Eigen::Index t = 0; t < t_max; ++t) {
    for (int s = 0; s < s_len; ++s) {
      const double g = alpha(t, s) + beta(t, s) - post.log_probs(t, label(s)) - total;
      if (g != kNegInf) res.grad(t, label(s)) -= std::exp(g);
    }
  }
  return res;
}

}  // namespace amdec
