// amdec/search.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <vector>

#include "amdec/hypothesis.hpp"
#include "amdec/model.hpp"

namespace amdec {

// ---------------------------------------------------------------------------
// Block schedules: contiguous, non-overlapping blocks tiling label slots
// [1, l_max].

struct BlockSchedule {
  struct Block {
    int start;  // first label slot, 1-based
    int size;
  };
  std::vector<Block> blocks;
  int l_max = 0;
};

inline BlockSchedule make_schedule(const BlockScheduleSpec& spec, int l_max) {
  spec.validate();
  if (l_max < 1) throw ConfigError("schedule needs l_max >= 1");
  BlockSchedule sched;
  sched.l_max = l_max;
  int slot = 1;
  while (slot <= l_max) {
    const int want = (slot <= spec.n_initial) ? 1 : spec.block;
    const int size = std::min(want, l_max - slot + 1);
    sched.blocks.push_back({slot, size});
    slot += size;
  }
  return sched;
}

// ---------------------------------------------------------------------------
// Decode bookkeeping.

struct DecodeStats {
  long amd_calls = 0;
  long ar_calls = 0;
  long ctc_extensions = 0;
  double wall_seconds = 0.0;
  bool truncated = false;  // some returned hypothesis never emitted eos
};

struct DecodeResult {
  NBestList nbest;
  DecodeStats stats;
};

namespace detail {

// Candidate ids for label slots: everything except blank and sos.
inline std::vector<int> candidate_ids(const Vocab& vocab) {
  std::vector<int> ids;
  for (int i = 0; i < vocab.size(); ++i)
    if (i != vocab.blank_id && i != vocab.sos_id) ids.push_back(i);
  return ids;
}

inline double rank_score(const Hypothesis& h, double fused, bool length_norm) {
  if (!length_norm) return fused;
  return fused / double(std::max<size_t>(1, h.tokens.size()));
}

// Sort descending by score with the deterministic tie-break, truncate to k.
template <typename T, typename ScoreOf, typename TokensOf>
void prune_top_k(std::vector<T>& pool, int k, ScoreOf score_of, TokensOf tokens_of) {
  std::sort(pool.begin(), pool.end(), [&](const T& a, const T& b) {
    return hyp_better(score_of(a), tokens_of(a), score_of(b), tokens_of(b));
  });
  if (int(pool.size()) > k) pool.resize(size_t(k));
}

// Final ranking over every finalized hypothesis plus the unfinished
// survivors; finalized hypotheses are retained no matter what happened to
// their beam slots afterwards.
inline NBestList finish_nbest(std::vector<Hypothesis> finalized,
                              const std::vector<Hypothesis>& beam,
                              const SearchConfig& cfg) {
  std::vector<Hypothesis> pool = std::move(finalized);
  for (const Hypothesis& h : beam)
    if (!h.finished) pool.push_back(h);
  std::vector<NBestEntry> entries;
  entries.reserve(pool.size());
  for (auto& h : pool) {
    const double f = fused_score(h, cfg.weights);
    entries.push_back({std::move(h), f});
  }
  std::sort(entries.begin(), entries.end(), [&](const NBestEntry& a, const NBestEntry& b) {
    return hyp_better(rank_score(a.hyp, a.fused, cfg.length_norm), a.hyp.tokens,
                      rank_score(b.hyp, b.fused, cfg.length_norm), b.hyp.tokens);
  });
  if (int(entries.size()) > cfg.k_main) entries.resize(size_t(cfg.k_main));
  NBestList list;
  list.entries = std::move(entries);
  return list;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Baseline label-synchronous CTC + AR beam search (lambda3 must be 0). Each
// step expands every live hypothesis over all candidate tokens, scores with
// lambda1*alpha_ctc + lambda2*alpha_ar, and keeps the best k_main; finished
// hypotheses stay in the beam and keep competing.

inline DecodeResult decode_baseline(const EncoderOutput& enc, const CtcPosteriors& post,
                                    const ToyDecoderParams& params, const Vocab& vocab,
                                    const SearchConfig& cfg) {
  cfg.validate();
  if (cfg.weights.lambda3 != 0.0)
    throw ConfigError("decode_baseline requires lambda3 == 0");
  const auto t0 = std::chrono::steady_clock::now();
  DecodeResult res;
  DecodeStats& stats = res.stats;

  const std::vector<int> cands = detail::candidate_ids(vocab);
  Hypothesis root;
  root.ctc_state = ctc_prefix_init(post, vocab);
  std::vector<Hypothesis> beam{root};  // live hypotheses only
  std::vector<Hypothesis> finalized;

  for (int step = 1; step <= cfg.l_max && !beam.empty(); ++step) {
    std::vector<Hypothesis> pool;
    for (const Hypothesis& h : beam) {
      std::vector<int> input;
      input.reserve(h.tokens.size() + 1);
      input.push_back(vocab.sos_id);
      input.insert(input.end(), h.tokens.begin(), h.tokens.end());
      const Mat logp = forward_ar(params, enc, input);
      ++stats.ar_calls;
      const Eigen::Index last = Eigen::Index(input.size()) - 1;
      for (int y : cands) {
        auto [state, alpha_ctc] = ctc_prefix_extend(h.ctc_state, y, post, vocab);
        ++stats.ctc_extensions;
        Hypothesis next = h;
        next.tokens.push_back(y);
        next.ctc_state = std::move(state);
        next.alpha_ctc = alpha_ctc;
        next.alpha_ar = h.alpha_ar + logp(last, y);
        next.finished = (y == vocab.eos_id);
        pool.push_back(std::move(next));
      }
    }
    detail::prune_top_k(
        pool, cfg.k_main,
        [&](const Hypothesis& h) { return fused_score(h, cfg.weights); },
        [](const Hypothesis& h) -> const std::vector<int>& { return h.tokens; });
    // Surviving finalized hypotheses are retained for the final ranking;
    // the running beam keeps only live ones.
    beam.clear();
    for (Hypothesis& h : pool) {
      if (h.finished)
        finalized.push_back(std::move(h));
      else
        beam.push_back(std::move(h));
    }
  }

  for (const Hypothesis& h : beam)
    if (!h.finished) stats.truncated = true;
  res.nbest = detail::finish_nbest(std::move(finalized), beam, cfg);
  stats.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Tripartite NAR beam search. Per attention-mask block, for every live main
// hypothesis: one masked forward scores all in-block slots at once (future
// context comes from the CTC greedy hypothesis); per slot the top-k1 tokens
// union the CTC token form the candidate set; a left-to-right in-block beam
// scores candidates with lambda1*alpha_ctc + lambda3*alpha_amd pruned to k2
// per slot; block-final hypotheses are re-ranked with the AR score added
// (one teacher-forced forward per hypothesis covering the whole block) and
// pruned to k_main.

// Decoder input for one masked block on top of `prefix` (the tokens before
// the block): sos, prefix, placeholder ids for the masked slots, then the
// CTC hypothesis for every slot past the block. Slots beyond the CTC
// hypothesis are absent.
inline std::vector<int> amd_block_input(const std::vector<int>& prefix, int slot_begin,
                                        int block_size, const std::vector<int>& ctc_hyp,
                                        const Vocab& vocab) {
  if (int(prefix.size()) != slot_begin - 1)
    throw ConfigError("block input prefix length mismatch");
  std::vector<int> input;
  input.push_back(vocab.sos_id);
  input.insert(input.end(), prefix.begin(), prefix.end());
  for (int j = 0; j < block_size; ++j) input.push_back(vocab.blank_id);  // masked
  const int first_future = slot_begin - 1 + block_size;  // 0-based into ctc_hyp
  for (size_t j = size_t(first_future); j < ctc_hyp.size(); ++j)
    input.push_back(ctc_hyp[j]);
  return input;
}

inline DecodeResult decode_tripartite(const EncoderOutput& enc, const CtcPosteriors& post,
                                      const ToyDecoderParams& params, const Vocab& vocab,
                                      const SearchConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  DecodeResult res;
  DecodeStats& stats = res.stats;

  const std::vector<int> ctc_hyp = ctc_greedy(post, vocab);
  const BlockSchedule sched = make_schedule(cfg.schedule, cfg.l_max);
  const std::vector<int> cands = detail::candidate_ids(vocab);

  Hypothesis root;
  root.ctc_state = ctc_prefix_init(post, vocab);
  std::vector<Hypothesis> main_beam{root};  // live hypotheses only
  std::vector<Hypothesis> finalized;

  struct Path {
    Hypothesis hyp;
    int root_idx;    // index into the live set whose slot distributions apply
    double a_cm;     // lambda1*alpha_ctc + lambda3*alpha_amd
  };

  for (const auto& block : sched.blocks) {
    if (main_beam.empty()) break;
    std::vector<const Hypothesis*> live;
    for (const Hypothesis& h : main_beam) live.push_back(&h);

    // Per-slot AMD distributions and candidate sets, per live hypothesis.
    std::vector<Mat> slot_logp(live.size());
    std::vector<std::vector<std::vector<int>>> slot_cands(live.size());
    for (size_t r = 0; r < live.size(); ++r) {
      const std::vector<int> input =
          amd_block_input(live[r]->tokens, block.start, block.size, ctc_hyp, vocab);
      const auto plan =
          AttentionMaskPlan::make_block(int(input.size()), block.start, block.size);
      slot_logp[r] = forward_amd(params, enc, input, plan);
      ++stats.amd_calls;
      slot_cands[r].resize(size_t(block.size));
      for (int s = 0; s < block.size; ++s) {
        std::vector<int> order = cands;
        const auto row = slot_logp[r].row(s);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
          if (row[a] != row[b]) return row[a] > row[b];
          return a < b;
        });
        if (int(order.size()) > cfg.k1) order.resize(size_t(cfg.k1));
        const int slot = block.start + s;  // 1-based
        if (slot <= int(ctc_hyp.size())) {
          const int ctc_tok = ctc_hyp[slot - 1];
          if (std::find(order.begin(), order.end(), ctc_tok) == order.end())
            order.push_back(ctc_tok);
        }
        slot_cands[r][s] = std::move(order);
      }
    }

    // In-block CTC + AMD beam. Each live main hypothesis carries its own
    // K2-width beam over the block's slots; branches only meet at the
    // tripartite re-ranking below.
    std::vector<Path> paths;
    for (size_t r = 0; r < live.size(); ++r) {
      std::vector<Path> branch;
      {
        Path seed;
        seed.hyp = *live[r];
        seed.root_idx = int(r);
        seed.a_cm = cfg.weights.lambda1 * seed.hyp.alpha_ctc +
                    cfg.weights.lambda3 * seed.hyp.alpha_amd;
        branch.push_back(std::move(seed));
      }
      for (int s = 0; s < block.size; ++s) {
        std::vector<Path> expanded;
        for (const Path& pth : branch) {
          if (pth.hyp.finished) {
            expanded.push_back(pth);  // finalized mid-block: later slots skipped
            continue;
          }
          for (int y : slot_cands[r][s]) {
            auto [state, alpha_ctc] = ctc_prefix_extend(pth.hyp.ctc_state, y, post, vocab);
            ++stats.ctc_extensions;
            Path next;
            next.root_idx = pth.root_idx;
            next.hyp = pth.hyp;
            next.hyp.tokens.push_back(y);
            next.hyp.ctc_state = std::move(state);
            next.hyp.alpha_ctc = alpha_ctc;
            next.hyp.alpha_amd = pth.hyp.alpha_amd + slot_logp[r](s, y);
            next.hyp.finished = (y == vocab.eos_id);
            next.a_cm = cfg.weights.lambda1 * next.hyp.alpha_ctc +
                        cfg.weights.lambda3 * next.hyp.alpha_amd;
            expanded.push_back(std::move(next));
          }
        }
        detail::prune_top_k(
            expanded, cfg.k2, [](const Path& p) { return p.a_cm; },
            [](const Path& p) -> const std::vector<int>& { return p.hyp.tokens; });
        branch = std::move(expanded);
      }
      paths.insert(paths.end(), std::make_move_iterator(branch.begin()),
                   std::make_move_iterator(branch.end()));
    }

    // Tripartite re-ranking: add the AR score, computed fresh from one
    // teacher-forced forward per hypothesis.
    std::vector<Hypothesis> pool;
    for (Path& pth : paths) {
      Hypothesis h = std::move(pth.hyp);
      std::vector<int> real = h.tokens;
      const bool has_eos = h.finished;
      if (has_eos) real.pop_back();
      std::vector<int> input;
      input.reserve(real.size() + 1);
      input.push_back(vocab.sos_id);
      input.insert(input.end(), real.begin(), real.end());
      const Mat logp = forward_ar(params, enc, input);
      ++stats.ar_calls;
      double a_ar = 0.0;
      for (size_t j = 0; j < real.size(); ++j) a_ar += logp(Eigen::Index(j), real[j]);
      if (has_eos) a_ar += logp(Eigen::Index(real.size()), vocab.eos_id);
      h.alpha_ar = a_ar;
      pool.push_back(std::move(h));
    }
    detail::prune_top_k(
        pool, cfg.k_main,
        [&](const Hypothesis& h) { return fused_score(h, cfg.weights); },
        [](const Hypothesis& h) -> const std::vector<int>& { return h.tokens; });
    // Surviving finalized hypotheses are retained for the final ranking;
    // the main beam carries only live ones into the next block.
    main_beam.clear();
    for (Hypothesis& h : pool) {
      if (h.finished)
        finalized.push_back(std::move(h));
      else
        main_beam.push_back(std::move(h));
    }
  }

  for (const Hypothesis& h : main_beam)
    if (!h.finished) stats.truncated = true;
  res.nbest = detail::finish_nbest(std::move(finalized), main_beam, cfg);
  stats.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Independent recomputation of the three score components of a returned
// hypothesis, following the same schedule and future-context rules the
// search used. Exercised by the verification tests.

inline double recompute_alpha_ctc(const std::vector<int>& tokens, const CtcPosteriors& post,
                                  const Vocab& vocab) {
  CtcPrefixState st = ctc_prefix_init(post, vocab);
  double alpha = st.score;
  for (int y : tokens) {
    auto [next, a] = ctc_prefix_extend(st, y, post, vocab);
    st = std::move(next);
    alpha = a;
  }
  return alpha;
}

inline double recompute_alpha_ar(const std::vector<int>& tokens,
                                 const ToyDecoderParams& params, const EncoderOutput& enc,
                                 const Vocab& vocab) {
  std::vector<int> real = tokens;
  const bool has_eos = !real.empty() && real.back() == vocab.eos_id;
  if (has_eos) real.pop_back();
  std::vector<int> input{vocab.sos_id};
  input.insert(input.end(), real.begin(), real.end());
  const Mat logp = forward_ar(params, enc, input);
  double a = 0.0;
  for (size_t j = 0; j < real.size(); ++j) a += logp(Eigen::Index(j), real[j]);
  if (has_eos) a += logp(Eigen::Index(real.size()), vocab.eos_id);
  return a;
}

inline double recompute_alpha_amd(const std::vector<int>& tokens,
                                  const ToyDecoderParams& params, const EncoderOutput& enc,
                                  const CtcPosteriors& post, const Vocab& vocab,
                                  const BlockScheduleSpec& spec, int l_max) {
  const std::vector<int> ctc_hyp = ctc_greedy(post, vocab);
  const BlockSchedule sched = make_schedule(spec, l_max);
  double a = 0.0;
  for (const auto& block : sched.blocks) {
    if (block.start > int(tokens.size())) break;
    const std::vector<int> prefix(tokens.begin(), tokens.begin() + (block.start - 1));
    const std::vector<int> input =
        amd_block_input(prefix, block.start, block.size, ctc_hyp, vocab);
    const auto plan =
        AttentionMaskPlan::make_block(int(input.size()), block.start, block.size);
    const Mat slot_logp = forward_amd(params, enc, input, plan);
    for (int s = 0; s < block.size; ++s) {
      const size_t slot = size_t(block.start + s);
      if (slot > tokens.size()) break;
      a += slot_logp(s, tokens[slot - 1]);
    }
  }
  return a;
}

}  // namespace amdec
