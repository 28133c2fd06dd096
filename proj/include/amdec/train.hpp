// amdec/train.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "amdec/data.hpp"
#include "amdec/model.hpp"

namespace amdec {

struct AdamConfig {
  double lr = 0.0025;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second-moment buffers parallel to one tensor_refs list.
struct AdamState {
  std::vector<Vec> m, v;
  long step = 0;

  static AdamState for_refs(const std::vector<TensorRef>& refs) {
    AdamState s;
    for (const auto& r : refs) {
      s.m.push_back(Vec::Zero(r.size));
      s.v.push_back(Vec::Zero(r.size));
    }
    return s;
  }
};

inline void adam_step(const std::vector<TensorRef>& params,
                      const std::vector<TensorRef>& grads, AdamState& state,
                      const AdamConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    for (Eigen::Index j = 0; j < params[i].size; ++j) {
      const double g = grads[i].data[j];
      double& m = state.m[i][j];
      double& v = state.v[i][j];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      const double update = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      params[i].data[j] -= update;
    }
  }
}

// ---------------------------------------------------------------------------
// Staged training: stage 1 fits the backbone with the combined CTC + AR
// objective (gamma1, gamma2); stage 2 freezes everything and fits only the
// AMD low-rank deltas with the four-pass masked objective. Training targets
// are the references with eos appended, so both decoders learn termination;
// the CTC objective uses the raw reference.

struct TrainConfig {
  TrainWeights loss_weights;
  AdamConfig adam;
  int stage1_epochs = 20;
  int stage2_epochs = 8;
  BlockSampling::Strategy sampling = BlockSampling::Strategy::kUni;
  uint64_t seed = 1;

  void validate() const {
    loss_weights.validate();
    if (stage1_epochs < 0 || stage2_epochs < 0) throw ConfigError("negative epoch count");
    if (!std::isfinite(adam.lr) || adam.lr < 0)
      throw ConfigError("learning rate must be finite and >= 0");
  }
};

struct StepLoss {
  long step;
  double loss;
};

struct TrainTrace {
  std::vector<StepLoss> stage1, stage2;
};

namespace detail {

inline void scaled_accumulate(ToyDecoderParams& dst, ToyDecoderParams& src, double scale,
                              ParamSet set) {
  auto d = tensor_refs(dst, set);
  auto s = tensor_refs(src, set);
  for (size_t i = 0; i < d.size(); ++i)
    for (Eigen::Index j = 0; j < d[i].size; ++j) d[i].data[j] += scale * s[i].data[j];
}

inline std::vector<size_t> epoch_order(size_t n, uint64_t seed, const char* tag, int epoch) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  auto rng = make_rng(seed, tag, uint64_t(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline void check_finite(double loss, long step) {
  if (!std::isfinite(loss))
    throw DivergedError("training diverged at step " + std::to_string(step) +
                        " (loss=" + std::to_string(loss) + ")");
}

}  // namespace detail

inline std::vector<StepLoss> train_stage1(ToyDecoderParams& params,
                                          std::span<const Utterance> corpus,
                                          const Vocab& vocab, const TrainConfig& cfg) {
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  auto refs = tensor_refs(params, ParamSet::kBackbone);
  AdamState adam = AdamState::for_refs(refs);
  std::vector<StepLoss> trace;
  long step = 0;
  for (int epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
    for (size_t idx : detail::epoch_order(corpus.size(), cfg.seed, "stage1-order", epoch)) {
      const Utterance& u = corpus[idx];
      std::vector<int> target = u.ref;
      target.push_back(vocab.eos_id);

      ToyDecoderParams grads = zeros_like(params);
      double loss = 0.0;
      {
        ToyDecoderParams g_ctc = zeros_like(params);
        const double l_ctc = ctc_head_loss(params, u.enc, u.ref, vocab, &g_ctc);
        if (std::isfinite(l_ctc)) {  // infeasible alignments contribute nothing
          loss += cfg.loss_weights.gamma1 * l_ctc;
          detail::scaled_accumulate(grads, g_ctc, cfg.loss_weights.gamma1,
                                    ParamSet::kBackbone);
        }
      }
      {
        ToyDecoderParams g_ar = zeros_like(params);
        const double l_ar = ar_loss(params, u.enc, target, vocab, &g_ar,
                                    GradFlags{.backbone = true, .delta = false});
        loss += cfg.loss_weights.gamma2 * l_ar;
        detail::scaled_accumulate(grads, g_ar, cfg.loss_weights.gamma2,
                                  ParamSet::kBackbone);
      }
      detail::check_finite(loss, step);
      auto grefs = tensor_refs(grads, ParamSet::kBackbone);
      adam_step(refs, grefs, adam, cfg.adam);
      trace.push_back({step, loss});
      ++step;
    }
  }
  return trace;
}

inline std::vector<StepLoss> train_stage2(ToyDecoderParams& params,
                                          std::span<const Utterance> corpus,
                                          const Vocab& vocab, const TrainConfig& cfg) {
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  auto refs = tensor_refs(params, ParamSet::kDeltaAmd);
  AdamState adam = AdamState::for_refs(refs);
  std::vector<StepLoss> trace;
  long step = 0;
  for (int epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
    for (size_t idx : detail::epoch_order(corpus.size(), cfg.seed, "stage2-order", epoch)) {
      const Utterance& u = corpus[idx];
      std::vector<int> target = u.ref;
      target.push_back(vocab.eos_id);
      BlockSampling sampling;
      sampling.strategy = cfg.sampling;
      sampling.seed = mix_seed(cfg.seed, "stage2-blocks", uint64_t(u.id), uint64_t(epoch));

      ToyDecoderParams grads = zeros_like(params);
      const double loss = amd_loss(params, u.enc, target, vocab, sampling, &grads,
                                   GradFlags{.backbone = false, .delta = true});
      detail::check_finite(loss, step);
      auto grefs = tensor_refs(grads, ParamSet::kDeltaAmd);
      adam_step(refs, grefs, adam, cfg.adam);
      trace.push_back({step, loss});
      ++step;
    }
  }
  return trace;
}

inline TrainTrace train(ToyDecoderParams& params, std::span<const Utterance> corpus,
                        const Vocab& vocab, const TrainConfig& cfg) {
  cfg.validate();
  TrainTrace trace;
  trace.stage1 = train_stage1(params, corpus, vocab, cfg);
  trace.stage2 = train_stage2(params, corpus, vocab, cfg);
  return trace;
}

}  // namespace amdec
