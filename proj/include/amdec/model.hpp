// amdec/model.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "amdec/common.hpp"
#include "amdec/ctc.hpp"
#include "amdec/types.hpp"

namespace amdec {

// ---------------------------------------------------------------------------
// Parameters. One backbone carries every projection; the AR and AMD decoders
// are realized as low-rank offsets (W = W_base + B * A) over that shared
// backbone, selected by DecoderMode at forward time.

enum class DecoderMode { kAr, kAmd };

struct ModelDims {
  int d_model = 16;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 64;
  int rank = 4;
  int vocab = 0;    // V, includes blank/sos/eos
  int enc_dim = 0;  // D
  int max_len = 160;

  int d_head() const { return d_model / n_heads; }

  void validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || vocab < 2 ||
        enc_dim < 1 || max_len < 2)
      throw ConfigError("bad model dimensions");
    if (d_model % n_heads != 0) throw ConfigError("d_model must divide by n_heads");
    if (rank < 0 || rank > std::min(d_model, d_ff))
      throw ConfigError("LoRA rank must be in [0, min(d_in, d_out)]");
  }
};

struct LinearW {
  Mat W;  // d_out x d_in
  Vec b;  // d_out
};

struct LoraDelta {
  Mat A;  // r x d_in
  Mat B;  // d_out x r
};

struct LayerParams {
  Vec ln1_g, ln1_b;
  LinearW wq, wk, wv, wo;
  Vec ln2_g, ln2_b;
  LinearW wq2, wk2, wv2, wo2;  // cross-attention; wk2/wv2 consume encoder rows
  Vec ln3_g, ln3_b;
  LinearW w1, w2;
};

struct LayerDeltas {
  LoraDelta wq, wk, wv, wo, wq2, wk2, wv2, wo2, w1, w2;
};

struct ToyDecoderParams {
  ModelDims dims;
  Mat embedding;   // V x d
  Mat positional;  // max_len x d, fixed sinusoidal, never trained or stored
  std::vector<LayerParams> layers;
  Vec lnf_g, lnf_b;
  LinearW out;       // V x d
  LinearW ctc_head;  // V x enc_dim
  std::vector<LayerDeltas> delta_ar, delta_amd;

  const std::vector<LayerDeltas>& deltas(DecoderMode m) const {
    return m == DecoderMode::kAr ? delta_ar : delta_amd;
  }

  static ToyDecoderParams init(const ModelDims& dims, uint64_t seed);
};

inline Mat sinusoidal_table(int max_len, int d) {
  Mat pos(max_len, d);
  for (int p = 0; p < max_len; ++p) {
    for (int i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -double(i / 2 * 2) / double(d));
      pos(p, i) = (i % 2 == 0) ? std::sin(p * rate) : std::cos(p * rate);
    }
  }
  return pos;
}

namespace detail {

inline Mat randn(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline LinearW init_linear(int d_out, int d_in, std::mt19937_64& rng) {
  LinearW w;
  w.W = randn(d_out, d_in, 1.0 / std::sqrt(double(d_in)), rng);
  w.b = Vec::Zero(d_out);
  return w;
}

// Standard LoRA start: A random, B zero, so the delta vanishes until trained.
inline LoraDelta init_delta(int d_out, int d_in, int rank, std::mt19937_64& rng) {
  LoraDelta d;
  d.A = randn(rank, d_in, 1.0 / std::sqrt(double(d_in)), rng);
  d.B = Mat::Zero(d_out, rank);
  return d;
}

}  // namespace detail

inline ToyDecoderParams ToyDecoderParams::init(const ModelDims& dims, uint64_t seed) {
  dims.validate();
  ToyDecoderParams p;
  p.dims = dims;
  auto rng = make_rng(seed, "model-init");
  const int d = dims.d_model;
  p.embedding = detail::randn(dims.vocab, d, 1.0 / std::sqrt(double(d)), rng);
  p.positional = sinusoidal_table(dims.max_len, d);
  p.lnf_g = Vec::Ones(d);
  p.lnf_b = Vec::Zero(d);
  p.out = detail::init_linear(dims.vocab, d, rng);
  p.ctc_head = detail::init_linear(dims.vocab, dims.enc_dim, rng);
  for (int l = 0; l < dims.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_g = lp.ln2_g = lp.ln3_g = Vec::Ones(d);
    lp.ln1_b = lp.ln2_b = lp.ln3_b = Vec::Zero(d);
    lp.wq = detail::init_linear(d, d, rng);
    lp.wk = detail::init_linear(d, d, rng);
    lp.wv = detail::init_linear(d, d, rng);
    lp.wo = detail::init_linear(d, d, rng);
    lp.wq2 = detail::init_linear(d, d, rng);
    lp.wk2 = detail::init_linear(d, dims.enc_dim, rng);
    lp.wv2 = detail::init_linear(d, dims.enc_dim, rng);
    lp.wo2 = detail::init_linear(d, d, rng);
    lp.w1 = detail::init_linear(dims.d_ff, d, rng);
    lp.w2 = detail::init_linear(d, dims.d_ff, rng);
    p.layers.push_back(std::move(lp));
  }
  for (DecoderMode m : {DecoderMode::kAr, DecoderMode::kAmd}) {
    auto& set = (m == DecoderMode::kAr) ? p.delta_ar : p.delta_amd;
    for (int l = 0; l < dims.n_layers; ++l) {
      LayerDeltas ld;
      ld.wq = detail::init_delta(d, d, dims.rank, rng);
      ld.wk = detail::init_delta(d, d, dims.rank, rng);
      ld.wv = detail::init_delta(d, d, dims.rank, rng);
      ld.wo = detail::init_delta(d, d, dims.rank, rng);
      ld.wq2 = detail::init_delta(d, d, dims.rank, rng);
      ld.wk2 = detail::init_delta(d, dims.enc_dim, dims.rank, rng);
      ld.wv2 = detail::init_delta(d, dims.enc_dim, dims.rank, rng);
      ld.wo2 = detail::init_delta(d, d, dims.rank, rng);
      ld.w1 = detail::init_delta(dims.d_ff, d, dims.rank, rng);
      ld.w2 = detail::init_delta(d, dims.d_ff, dims.rank, rng);
      set.push_back(std::move(ld));
    }
  }
  return p;
}

// Materialized W_base + B*A, used by tests and nowhere on the hot path.
inline Mat effective_weight(const LinearW& w, const LoraDelta& d) {
  if (d.B.size() == 0 || d.A.size() == 0) return w.W;
  return w.W + d.B * d.A;
}

// Fills both factors of every delta in one mode with random values.
inline void randomize_deltas(ToyDecoderParams& p, DecoderMode mode, uint64_t seed,
                             double scale = 0.2) {
  auto rng = make_rng(seed, "delta-randomize");
  auto& set = (mode == DecoderMode::kAr) ? p.delta_ar : p.delta_amd;
  for (auto& ld : set) {
    for (LoraDelta* d : {&ld.wq, &ld.wk, &ld.wv, &ld.wo, &ld.wq2, &ld.wk2, &ld.wv2,
                         &ld.wo2, &ld.w1, &ld.w2}) {
      d->A = detail::randn(d->A.rows(), d->A.cols(), scale, rng);
      d->B = detail::randn(d->B.rows(), d->B.cols(), scale, rng);
    }
  }
}

// ---------------------------------------------------------------------------
// Parameter traversal: flat views over every tensor of one parameter set, in
// a fixed documented order. The optimizer, checkpoint format, and
// finite-difference checks all iterate this list.

enum class ParamSet { kBackbone, kDeltaAr, kDeltaAmd };

struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index size;
};

inline std::vector<TensorRef> tensor_refs(ToyDecoderParams& p, ParamSet set) {
  std::vector<TensorRef> refs;
  auto add_m = [&](const std::string& name, Mat& m) {
    refs.push_back({name, m.data(), m.size()});
  };
  auto add_v = [&](const std::string& name, Vec& v) {
    refs.push_back({name, v.data(), v.size()});
  };
  auto add_lin = [&](const std::string& name, LinearW& w) {
    add_m(name + ".W", w.W);
    add_v(name + ".b", w.b);
  };
  if (set == ParamSet::kBackbone) {
    add_m("embedding", p.embedding);
    add_lin("ctc_head", p.ctc_head);
    add_lin("out", p.out);
    add_v("lnf.g", p.lnf_g);
    add_v("lnf.b", p.lnf_b);
    for (size_t l = 0; l < p.layers.size(); ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      LayerParams& lp = p.layers[l];
      add_v(pre + "ln1.g", lp.ln1_g);
      add_v(pre + "ln1.b", lp.ln1_b);
      add_lin(pre + "wq", lp.wq);
      add_lin(pre + "wk", lp.wk);
      add_lin(pre + "wv", lp.wv);
      add_lin(pre + "wo", lp.wo);
      add_v(pre + "ln2.g", lp.ln2_g);
      add_v(pre + "ln2.b", lp.ln2_b);
      add_lin(pre + "wq2", lp.wq2);
      add_lin(pre + "wk2", lp.wk2);
      add_lin(pre + "wv2", lp.wv2);
      add_lin(pre + "wo2", lp.wo2);
      add_v(pre + "ln3.g", lp.ln3_g);
      add_v(pre + "ln3.b", lp.ln3_b);
      add_lin(pre + "w1", lp.w1);
      add_lin(pre + "w2", lp.w2);
    }
  } else {
    auto& deltas = (set == ParamSet::kDeltaAr) ? p.delta_ar : p.delta_amd;
    const std::string mode = (set == ParamSet::kDeltaAr) ? "ar." : "amd.";
    for (size_t l = 0; l < deltas.size(); ++l) {
      const std::string pre = mode + "layer" + std::to_string(l) + ".";
      LayerDeltas& ld = deltas[l];
      auto add_delta = [&](const std::string& n, LoraDelta& d) {
        add_m(pre + n + ".A", d.A);
        add_m(pre + n + ".B", d.B);
      };
      add_delta("wq", ld.wq);
      add_delta("wk", ld.wk);
      add_delta("wv", ld.wv);
      add_delta("wo", ld.wo);
      add_delta("wq2", ld.wq2);
      add_delta("wk2", ld.wk2);
      add_delta("wv2", ld.wv2);
      add_delta("wo2", ld.wo2);
      add_delta("w1", ld.w1);
      add_delta("w2", ld.w2);
    }
  }
  return refs;
}

inline ToyDecoderParams zeros_like(const ToyDecoderParams& p) {
  ToyDecoderParams z = p;
  for (ParamSet s : {ParamSet::kBackbone, ParamSet::kDeltaAr, ParamSet::kDeltaAmd})
    for (auto& r : tensor_refs(z, s)) std::fill(r.data, r.data + r.size, 0.0);
  return z;
}

// ---------------------------------------------------------------------------
// Attention mask plans. Positions index the decoder input, with sos at 0 and
// label slot j at input position j. A block plan masks the contiguous slot
// range [mask_begin, mask_end): those positions lose their token embedding
// (positional encoding stays), are removed as attention keys for every query
// at every layer, and the remaining keys renormalize. A causal plan is the
// plain AR lower-triangular mask with no masked positions.

struct AttentionMaskPlan {
  int input_len = 0;
  int mask_begin = 0;
  int mask_end = 0;
  bool causal = false;

  bool masked(int pos) const { return !causal && pos >= mask_begin && pos < mask_end; }
  int mask_size() const { return causal ? 0 : mask_end - mask_begin; }

  static AttentionMaskPlan make_causal(int input_len) {
    AttentionMaskPlan p;
    p.input_len = input_len;
    p.causal = true;
    return p;
  }

  // slot_begin is the 1-based label slot of the first masked position.
  static AttentionMaskPlan make_block(int input_len, int slot_begin, int block_size) {
    AttentionMaskPlan p;
    p.input_len = input_len;
    p.mask_begin = slot_begin;
    p.mask_end = slot_begin + block_size;
    p.validate();
    return p;
  }

  void validate() const {
    if (input_len < 1) throw ConfigError("mask plan needs a nonempty input");
    if (causal) return;
    if (mask_begin < 1) throw ConfigError("mask may not cover position 0 (sos)");
    if (mask_end <= mask_begin) throw ConfigError("mask plan needs a nonempty block");
    if (mask_end > input_len) throw ConfigError("mask block exceeds input length");
  }
};

// ---------------------------------------------------------------------------
// Training-time block-size sampling. Each of the four passes produces a
// tiling of the label slots [1, L] into mask plans: UNI draws one size per
// pass, VAR re-draws the size for every block within a pass.

struct BlockSampling {
  enum class Strategy { kUni, kVar };
  Strategy strategy = Strategy::kUni;
  int passes = 4;
  uint64_t seed = 0;
};

inline std::vector<std::vector<AttentionMaskPlan>> sample_blocks(int label_len,
                                                                 const BlockSampling& s) {
  if (label_len < 1) throw ConfigError("sample_blocks needs at least one label slot");
  if (s.passes < 1) throw ConfigError("sample_blocks needs at least one pass");
  const int input_len = label_len + 1;
  std::vector<std::vector<AttentionMaskPlan>> passes;
  for (int n = 0; n < s.passes; ++n) {
    auto rng = make_rng(s.seed, "block-pass", uint64_t(n));
    std::uniform_int_distribution<int> size_dist(1, label_len);
    std::vector<AttentionMaskPlan> plans;
    int slot = 1;
    int b = size_dist(rng);
    while (slot <= label_len) {
      if (s.strategy == BlockSampling::Strategy::kVar) b = size_dist(rng);
      const int sz = std::min(b, label_len - slot + 1);
      plans.push_back(AttentionMaskPlan::make_block(input_len, slot, sz));
      slot += sz;
    }
    passes.push_back(std::move(plans));
  }
  return passes;
}

// ---------------------------------------------------------------------------
// Forward pass. Pre-norm transformer decoder: self-attention under the plan's
// mask, cross-attention over the encoder output, position-wise feed-forward
// with GELU, final layer norm, and a log-softmax output head. Every weight is
// applied as W_base + B*A for the active mode's delta.

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct LnCache {
  Mat xhat;
  Vec istd;
};

inline Mat layer_norm(const Mat& x, const Vec& g, const Vec& b, LnCache* cache) {
  constexpr double eps = 1e-5;
  const Eigen::Index d = x.cols();
  Mat out(x.rows(), d);
  Mat xhat(x.rows(), d);
  Vec istd(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().sum() / double(d);
    const double is = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mean) * is;
    out.row(i) = xhat.row(i).array() * g.transpose().array() + b.transpose().array();
    istd[i] = is;
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->istd = std::move(istd);
  }
  return out;
}

// dY -> dX for the layer norm above; accumulates dgamma/dbeta.
inline Mat layer_norm_backward(const Mat& dy, const LnCache& c, const Vec& g, Vec* dg,
                               Vec* db) {
  const Eigen::Index d = dy.cols();
  Mat dx(dy.rows(), d);
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    Eigen::RowVectorXd dxhat = dy.row(i).array() * g.transpose().array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat.array() * c.xhat.row(i).array()).mean();
    dx.row(i) = c.istd[i] * (dxhat.array() - m1 - c.xhat.row(i).array() * m2);
  }
  if (dg) *dg += (dy.array() * c.xhat.array()).colwise().sum().matrix().transpose();
  if (db) *db += dy.colwise().sum().transpose();
  return dx;
}

// y = x * W_eff^T + b with W_eff = W + B*A. Caches x*A^T for the backward.
inline Mat lora_linear(const Mat& x, const LinearW& w, const LoraDelta& d, Mat* xa_cache) {
  Mat y = x * w.W.transpose();
  y.rowwise() += w.b.transpose();
  if (d.A.size() > 0 && d.B.size() > 0) {
    Mat xa = x * d.A.transpose();
    y.noalias() += xa * d.B.transpose();
    if (xa_cache) *xa_cache = std::move(xa);
  } else if (xa_cache) {
    xa_cache->resize(0, 0);
  }
  return y;
}

struct GradFlags {
  bool backbone = true;
  bool delta = false;  // the active mode's delta set
};

// Backward of lora_linear. Returns dX; accumulates weight grads per flags.
inline Mat lora_linear_backward(const Mat& x, const Mat& xa, const LinearW& w,
                                const LoraDelta& d, const Mat& dy, const GradFlags& flags,
                                LinearW* gw, LoraDelta* gd) {
  Mat dx = dy * w.W;
  const bool has_delta = d.A.size() > 0 && d.B.size() > 0;
  if (has_delta) dx.noalias() += (dy * d.B) * d.A;
  if (flags.backbone && gw) {
    gw->W.noalias() += dy.transpose() * x;
    gw->b += dy.colwise().sum().transpose();
  }
  if (flags.delta && has_delta && gd) {
    gd->B.noalias() += dy.transpose() * xa;
    gd->A.noalias() += (dy * d.B).transpose() * x;
  }
  return dx;
}

// Disallowed keys carry a -inf score and must end up with exactly zero
// weight, so the exp is taken per entry (vectorized exp clamps -inf).
inline Mat softmax_rows(const Mat& scores) {
  Mat out(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const double m = scores.row(i).maxCoeff();
    if (m == kNegInf) throw Error("attention row with no allowed keys");
    double sum = 0.0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      const double e = (scores(i, j) == kNegInf) ? 0.0 : std::exp(scores(i, j) - m);
      out(i, j) = e;
      sum += e;
    }
    out.row(i) /= sum;
  }
  return out;
}

// dA -> dS for row softmax: dS = A .* (dA - rowsum(dA .* A)).
inline Mat softmax_rows_backward(const Mat& a, const Mat& da) {
  Mat ds(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double dot = (da.row(i).array() * a.row(i).array()).sum();
    ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
  }
  return ds;
}

}  // namespace detail

struct LayerCache {
  Mat x_in;
  detail::LnCache ln1;
  Mat n1, q, k, v;
  std::vector<Mat> attn;  // per head, L x L
  Mat c;
  Mat x_self;
  detail::LnCache ln2;
  Mat n2, q2, k2, v2;
  std::vector<Mat> attn2;  // per head, L x T'
  Mat c2;
  Mat x_cross;
  detail::LnCache ln3;
  Mat n3, h1, g;
  Mat xa_q, xa_k, xa_v, xa_o, xa_q2, xa_k2, xa_v2, xa_o2, xa_1, xa_2;
};

struct Workspace {
  Mat x0;
  std::vector<LayerCache> layers;
  Mat x_final;
  detail::LnCache lnf;
  Mat nf, logits, logp, prob;
};

// Full-position log-distribution matrix (input_len x V). In AR mode row j is
// the next-token distribution given positions <= j; in AMD mode row j is the
// distribution for the token at slot j itself.
inline Mat decoder_forward(const ToyDecoderParams& p, DecoderMode mode,
                           const EncoderOutput& enc, const std::vector<int>& tokens,
                           const AttentionMaskPlan& plan, Workspace* ws = nullptr) {
  const int len = int(tokens.size());
  if (len != plan.input_len) throw ConfigError("token count does not match mask plan");
  if (len > p.dims.max_len)
    throw ConfigError("input length " + std::to_string(len) + " exceeds model max_len " +
                      std::to_string(p.dims.max_len));
  if (enc.dim() != 0 && enc.num_frames() > 0 && enc.dim() != p.dims.enc_dim)
    throw ConfigError("encoder feature dimension mismatch");
  for (int t : tokens)
    if (t < 0 || t >= p.dims.vocab) throw ConfigError("token id out of range");

  const int d = p.dims.d_model;
  const int heads = p.dims.n_heads;
  const int dk = p.dims.d_head();
  const double inv_sqrt_dk = 1.0 / std::sqrt(double(dk));
  const Eigen::Index t_frames = enc.num_frames();
  const auto& deltas = p.deltas(mode);

  Mat x(len, d);
  const double emb_scale = std::sqrt(double(d));
  for (int q = 0; q < len; ++q) {
    if (plan.masked(q))
      x.row(q) = p.positional.row(q);
    else
      x.row(q) = emb_scale * p.embedding.row(tokens[q]) + p.positional.row(q);
  }

  if (t_frames > p.dims.max_len)
    throw ConfigError("encoder frame count exceeds model max_len");

  // Additive self-attention bias shared by all layers.
  Mat bias = Mat::Zero(len, len);
  for (int qq = 0; qq < len; ++qq)
    for (int kk = 0; kk < len; ++kk)
      if (plan.causal ? (kk > qq) : plan.masked(kk)) bias(qq, kk) = kNegInf;

  if (ws) {
    ws->x0 = x;
    ws->layers.assign(size_t(p.dims.n_layers), LayerCache{});
  }

  for (int l = 0; l < p.dims.n_layers; ++l) {
    const LayerParams& lp = p.layers[l];
    const LayerDeltas& ld = deltas[l];
    LayerCache* lc = ws ? &ws->layers[l] : nullptr;
    if (lc) lc->x_in = x;

    // Self-attention.
    detail::LnCache ln1;
    Mat n1 = detail::layer_norm(x, lp.ln1_g, lp.ln1_b, &ln1);
    Mat q = detail::lora_linear(n1, lp.wq, ld.wq, lc ? &lc->xa_q : nullptr);
    Mat k = detail::lora_linear(n1, lp.wk, ld.wk, lc ? &lc->xa_k : nullptr);
    Mat v = detail::lora_linear(n1, lp.wv, ld.wv, lc ? &lc->xa_v : nullptr);
    Mat c(len, d);
    std::vector<Mat> attn;
    for (int h = 0; h < heads; ++h) {
      Mat s = (q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose()) * inv_sqrt_dk;
      s += bias;
      Mat a = detail::softmax_rows(s);
      c.middleCols(h * dk, dk) = a * v.middleCols(h * dk, dk);
      if (lc) attn.push_back(std::move(a));
    }
    Mat self_out = detail::lora_linear(c, lp.wo, ld.wo, lc ? &lc->xa_o : nullptr);
    Mat x_self = x + self_out;
    if (lc) {
      lc->ln1 = std::move(ln1);
      lc->n1 = std::move(n1);
      lc->q = std::move(q);
      lc->k = std::move(k);
      lc->v = std::move(v);
      lc->attn = std::move(attn);
      lc->c = std::move(c);
      lc->x_self = x_self;
    }

    // Cross-attention over encoder frames; a zero-frame encoder contributes
    // nothing.
    Mat x_cross = x_self;
    if (t_frames > 0) {
      detail::LnCache ln2;
      Mat n2 = detail::layer_norm(x_self, lp.ln2_g, lp.ln2_b, &ln2);
      Mat q2 = detail::lora_linear(n2, lp.wq2, ld.wq2, lc ? &lc->xa_q2 : nullptr);
      // Frames carry no intrinsic time information; the keys get the model's
      // sinusoidal position rows added after projection so queries and keys
      // share one frequency ladder. Values stay pure content.
      Mat k2 = detail::lora_linear(enc.frames, lp.wk2, ld.wk2, lc ? &lc->xa_k2 : nullptr);
      k2 += p.positional.topRows(t_frames);
      Mat v2 = detail::lora_linear(enc.frames, lp.wv2, ld.wv2, lc ? &lc->xa_v2 : nullptr);
      Mat c2(len, d);
      std::vector<Mat> attn2;
      for (int h = 0; h < heads; ++h) {
        Mat s = (q2.middleCols(h * dk, dk) * k2.middleCols(h * dk, dk).transpose()) *
                inv_sqrt_dk;
        Mat a = detail::softmax_rows(s);
        c2.middleCols(h * dk, dk) = a * v2.middleCols(h * dk, dk);
        if (lc) attn2.push_back(std::move(a));
      }
      Mat cross_out = detail::lora_linear(c2, lp.wo2, ld.wo2, lc ? &lc->xa_o2 : nullptr);
      x_cross = x_self + cross_out;
      if (lc) {
        lc->ln2 = std::move(ln2);
        lc->n2 = std::move(n2);
        lc->q2 = std::move(q2);
        lc->k2 = std::move(k2);
        lc->v2 = std::move(v2);
        lc->attn2 = std::move(attn2);
        lc->c2 = std::move(c2);
      }
    }
    if (lc) lc->x_cross = x_cross;

    // Feed-forward.
    detail::LnCache ln3;
    Mat n3 = detail::layer_norm(x_cross, lp.ln3_g, lp.ln3_b, &ln3);
    Mat h1 = detail::lora_linear(n3, lp.w1, ld.w1, lc ? &lc->xa_1 : nullptr);
    Mat g = h1.unaryExpr([](double v) { return detail::gelu(v); });
    Mat f = detail::lora_linear(g, lp.w2, ld.w2, lc ? &lc->xa_2 : nullptr);
    x = x_cross + f;
    if (lc) {
      lc->ln3 = std::move(ln3);
      lc->n3 = std::move(n3);
      lc->h1 = std::move(h1);
      lc->g = std::move(g);
    }
  }

  detail::LnCache lnf;
  Mat nf = detail::layer_norm(x, p.lnf_g, p.lnf_b, &lnf);
  Mat logits = nf * p.out.W.transpose();
  logits.rowwise() += p.out.b.transpose();
  Mat logp(len, p.dims.vocab);
  Mat prob(len, p.dims.vocab);
  for (int i = 0; i < len; ++i) {
    const double lse = log_sum_exp_row(logits.row(i));
    logp.row(i) = logits.row(i).array() - lse;
    prob.row(i) = logp.row(i).array().exp();
  }
  if (ws) {
    ws->x_final = std::move(x);
    ws->lnf = std::move(lnf);
    ws->nf = std::move(nf);
    ws->logits = std::move(logits);
    ws->logp = logp;
    ws->prob = std::move(prob);
  }
  return logp;
}

// Per-position next-token log-distributions for a sos-prefixed sequence.
inline Mat forward_ar(const ToyDecoderParams& p, const EncoderOutput& enc,
                      const std::vector<int>& tokens_with_sos) {
  return decoder_forward(p, DecoderMode::kAr, enc, tokens_with_sos,
                         AttentionMaskPlan::make_causal(int(tokens_with_sos.size())));
}

// Log-distributions for the masked slots, rows ordered by slot position.
inline Mat forward_amd(const ToyDecoderParams& p, const EncoderOutput& enc,
                       const std::vector<int>& tokens_with_sos,
                       const AttentionMaskPlan& plan) {
  plan.validate();
  if (plan.causal) throw ConfigError("forward_amd needs a block plan");
  Mat full = decoder_forward(p, DecoderMode::kAmd, enc, tokens_with_sos, plan);
  return full.middleRows(plan.mask_begin, plan.mask_size());
}

using detail::GradFlags;

// Backward pass over a recorded workspace; accumulates into `grads` (a
// zeros_like clone of the parameters). dlogp is the gradient w.r.t. the full
// log-probability matrix.
inline void decoder_backward(const ToyDecoderParams& p, DecoderMode mode,
                             const EncoderOutput& enc, const std::vector<int>& tokens,
                             const AttentionMaskPlan& plan, const Workspace& ws,
                             const Mat& dlogp, const GradFlags& flags,
                             ToyDecoderParams& grads) {
  const int len = int(tokens.size());
  const int d = p.dims.d_model;
  const int heads = p.dims.n_heads;
  const int dk = p.dims.d_head();
  const double inv_sqrt_dk = 1.0 / std::sqrt(double(dk));
  const Eigen::Index t_frames = enc.num_frames();
  const auto& deltas = p.deltas(mode);
  auto& gdeltas = (mode == DecoderMode::kAr) ? grads.delta_ar : grads.delta_amd;

  // log-softmax backward.
  Mat dlogits(len, p.dims.vocab);
  for (int i = 0; i < len; ++i) {
    const double s = dlogp.row(i).sum();
    dlogits.row(i) = dlogp.row(i) - s * ws.prob.row(i);
  }

  Mat dnf = dlogits * p.out.W;
  if (flags.backbone) {
    grads.out.W.noalias() += dlogits.transpose() * ws.nf;
    grads.out.b += dlogits.colwise().sum().transpose();
  }
  Mat dx = detail::layer_norm_backward(dnf, ws.lnf, p.lnf_g,
                                       flags.backbone ? &grads.lnf_g : nullptr,
                                       flags.backbone ? &grads.lnf_b : nullptr);

  for (int l = p.dims.n_layers - 1; l >= 0; --l) {
    const LayerParams& lp = p.layers[l];
    const LayerDeltas& ld = deltas[l];
    const LayerCache& lc = ws.layers[l];
    LayerParams& glp = grads.layers[l];
    LayerDeltas& gld = gdeltas[l];

    // Feed-forward.
    Mat dg = detail::lora_linear_backward(lc.g, lc.xa_2, lp.w2, ld.w2, dx, flags,
                                          flags.backbone ? &glp.w2 : nullptr,
                                          flags.delta ? &gld.w2 : nullptr);
    Mat dh1 = dg.array() * lc.h1.unaryExpr([](double v) { return detail::gelu_grad(v); }).array();
    Mat dn3 = detail::lora_linear_backward(lc.n3, lc.xa_1, lp.w1, ld.w1, dh1, flags,
                                           flags.backbone ? &glp.w1 : nullptr,
                                           flags.delta ? &gld.w1 : nullptr);
    Mat dx_cross = dx + detail::layer_norm_backward(dn3, lc.ln3, lp.ln3_g,
                                                    flags.backbone ? &glp.ln3_g : nullptr,
                                                    flags.backbone ? &glp.ln3_b : nullptr);

    // Cross-attention.
    Mat dx_self = dx_cross;
    if (t_frames > 0) {
      Mat dc2 = detail::lora_linear_backward(lc.c2, lc.xa_o2, lp.wo2, ld.wo2, dx_cross,
                                             flags, flags.backbone ? &glp.wo2 : nullptr,
                                             flags.delta ? &gld.wo2 : nullptr);
      Mat dq2 = Mat::Zero(len, d);
      Mat dk2 = Mat::Zero(t_frames, d);
      Mat dv2 = Mat::Zero(t_frames, d);
      for (int h = 0; h < heads; ++h) {
        const auto q2h = lc.q2.middleCols(h * dk, dk);
        const auto k2h = lc.k2.middleCols(h * dk, dk);
        const auto v2h = lc.v2.middleCols(h * dk, dk);
        const Mat& a = lc.attn2[h];
        Mat dch = dc2.middleCols(h * dk, dk);
        Mat da = dch * v2h.transpose();
        dv2.middleCols(h * dk, dk) = a.transpose() * dch;
        Mat ds = detail::softmax_rows_backward(a, da);
        dq2.middleCols(h * dk, dk) = ds * k2h * inv_sqrt_dk;
        dk2.middleCols(h * dk, dk) = ds.transpose() * q2h * inv_sqrt_dk;
      }
      Mat dn2 = detail::lora_linear_backward(lc.n2, lc.xa_q2, lp.wq2, ld.wq2, dq2, flags,
                                             flags.backbone ? &glp.wq2 : nullptr,
                                             flags.delta ? &gld.wq2 : nullptr);
      detail::lora_linear_backward(enc.frames, lc.xa_k2, lp.wk2, ld.wk2, dk2, flags,
                                   flags.backbone ? &glp.wk2 : nullptr,
                                   flags.delta ? &gld.wk2 : nullptr);
      detail::lora_linear_backward(enc.frames, lc.xa_v2, lp.wv2, ld.wv2, dv2, flags,
                                   flags.backbone ? &glp.wv2 : nullptr,
                                   flags.delta ? &gld.wv2 : nullptr);
      dx_self += detail::layer_norm_backward(dn2, lc.ln2, lp.ln2_g,
                                             flags.backbone ? &glp.ln2_g : nullptr,
                                             flags.backbone ? &glp.ln2_b : nullptr);
    }

    // Self-attention.
    Mat dc = detail::lora_linear_backward(lc.c, lc.xa_o, lp.wo, ld.wo, dx_self, flags,
                                          flags.backbone ? &glp.wo : nullptr,
                                          flags.delta ? &gld.wo : nullptr);
    Mat dq = Mat::Zero(len, d);
    Mat dkk = Mat::Zero(len, d);
    Mat dv = Mat::Zero(len, d);
    for (int h = 0; h < heads; ++h) {
      const auto qh = lc.q.middleCols(h * dk, dk);
      const auto kh = lc.k.middleCols(h * dk, dk);
      const auto vh = lc.v.middleCols(h * dk, dk);
      const Mat& a = lc.attn[h];
      Mat dch = dc.middleCols(h * dk, dk);
      Mat da = dch * vh.transpose();
      dv.middleCols(h * dk, dk) = a.transpose() * dch;
      Mat ds = detail::softmax_rows_backward(a, da);
      dq.middleCols(h * dk, dk) = ds * kh * inv_sqrt_dk;
      dkk.middleCols(h * dk, dk) = ds.transpose() * qh * inv_sqrt_dk;
    }
    Mat dn1 = detail::lora_linear_backward(lc.n1, lc.xa_q, lp.wq, ld.wq, dq, flags,
                                           flags.backbone ? &glp.wq : nullptr,
                                           flags.delta ? &gld.wq : nullptr);
    dn1 += detail::lora_linear_backward(lc.n1, lc.xa_k, lp.wk, ld.wk, dkk, flags,
                                        flags.backbone ? &glp.wk : nullptr,
                                        flags.delta ? &gld.wk : nullptr);
    dn1 += detail::lora_linear_backward(lc.n1, lc.xa_v, lp.wv, ld.wv, dv, flags,
                                        flags.backbone ? &glp.wv : nullptr,
                                        flags.delta ? &gld.wv : nullptr);
    dx = dx_self + detail::layer_norm_backward(dn1, lc.ln1, lp.ln1_g,
                                               flags.backbone ? &glp.ln1_g : nullptr,
                                               flags.backbone ? &glp.ln1_b : nullptr);
  }

  if (flags.backbone) {
    const double emb_scale = std::sqrt(double(d));
    for (int q = 0; q < len; ++q) {
      if (plan.masked(q)) continue;  // masked slots carry no token embedding
      grads.embedding.row(tokens[q]) += emb_scale * dx.row(q);
    }
  }
}

// ---------------------------------------------------------------------------
// Losses. Each scores exactly the sequence it is given (|ref| targets); the
// training recipe decides what that sequence is.

// Teacher-forced AR negative log-likelihood over |ref| targets.
inline double ar_loss(const ToyDecoderParams& p, const EncoderOutput& enc,
                      const std::vector<int>& ref, const Vocab& vocab,
                      ToyDecoderParams* grads = nullptr, GradFlags flags = {}) {
  if (ref.empty()) return 0.0;
  std::vector<int> input;
  input.reserve(ref.size() + 1);
  input.push_back(vocab.sos_id);
  input.insert(input.end(), ref.begin(), ref.end());
  const auto plan = AttentionMaskPlan::make_causal(int(input.size()));
  Workspace ws;
  const Mat logp = decoder_forward(p, DecoderMode::kAr, enc, input, plan,
                                   grads ? &ws : nullptr);
  double loss = 0.0;
  for (size_t j = 0; j < ref.size(); ++j) loss -= logp(Eigen::Index(j), ref[j]);
  if (grads) {
    Mat dlogp = Mat::Zero(logp.rows(), logp.cols());
    for (size_t j = 0; j < ref.size(); ++j) dlogp(Eigen::Index(j), ref[j]) = -1.0;
    decoder_backward(p, DecoderMode::kAr, enc, input, plan, ws, dlogp, flags, *grads);
  }
  return loss;
}

// Four-pass masked negative log-likelihood: every label slot is scored once
// per pass, under that pass's block tiling, with ground truth everywhere
// outside the masked block.
inline double amd_loss(const ToyDecoderParams& p, const EncoderOutput& enc,
                       const std::vector<int>& ref, const Vocab& vocab,
                       const BlockSampling& sampling, ToyDecoderParams* grads = nullptr,
                       GradFlags flags = {.backbone = false, .delta = true}) {
  if (ref.empty()) throw ConfigError("amd_loss needs a nonempty reference");
  std::vector<int> input;
  input.reserve(ref.size() + 1);
  input.push_back(vocab.sos_id);
  input.insert(input.end(), ref.begin(), ref.end());
  const auto passes = sample_blocks(int(ref.size()), sampling);
  double loss = 0.0;
  for (const auto& pass : passes) {
    for (const auto& plan : pass) {
      Workspace ws;
      const Mat logp =
          decoder_forward(p, DecoderMode::kAmd, enc, input, plan, grads ? &ws : nullptr);
      for (int j = plan.mask_begin; j < plan.mask_end; ++j) loss -= logp(j, ref[j - 1]);
      if (grads) {
        Mat dlogp = Mat::Zero(logp.rows(), logp.cols());
        for (int j = plan.mask_begin; j < plan.mask_end; ++j) dlogp(j, ref[j - 1]) = -1.0;
        decoder_backward(p, DecoderMode::kAmd, enc, input, plan, ws, dlogp, flags, *grads);
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// CTC emission head over encoder frames.

inline CtcPosteriors ctc_posteriors(const ToyDecoderParams& p, const EncoderOutput& enc) {
  CtcPosteriors post;
  Mat logits = enc.frames * p.ctc_head.W.transpose();
  logits.rowwise() += p.ctc_head.b.transpose();
  post.log_probs.resize(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double lse = log_sum_exp_row(logits.row(t));
    post.log_probs.row(t) = logits.row(t).array() - lse;
  }
  return post;
}

// CTC loss through the emission head; accumulates head gradients when asked.
// Returns +inf (and touches no gradient) when no alignment fits.
inline double ctc_head_loss(const ToyDecoderParams& p, const EncoderOutput& enc,
                            const std::vector<int>& ref, const Vocab& vocab,
                            ToyDecoderParams* grads = nullptr) {
  const CtcPosteriors post = ctc_posteriors(p, enc);
  const CtcLossResult res = ctc_loss(post, ref, vocab);
  if (!res.feasible) return kPosInf;
  if (grads) {
    Mat dlogits(post.log_probs.rows(), post.log_probs.cols());
    for (Eigen::Index t = 0; t < post.log_probs.rows(); ++t) {
      const double s = res.grad.row(t).sum();
      dlogits.row(t) =
          res.grad.row(t) - s * post.log_probs.row(t).array().exp().matrix();
    }
    grads->ctc_head.W.noalias() += dlogits.transpose() * enc.frames;
    grads->ctc_head.b += dlogits.colwise().sum().transpose();
  }
  return res.loss;
}

}  // namespace amdec
