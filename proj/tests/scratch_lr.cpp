// Scratch probe: stage-1 convergence under different learning rates.
#include <cstdio>

#include "amdec/data.hpp"
#include "amdec/eval.hpp"
#include "amdec/search.hpp"
#include "amdec/train.hpp"

using namespace amdec;

int main(int argc, char** argv) {
  const double lr = argc > 1 ? std::atof(argv[1]) : 0.0025;
  const int epochs = argc > 2 ? std::atoi(argv[2]) : 60;

  SyntheticTaskSpec spec;
  spec.vocab = 16;
  spec.len_lo = 26;
  spec.len_hi = 40;
  spec.frames_lo = 2;
  spec.frames_hi = 2;
  spec.feat_dim = 8;
  spec.noise_sigma = 0.15;
  spec.n_train = 300;
  spec.n_dev = 30;
  spec.n_test = 0;
  spec.seed = 7;
  Corpus c = generate(spec);

  ModelDims dims;
  dims.d_model = 16;
  dims.n_layers = 2;
  dims.n_heads = 2;
  dims.d_ff = 64;
  dims.rank = 4;
  dims.vocab = c.vocab.size();
  dims.enc_dim = spec.feat_dim;
  dims.max_len = 160;
  ToyDecoderParams p = ToyDecoderParams::init(dims, 5);

  TrainConfig tcfg;
  tcfg.adam.lr = lr;
  tcfg.stage2_epochs = 0;
  auto eval_losses = [&] {
    double ctc = 0, ar = 0;
    long toks = 0;
    for (int i = 0; i < 30; ++i) {
      const auto& u = c.train[size_t(i)];
      std::vector<int> tgt = u.ref;
      tgt.push_back(c.vocab.eos_id);
      ctc += ctc_head_loss(p, u.enc, u.ref, c.vocab);
      ar += ar_loss(p, u.enc, tgt, c.vocab);
      toks += long(u.ref.size());
    }
    std::printf("  ctc/token %.3f  ar/token %.3f\n", ctc / double(toks), ar / double(toks));
  };

  for (int chunk = 0; chunk < epochs / 10; ++chunk) {
    tcfg.stage1_epochs = 10;
    tcfg.seed = 1 + uint64_t(chunk);  // fresh shuffles per chunk
    train_stage1(p, c.train, c.vocab, tcfg);
    std::printf("epoch %d:\n", (chunk + 1) * 10);
    eval_losses();
  }

  auto wer_of = [&](const FusionWeights& w, bool baseline) {
    std::vector<std::vector<std::string>> refs;
    std::vector<std::vector<std::vector<std::string>>> nbest;
    for (const auto& u : c.dev) {
      const CtcPosteriors post = ctc_posteriors(p, u.enc);
      SearchConfig cfg;
      cfg.l_max = 64;
      cfg.weights = w;
      cfg.schedule = BlockScheduleSpec{0, 1};
      const DecodeResult res = baseline
                                   ? decode_baseline(u.enc, post, p, c.vocab, cfg)
                                   : decode_tripartite(u.enc, post, p, c.vocab, cfg);
      std::vector<std::string> ref;
      for (int t : u.ref) ref.push_back(c.vocab.tokens[size_t(t)]);
      refs.push_back(ref);
      std::vector<std::string> hyp;
      for (int t : res.nbest.best().hyp.tokens)
        if (!c.vocab.is_special(t)) hyp.push_back(c.vocab.tokens[size_t(t)]);
      nbest.push_back({hyp});
    }
    return score_corpus(refs, nbest).wer_pct;
  };
  // Pure CTC greedy.
  {
    std::vector<std::vector<std::string>> refs;
    std::vector<std::vector<std::vector<std::string>>> nbest;
    for (const auto& u : c.dev) {
      const CtcPosteriors post = ctc_posteriors(p, u.enc);
      std::vector<std::string> ref, hyp;
      for (int t : u.ref) ref.push_back(c.vocab.tokens[size_t(t)]);
      for (int t : ctc_greedy(post, c.vocab)) hyp.push_back(c.vocab.tokens[size_t(t)]);
      refs.push_back(ref);
      nbest.push_back({hyp});
    }
    std::printf("ctc-greedy dev wer %.2f%%\n", score_corpus(refs, nbest).wer_pct);
  }
  std::printf("ar-only dev wer %.2f%%\n", wer_of({0.0, 1.0, 0.0}, true));
  std::printf("baseline dev wer %.2f%%\n", wer_of({0.3, 0.7, 0.0}, true));
  return 0;
}
