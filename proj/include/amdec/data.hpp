// amdec/data.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "amdec/model.hpp"
#include "amdec/search.hpp"
#include "amdec/types.hpp"

namespace amdec {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Synthetic token-to-frames task. Token sequences come from a fixed Markov
// chain (so the decoders have context signal to learn); each token renders as
// a run of frames carrying its code vector plus Gaussian noise.

struct SyntheticTaskSpec {
  int vocab = 16;  // regular tokens, excluding blank/sos/eos
  int len_lo = 26, len_hi = 40;
  int frames_lo = 2, frames_hi = 3;
  int feat_dim = 8;
  double noise_sigma = 0.25;
  double frame_period_s = 0.04;
  int n_train = 300, n_dev = 40, n_test = 200;
  uint64_t seed = 7;

  void validate() const {
    if (vocab < 1) throw ConfigError("need at least one regular token");
    if (len_lo < 1 || len_hi < len_lo) throw ConfigError("bad length range");
    if (frames_lo < 1 || frames_hi < frames_lo) throw ConfigError("bad frames-per-token range");
    if (feat_dim < 1) throw ConfigError("feature dim must be >= 1");
    if (noise_sigma < 0) throw ConfigError("noise sigma must be >= 0");
    if (frame_period_s <= 0) throw ConfigError("frame period must be positive");
    if (n_train < 0 || n_dev < 0 || n_test < 0) throw ConfigError("bad corpus sizes");
  }
};

struct Utterance {
  int id = 0;
  std::vector<int> ref;  // regular token ids only
  EncoderOutput enc;
};

struct Corpus {
  Vocab vocab;
  SyntheticTaskSpec spec;
  Mat token_codes;  // vocab.regular x feat_dim
  std::vector<Utterance> train, dev, test;
};

namespace detail {

// Row-stochastic transition matrix with a dominant successor per token, a
// secondary one, and a uniform floor.
inline Mat markov_transitions(int v) {
  Mat t = Mat::Constant(v, v, 0.30 / double(v));
  for (int i = 0; i < v; ++i) {
    const int first = (i + 1) % v;
    const int second = (3 * i + 1) % v;
    t(i, first) += (second == first) ? 0.70 : 0.45;
    if (second != first) t(i, second) += 0.25;
  }
  return t;
}

inline int sample_categorical(const Eigen::Ref<const Eigen::RowVectorXd>& probs,
                              std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    u -= probs[k];
    if (u <= 0) return int(k);
  }
  return int(probs.size()) - 1;
}

inline double to_f32(double x) { return double(float(x)); }

}  // namespace detail

inline Utterance generate_utterance(const SyntheticTaskSpec& spec, const Mat& transitions,
                                    const Mat& codes, int split_tag, int id) {
  auto rng = make_rng(spec.seed, "utt", uint64_t(split_tag), uint64_t(id));
  std::uniform_int_distribution<int> len_dist(spec.len_lo, spec.len_hi);
  std::uniform_int_distribution<int> frames_dist(spec.frames_lo, spec.frames_hi);
  std::uniform_int_distribution<int> start_dist(0, spec.vocab - 1);
  std::normal_distribution<double> noise(0.0, 1.0);

  Utterance u;
  u.id = id;
  const int len = len_dist(rng);
  u.ref.reserve(size_t(len));
  int tok = start_dist(rng);
  for (int j = 0; j < len; ++j) {
    u.ref.push_back(tok);
    tok = detail::sample_categorical(transitions.row(tok), rng);
  }

  std::vector<int> frames_per_token(u.ref.size());
  int total = 0;
  for (size_t j = 0; j < u.ref.size(); ++j) {
    frames_per_token[j] = frames_dist(rng);
    total += frames_per_token[j];
  }
  // Frames are quantized to f32 at creation so the in-memory corpus equals
  // its on-disk round trip exactly.
  u.enc.frames.resize(total, spec.feat_dim);
  u.enc.frame_period_s = spec.frame_period_s;
  int t = 0;
  for (size_t j = 0; j < u.ref.size(); ++j) {
    for (int f = 0; f < frames_per_token[j]; ++f, ++t) {
      for (int k = 0; k < spec.feat_dim; ++k) {
        u.enc.frames(t, k) =
            detail::to_f32(codes(u.ref[j], k) + spec.noise_sigma * noise(rng));
      }
    }
  }
  return u;
}

inline Corpus generate(const SyntheticTaskSpec& spec) {
  spec.validate();
  Corpus c;
  c.spec = spec;
  c.vocab = Vocab::make_synthetic(spec.vocab);
  {
    auto rng = make_rng(spec.seed, "codes");
    c.token_codes = detail::randn(spec.vocab, spec.feat_dim, 1.0, rng);
  }
  const Mat transitions = detail::markov_transitions(spec.vocab);
  // Disjoint per-split seeds via the split tag in the stream key.
  for (int i = 0; i < spec.n_train; ++i)
    c.train.push_back(generate_utterance(spec, transitions, c.token_codes, 0, i));
  for (int i = 0; i < spec.n_dev; ++i)
    c.dev.push_back(generate_utterance(spec, transitions, c.token_codes, 1, i));
  for (int i = 0; i < spec.n_test; ++i)
    c.test.push_back(generate_utterance(spec, transitions, c.token_codes, 2, i));
  return c;
}

// ---------------------------------------------------------------------------
// Binary primitives, little-endian.

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(reinterpret_cast<const char*>(p), std::streamsize(n));
  if (!os) throw IoError("write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
  is.read(reinterpret_cast<char*>(p), std::streamsize(n));
  if (size_t(is.gcount()) != n) throw FormatError("truncated file");
}

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  using U = std::make_unsigned_t<T>;
  U u = U(value);
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = (unsigned char)((u >> (8 * i)) & 0xff);
  write_bytes(os, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  read_bytes(is, buf, sizeof(T));
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (size_t i = 0; i < sizeof(T); ++i) u |= U(buf[i]) << (8 * i);
  return T(u);
}

inline void write_f32(std::ostream& os, float v) { write_le(os, std::bit_cast<uint32_t>(v)); }
inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<uint32_t>(is)); }
inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<uint64_t>(v)); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<uint64_t>(is)); }

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char buf[4];
  read_bytes(is, buf, 4);
  if (std::memcmp(buf, magic, 4) != 0)
    throw FormatError(std::string("bad magic, expected ") + magic);
}

inline std::ofstream open_out(const std::filesystem::path& path, bool binary) {
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path, bool binary) {
  std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  return is;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Vocab file: one token per line; the special tokens carry a tab-separated
// role marker (blank / sos / eos).

inline void save_vocab(const Vocab& v, const std::filesystem::path& path) {
  v.validate();
  for (const auto& t : v.tokens)
    if (t.find_first_of(" \t\n") != std::string::npos)
      throw FormatError("token strings may not contain whitespace: '" + t + "'");
  auto os = detail::open_out(path, false);
  for (int i = 0; i < v.size(); ++i) {
    os << v.tokens[size_t(i)];
    if (i == v.blank_id) os << "\tblank";
    if (i == v.sos_id) os << "\tsos";
    if (i == v.eos_id) os << "\teos";
    os << '\n';
  }
}

inline Vocab load_vocab(const std::filesystem::path& path) {
  auto is = detail::open_in(path, false);
  Vocab v;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const std::string tok = line.substr(0, tab);
    const int id = v.size();
    v.tokens.push_back(tok);
    if (tab != std::string::npos) {
      const std::string role = line.substr(tab + 1);
      if (role == "blank")
        v.blank_id = id;
      else if (role == "sos")
        v.sos_id = id;
      else if (role == "eos")
        v.eos_id = id;
      else
        throw FormatError("unknown special-token role '" + role + "'");
    }
  }
  try {
    v.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid vocab file: ") + e.what());
  }
  return v;
}

// ---------------------------------------------------------------------------
// Feature matrices: magic "AMDF", u32 rows, u32 cols, row-major f32.

inline void save_features(const Mat& frames, const std::filesystem::path& path) {
  auto os = detail::open_out(path, true);
  detail::write_bytes(os, "AMDF", 4);
  if (frames.rows() > 0xffffffffLL || frames.cols() > 0xffffffffLL)
    throw FormatError("feature matrix too large for format");
  detail::write_le<uint32_t>(os, uint32_t(frames.rows()));
  detail::write_le<uint32_t>(os, uint32_t(frames.cols()));
  for (Eigen::Index i = 0; i < frames.rows(); ++i)
    for (Eigen::Index j = 0; j < frames.cols(); ++j)
      detail::write_f32(os, float(frames(i, j)));
}

inline Mat load_features(const std::filesystem::path& path) {
  auto is = detail::open_in(path, true);
  detail::expect_magic(is, "AMDF");
  const uint32_t rows = detail::read_le<uint32_t>(is);
  const uint32_t cols = detail::read_le<uint32_t>(is);
  if (rows > 0 && cols == 0) throw FormatError("feature matrix with zero columns");
  Mat m(rows, cols);
  for (uint32_t i = 0; i < rows; ++i)
    for (uint32_t j = 0; j < cols; ++j) m(i, j) = double(detail::read_f32(is));
  return m;
}

// ---------------------------------------------------------------------------
// References: "<id>\t<token token ...>" per line.

inline void save_refs(const std::vector<Utterance>& utts, const Vocab& vocab,
                      const std::filesystem::path& path) {
  auto os = detail::open_out(path, false);
  for (const auto& u : utts) {
    os << u.id << '\t';
    for (size_t j = 0; j < u.ref.size(); ++j) {
      if (j) os << ' ';
      os << vocab.tokens[size_t(u.ref[j])];
    }
    os << '\n';
  }
}

struct RefEntry {
  int id = 0;
  std::vector<std::string> tokens;
};

inline std::vector<RefEntry> load_refs(const std::filesystem::path& path) {
  auto is = detail::open_in(path, false);
  std::vector<RefEntry> refs;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("reference line without tab: " + line);
    RefEntry e;
    try {
      e.id = std::stoi(line.substr(0, tab));
    } catch (const std::exception&) {
      throw FormatError("bad utterance id in: " + line);
    }
    std::istringstream toks(line.substr(tab + 1));
    std::string t;
    while (toks >> t) e.tokens.push_back(t);
    refs.push_back(std::move(e));
  }
  return refs;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "AMDP", u16 version, u32 dims, then every tensor of the
// backbone, the AR deltas, and the AMD deltas, f64 row-major, in tensor_refs
// order. The positional table is regenerated on load.

inline void save_checkpoint(const ToyDecoderParams& params,
                            const std::filesystem::path& path) {
  auto os = detail::open_out(path, true);
  detail::write_bytes(os, "AMDP", 4);
  detail::write_le<uint16_t>(os, 1);
  const ModelDims& d = params.dims;
  for (int field : {d.d_model, d.n_layers, d.n_heads, d.d_ff, d.rank, d.vocab, d.enc_dim,
                    d.max_len})
    detail::write_le<uint32_t>(os, uint32_t(field));
  auto& mut = const_cast<ToyDecoderParams&>(params);  // refs only read
  for (ParamSet s : {ParamSet::kBackbone, ParamSet::kDeltaAr, ParamSet::kDeltaAmd})
    for (const auto& r : tensor_refs(mut, s))
      for (Eigen::Index i = 0; i < r.size; ++i) detail::write_f64(os, r.data[i]);
}

inline ToyDecoderParams load_checkpoint(const std::filesystem::path& path) {
  auto is = detail::open_in(path, true);
  detail::expect_magic(is, "AMDP");
  const uint16_t version = detail::read_le<uint16_t>(is);
  if (version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  ModelDims d;
  d.d_model = int(detail::read_le<uint32_t>(is));
  d.n_layers = int(detail::read_le<uint32_t>(is));
  d.n_heads = int(detail::read_le<uint32_t>(is));
  d.d_ff = int(detail::read_le<uint32_t>(is));
  d.rank = int(detail::read_le<uint32_t>(is));
  d.vocab = int(detail::read_le<uint32_t>(is));
  d.enc_dim = int(detail::read_le<uint32_t>(is));
  d.max_len = int(detail::read_le<uint32_t>(is));
  ToyDecoderParams params = [&] {
    try {
      return ToyDecoderParams::init(d, 0);
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint header has invalid dims: ") + e.what());
    }
  }();
  for (ParamSet s : {ParamSet::kBackbone, ParamSet::kDeltaAr, ParamSet::kDeltaAmd})
    for (const auto& r : tensor_refs(params, s))
      for (Eigen::Index i = 0; i < r.size; ++i) r.data[i] = detail::read_f64(is);
  char extra;
  if (is.read(&extra, 1)) throw FormatError("trailing bytes after checkpoint payload");
  return params;
}

// ---------------------------------------------------------------------------
// N-best records: one JSON object per utterance per line. Deterministic
// fields only; wall-clock timings live in a separate file so reruns hash
// identically. The "tokens" field is the detokenized surface form (specials
// stripped); "finished" records whether eos was emitted.

struct NBestRecord {
  int id = 0;
  bool truncated = false;
  long amd_calls = 0, ar_calls = 0, ctc_extensions = 0;
  struct Hyp {
    std::vector<std::string> tokens;
    bool finished = false;
    double fused = 0, alpha_ctc = 0, alpha_ar = 0, alpha_amd = 0;
  };
  std::vector<Hyp> hyps;
};

inline NBestRecord make_record(int id, const DecodeResult& res, const Vocab& vocab) {
  NBestRecord rec;
  rec.id = id;
  rec.truncated = res.stats.truncated;
  rec.amd_calls = res.stats.amd_calls;
  rec.ar_calls = res.stats.ar_calls;
  rec.ctc_extensions = res.stats.ctc_extensions;
  for (const auto& e : res.nbest.entries) {
    NBestRecord::Hyp h;
    for (int t : e.hyp.tokens)
      if (!vocab.is_special(t)) h.tokens.push_back(vocab.tokens[size_t(t)]);
    h.finished = e.hyp.finished;
    h.fused = e.fused;
    h.alpha_ctc = e.hyp.alpha_ctc;
    h.alpha_ar = e.hyp.alpha_ar;
    h.alpha_amd = e.hyp.alpha_amd;
    rec.hyps.push_back(std::move(h));
  }
  return rec;
}

inline void save_nbest(const std::vector<NBestRecord>& records,
                       const std::filesystem::path& path) {
  auto os = detail::open_out(path, false);
  for (const auto& rec : records) {
    json j;
    j["id"] = rec.id;
    j["truncated"] = rec.truncated;
    j["amd_calls"] = rec.amd_calls;
    j["ar_calls"] = rec.ar_calls;
    j["ctc_extensions"] = rec.ctc_extensions;
    j["hyps"] = json::array();
    for (const auto& h : rec.hyps) {
      json jh;
      std::string joined;
      for (size_t i = 0; i < h.tokens.size(); ++i) {
        if (i) joined += ' ';
        joined += h.tokens[i];
      }
      jh["tokens"] = joined;
      jh["finished"] = h.finished;
      jh["fused"] = h.fused;
      jh["alpha_ctc"] = h.alpha_ctc;
      jh["alpha_ar"] = h.alpha_ar;
      jh["alpha_amd"] = h.alpha_amd;
      j["hyps"].push_back(std::move(jh));
    }
    os << j.dump() << '\n';
  }
}

inline std::vector<NBestRecord> load_nbest(const std::filesystem::path& path) {
  auto is = detail::open_in(path, false);
  std::vector<NBestRecord> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("bad n-best record on line " + std::to_string(line_no) + ": " +
                        e.what());
    }
    NBestRecord rec;
    try {
      rec.id = j.at("id").get<int>();
      rec.truncated = j.at("truncated").get<bool>();
      rec.amd_calls = j.at("amd_calls").get<long>();
      rec.ar_calls = j.at("ar_calls").get<long>();
      rec.ctc_extensions = j.at("ctc_extensions").get<long>();
      for (const auto& jh : j.at("hyps")) {
        NBestRecord::Hyp h;
        std::istringstream toks(jh.at("tokens").get<std::string>());
        std::string t;
        while (toks >> t) h.tokens.push_back(t);
        h.finished = jh.at("finished").get<bool>();
        h.fused = jh.at("fused").get<double>();
        h.alpha_ctc = jh.at("alpha_ctc").get<double>();
        h.alpha_ar = jh.at("alpha_ar").get<double>();
        h.alpha_amd = jh.at("alpha_amd").get<double>();
        rec.hyps.push_back(std::move(h));
      }
    } catch (const json::exception& e) {
      throw FormatError("bad n-best record on line " + std::to_string(line_no) + ": " +
                        e.what());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

// ---------------------------------------------------------------------------
// Corpus directory: vocab.txt, meta.json, per-split reference files and one
// feature file per utterance.

inline void save_corpus(const Corpus& c, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "feats");
  save_vocab(c.vocab, dir / "vocab.txt");
  json meta;
  meta["vocab_regular"] = c.spec.vocab;
  meta["feat_dim"] = c.spec.feat_dim;
  meta["frame_period_s"] = c.spec.frame_period_s;
  meta["noise_sigma"] = c.spec.noise_sigma;
  meta["seed"] = c.spec.seed;
  meta["len_range"] = {c.spec.len_lo, c.spec.len_hi};
  meta["frames_range"] = {c.spec.frames_lo, c.spec.frames_hi};
  meta["sizes"] = {c.spec.n_train, c.spec.n_dev, c.spec.n_test};
  detail::open_out(dir / "meta.json", false) << meta.dump(2) << '\n';
  const std::pair<const char*, const std::vector<Utterance>*> splits[] = {
      {"train", &c.train}, {"dev", &c.dev}, {"test", &c.test}};
  for (const auto& [name, utts] : splits) {
    save_refs(*utts, c.vocab, dir / (std::string(name) + ".refs.tsv"));
    for (const auto& u : *utts) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%s-%05d.amdf", name, u.id);
      save_features(u.enc.frames, dir / "feats" / buf);
    }
  }
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Corpus c;
  c.vocab = load_vocab(dir / "vocab.txt");
  json meta;
  try {
    detail::open_in(dir / "meta.json", false) >> meta;
    c.spec.vocab = meta.at("vocab_regular").get<int>();
    c.spec.feat_dim = meta.at("feat_dim").get<int>();
    c.spec.frame_period_s = meta.at("frame_period_s").get<double>();
    c.spec.noise_sigma = meta.at("noise_sigma").get<double>();
    c.spec.seed = meta.at("seed").get<uint64_t>();
    c.spec.len_lo = meta.at("len_range")[0].get<int>();
    c.spec.len_hi = meta.at("len_range")[1].get<int>();
    c.spec.frames_lo = meta.at("frames_range")[0].get<int>();
    c.spec.frames_hi = meta.at("frames_range")[1].get<int>();
    c.spec.n_train = meta.at("sizes")[0].get<int>();
    c.spec.n_dev = meta.at("sizes")[1].get<int>();
    c.spec.n_test = meta.at("sizes")[2].get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad corpus meta.json: ") + e.what());
  }
  const std::pair<const char*, std::vector<Utterance>*> splits[] = {
      {"train", &c.train}, {"dev", &c.dev}, {"test", &c.test}};
  for (const auto& [name, utts] : splits) {
    for (const auto& e : load_refs(dir / (std::string(name) + ".refs.tsv"))) {
      Utterance u;
      u.id = e.id;
      for (const auto& tok : e.tokens) {
        const auto it = std::find(c.vocab.tokens.begin(), c.vocab.tokens.end(), tok);
        if (it == c.vocab.tokens.end()) throw FormatError("reference token not in vocab: " + tok);
        u.ref.push_back(int(it - c.vocab.tokens.begin()));
      }
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%s-%05d.amdf", name, u.id);
      u.enc.frames = load_features(dir / "feats" / buf);
      u.enc.frame_period_s = c.spec.frame_period_s;
      utts->push_back(std::move(u));
    }
  }
  return c;
}

}  // namespace amdec
