// tools/amdec.cpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <thread>

#include "amdec/data.hpp"
#include "amdec/eval.hpp"
#include "amdec/search.hpp"
#include "amdec/train.hpp"

namespace fs = std::filesystem;
using amdec::json;

namespace {

// Exit codes: 0 ok, 2 config, 3 io/missing file, 4 format, 5 diverged.
enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kFormat = 4, kDiverged = 5 };

json default_config() {
  json cfg;
  cfg["seed"] = 7;
  cfg["workers"] = 1;
  cfg["gen"] = {{"vocab", 16},         {"len_lo", 26},           {"len_hi", 40},
                {"frames_lo", 2},      {"frames_hi", 2},         {"feat_dim", 8},
                {"noise_sigma", 0.15}, {"frame_period_s", 0.04}, {"train", 300},
                {"dev", 40},           {"test", 200}};
  cfg["model"] = {{"d_model", 16}, {"n_layers", 2}, {"n_heads", 2},
                  {"d_ff", 64},    {"rank", 4},     {"max_len", 160}};
  cfg["train"] = {{"gamma1", 0.3},       {"gamma2", 0.7},       {"lr", 0.0025},
                  {"stage1_epochs", 60}, {"stage2_epochs", 12}, {"sampling", "uni"}};
  cfg["decode"] = {{"decoder", "tripartite"}, {"schedule", "1"},
                   {"k_main", 1},             {"k1", 2},
                   {"k2", 2},                 {"l_max", 64},
                   {"weights", "0.3:0.6:0.1"}, {"length_norm", false},
                   {"split", "test"},          {"limit", 0}};
  cfg["bench"] = {{"blocks", json::array({1, 2, 4, 8, 16})},
                  {"schedules", json::array()},
                  {"split", "test"},
                  {"limit", 0}};
  return cfg;
}

void merge_into(json& base, const json& overlay) {
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge_into(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

json load_config(const std::string& path) {
  json cfg = default_config();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw amdec::IoError("cannot open config file: " + path);
    json user;
    try {
      is >> user;
    } catch (const json::exception& e) {
      throw amdec::FormatError(std::string("bad config json: ") + e.what());
    }
    merge_into(cfg, user);
  }
  return cfg;
}

fs::path resolve_out(const std::string& out) {
  if (!out.empty()) return out;
  if (const char* root = std::getenv("AMDEC_OUT_ROOT")) return fs::path(root);
  return fs::path("amdec-out");
}

// Single-file atomic write: temp file in the same directory, then rename.
template <typename WriteFn>
void atomic_file(const fs::path& path, WriteFn&& write_fn) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  write_fn(tmp);
  fs::rename(tmp, path);
}

void echo_config(const json& cfg, const fs::path& dir) {
  atomic_file(dir / "effective_config.json", [&](const fs::path& p) {
    std::ofstream os(p);
    os << cfg.dump(2) << '\n';
  });
}

amdec::FusionWeights parse_weights(const std::string& s) {
  double vals[3] = {0, 0, 0};
  int n = 0;
  size_t pos = 0;
  try {
    while (pos <= s.size() && n < 3) {
      const size_t colon = s.find(':', pos);
      const std::string part =
          s.substr(pos, colon == std::string::npos ? std::string::npos : colon - pos);
      vals[n++] = std::stod(part);
      if (colon == std::string::npos) break;
      pos = colon + 1;
    }
  } catch (const std::exception&) {
    throw amdec::ConfigError("bad weights spec '" + s + "' (expected l1:l2 or l1:l2:l3)");
  }
  if (n < 2) throw amdec::ConfigError("bad weights spec '" + s + "'");
  amdec::FusionWeights w{vals[0], vals[1], vals[2]};
  w.validate();
  return w;
}

amdec::SyntheticTaskSpec spec_from(const json& cfg) {
  const json& g = cfg.at("gen");
  amdec::SyntheticTaskSpec spec;
  spec.vocab = g.at("vocab").get<int>();
  spec.len_lo = g.at("len_lo").get<int>();
  spec.len_hi = g.at("len_hi").get<int>();
  spec.frames_lo = g.at("frames_lo").get<int>();
  spec.frames_hi = g.at("frames_hi").get<int>();
  spec.feat_dim = g.at("feat_dim").get<int>();
  spec.noise_sigma = g.at("noise_sigma").get<double>();
  spec.frame_period_s = g.at("frame_period_s").get<double>();
  spec.n_train = g.at("train").get<int>();
  spec.n_dev = g.at("dev").get<int>();
  spec.n_test = g.at("test").get<int>();
  spec.seed = cfg.at("seed").get<uint64_t>();
  spec.validate();
  return spec;
}

amdec::SearchConfig search_from(const json& cfg) {
  const json& d = cfg.at("decode");
  amdec::SearchConfig sc;
  sc.k_main = d.at("k_main").get<int>();
  sc.k1 = d.at("k1").get<int>();
  sc.k2 = d.at("k2").get<int>();
  sc.l_max = d.at("l_max").get<int>();
  sc.weights = parse_weights(d.at("weights").get<std::string>());
  sc.schedule = amdec::BlockScheduleSpec::parse(d.at("schedule").get<std::string>());
  sc.length_norm = d.at("length_norm").get<bool>();
  sc.validate();
  return sc;
}

const std::vector<amdec::Utterance>& split_of(const amdec::Corpus& corpus,
                                              const std::string& name) {
  if (name == "train") return corpus.train;
  if (name == "dev") return corpus.dev;
  if (name == "test") return corpus.test;
  throw amdec::ConfigError("unknown split '" + name + "'");
}

struct DecodeOutputs {
  std::vector<amdec::NBestRecord> records;
  std::vector<double> wall_seconds;
  std::vector<double> audio_seconds;
  long total_amd = 0, total_ar = 0, total_ctc = 0;
  double total_wall = 0, total_audio = 0;
};

// Utterance-parallel decode with a deterministic merge by utterance index.
DecodeOutputs run_decode(const std::vector<amdec::Utterance>& utts,
                         const amdec::ToyDecoderParams& params, const amdec::Vocab& vocab,
                         const amdec::SearchConfig& cfg, bool baseline, int workers,
                         int limit) {
  const size_t n = (limit > 0 && size_t(limit) < utts.size()) ? size_t(limit) : utts.size();
  std::vector<amdec::DecodeResult> results(n);
  workers = std::max(1, workers);
  auto worker_fn = [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      const amdec::CtcPosteriors post = amdec::ctc_posteriors(params, utts[i].enc);
      results[i] = baseline
                       ? amdec::decode_baseline(utts[i].enc, post, params, vocab, cfg)
                       : amdec::decode_tripartite(utts[i].enc, post, params, vocab, cfg);
    }
  };
  if (workers == 1) {
    worker_fn(0, n);
  } else {
    std::vector<std::thread> threads;
    const size_t chunk = (n + size_t(workers) - 1) / size_t(workers);
    for (int w = 0; w < workers; ++w) {
      const size_t begin = size_t(w) * chunk;
      const size_t end = std::min(n, begin + chunk);
      if (begin >= end) break;
      threads.emplace_back(worker_fn, begin, end);
    }
    for (auto& t : threads) t.join();
  }
  DecodeOutputs out;
  for (size_t i = 0; i < n; ++i) {
    out.records.push_back(amdec::make_record(utts[i].id, results[i], vocab));
    out.wall_seconds.push_back(results[i].stats.wall_seconds);
    out.audio_seconds.push_back(utts[i].enc.audio_duration_s());
    out.total_amd += results[i].stats.amd_calls;
    out.total_ar += results[i].stats.ar_calls;
    out.total_ctc += results[i].stats.ctc_extensions;
    out.total_wall += results[i].stats.wall_seconds;
    out.total_audio += utts[i].enc.audio_duration_s();
  }
  return out;
}

void write_timing(const DecodeOutputs& out, const std::vector<amdec::Utterance>& utts,
                  const fs::path& path) {
  atomic_file(path, [&](const fs::path& p) {
    std::ofstream os(p);
    os << "id\twall_seconds\taudio_seconds\n";
    for (size_t i = 0; i < out.records.size(); ++i)
      os << utts[i].id << '\t' << out.wall_seconds[i] << '\t' << out.audio_seconds[i]
         << '\n';
    os << "total\t" << out.total_wall << '\t' << out.total_audio << '\n';
  });
}

amdec::EvalSummary summarize(const std::vector<amdec::NBestRecord>& records,
                             const std::vector<amdec::RefEntry>& refs) {
  std::map<int, const std::vector<std::string>*> by_id;
  for (const auto& r : refs) by_id[r.id] = &r.tokens;
  std::vector<std::vector<std::string>> ref_seqs;
  std::vector<std::vector<std::vector<std::string>>> nbest;
  std::vector<int> ids;
  for (const auto& rec : records) {
    const auto it = by_id.find(rec.id);
    if (it == by_id.end())
      throw amdec::ConfigError("no reference for utterance " + std::to_string(rec.id));
    if (rec.hyps.empty())
      throw amdec::ConfigError("empty n-best for utterance " + std::to_string(rec.id));
    ref_seqs.push_back(*it->second);
    std::vector<std::vector<std::string>> lists;
    for (const auto& h : rec.hyps) lists.push_back(h.tokens);
    nbest.push_back(std::move(lists));
    ids.push_back(rec.id);
  }
  return amdec::score_corpus(ref_seqs, nbest, &ids);
}

// ---------------------------------------------------------------------------

int cmd_gen(const json& cfg, const std::string& out) {
  const fs::path dir = resolve_out(out);
  const amdec::SyntheticTaskSpec spec = spec_from(cfg);
  const amdec::Corpus corpus = amdec::generate(spec);
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  amdec::save_corpus(corpus, tmp);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
  echo_config(cfg, dir);
  std::cout << "corpus written to " << dir.string() << " (train " << corpus.train.size()
            << ", dev " << corpus.dev.size() << ", test " << corpus.test.size() << ")\n";
  return kOk;
}

int cmd_train(const json& cfg, const std::string& corpus_dir, const std::string& out) {
  const fs::path dir = resolve_out(out);
  fs::create_directories(dir);
  const amdec::Corpus corpus = amdec::load_corpus(corpus_dir);
  const json& m = cfg.at("model");
  amdec::ModelDims dims;
  dims.d_model = m.at("d_model").get<int>();
  dims.n_layers = m.at("n_layers").get<int>();
  dims.n_heads = m.at("n_heads").get<int>();
  dims.d_ff = m.at("d_ff").get<int>();
  dims.rank = m.at("rank").get<int>();
  dims.max_len = m.at("max_len").get<int>();
  dims.vocab = corpus.vocab.size();
  dims.enc_dim = corpus.spec.feat_dim;
  dims.validate();

  const json& t = cfg.at("train");
  amdec::TrainConfig tcfg;
  tcfg.loss_weights = {t.at("gamma1").get<double>(), t.at("gamma2").get<double>()};
  tcfg.adam.lr = t.at("lr").get<double>();
  tcfg.stage1_epochs = t.at("stage1_epochs").get<int>();
  tcfg.stage2_epochs = t.at("stage2_epochs").get<int>();
  const std::string sampling = t.at("sampling").get<std::string>();
  if (sampling == "uni")
    tcfg.sampling = amdec::BlockSampling::Strategy::kUni;
  else if (sampling == "var")
    tcfg.sampling = amdec::BlockSampling::Strategy::kVar;
  else
    throw amdec::ConfigError("sampling must be 'uni' or 'var'");
  tcfg.seed = cfg.at("seed").get<uint64_t>();
  tcfg.validate();

  amdec::ToyDecoderParams params = amdec::ToyDecoderParams::init(dims, tcfg.seed);
  const amdec::TrainTrace trace = amdec::train(params, corpus.train, corpus.vocab, tcfg);

  atomic_file(dir / "checkpoint.amdp",
              [&](const fs::path& p) { amdec::save_checkpoint(params, p); });
  atomic_file(dir / "loss_trace.tsv", [&](const fs::path& p) {
    std::ofstream os(p);
    os << "stage\tstep\tloss\n";
    for (const auto& s : trace.stage1) os << "1\t" << s.step << '\t' << s.loss << '\n';
    for (const auto& s : trace.stage2) os << "2\t" << s.step << '\t' << s.loss << '\n';
  });
  echo_config(cfg, dir);
  std::cout << "checkpoint written to " << (dir / "checkpoint.amdp").string() << "\n";
  if (!trace.stage1.empty())
    std::cout << "stage1 loss " << trace.stage1.front().loss << " -> "
              << trace.stage1.back().loss << "\n";
  if (!trace.stage2.empty())
    std::cout << "stage2 loss " << trace.stage2.front().loss << " -> "
              << trace.stage2.back().loss << "\n";
  return kOk;
}

int cmd_decode(const json& cfg, const std::string& corpus_dir, const std::string& model,
               const std::string& out) {
  const fs::path dir = resolve_out(out);
  fs::create_directories(dir);
  const amdec::Corpus corpus = amdec::load_corpus(corpus_dir);
  const amdec::ToyDecoderParams params = amdec::load_checkpoint(model);
  if (params.dims.vocab != corpus.vocab.size())
    throw amdec::ConfigError("checkpoint vocab does not match corpus vocab");
  const amdec::SearchConfig sc = search_from(cfg);
  const std::string decoder = cfg.at("decode").at("decoder").get<std::string>();
  if (decoder != "baseline" && decoder != "tripartite")
    throw amdec::ConfigError("decoder must be 'baseline' or 'tripartite'");
  const bool baseline = decoder == "baseline";
  const auto& utts = split_of(corpus, cfg.at("decode").at("split").get<std::string>());
  const int workers = cfg.at("workers").get<int>();
  const int limit = cfg.at("decode").at("limit").get<int>();

  const DecodeOutputs outs =
      run_decode(utts, params, corpus.vocab, sc, baseline, workers, limit);
  atomic_file(dir / "nbest.jsonl",
              [&](const fs::path& p) { amdec::save_nbest(outs.records, p); });
  write_timing(outs, utts, dir / "timing.tsv");
  echo_config(cfg, dir);
  std::cout << "decoded " << outs.records.size() << " utterances ("
            << (baseline ? "baseline" : "tripartite") << ", schedule "
            << sc.schedule.str() << ")\n";
  std::cout << "calls: amd " << outs.total_amd << ", ar " << outs.total_ar
            << ", ctc extensions " << outs.total_ctc << "\n";
  if (outs.total_audio > 0)
    std::cout << "rtf " << amdec::rtf(outs.total_wall, outs.total_audio) << "\n";
  return kOk;
}

int cmd_bench(const json& cfg, const std::string& corpus_dir, const std::string& model,
              const std::string& out) {
  const fs::path dir = resolve_out(out);
  fs::create_directories(dir);
  const amdec::Corpus corpus = amdec::load_corpus(corpus_dir);
  const amdec::ToyDecoderParams params = amdec::load_checkpoint(model);
  const json& b = cfg.at("bench");
  const auto& utts = split_of(corpus, b.at("split").get<std::string>());
  const int workers = cfg.at("workers").get<int>();
  const int limit = b.at("limit").get<int>();
  const auto refs = amdec::load_refs(
      fs::path(corpus_dir) / (b.at("split").get<std::string>() + ".refs.tsv"));

  struct Row {
    std::string label;
    double wer = 0, rtf_val = 0;
    long amd = 0, ar = 0;
  };
  std::vector<Row> rows;

  amdec::SearchConfig sc = search_from(cfg);
  std::vector<std::string> schedules;
  for (const auto& blk : b.at("blocks")) schedules.push_back(std::to_string(blk.get<int>()));
  for (const auto& s : b.at("schedules")) schedules.push_back(s.get<std::string>());

  // CTC + AR baseline reference row.
  {
    amdec::SearchConfig bc = sc;
    bc.weights = amdec::FusionWeights::baseline();
    const DecodeOutputs outs =
        run_decode(utts, params, corpus.vocab, bc, true, workers, limit);
    Row row;
    row.label = "baseline";
    row.wer = summarize(outs.records, refs).wer_pct;
    row.rtf_val = amdec::rtf(outs.total_wall, outs.total_audio);
    row.ar = outs.total_ar;
    rows.push_back(row);
  }
  for (const std::string& sched : schedules) {
    amdec::SearchConfig tc = sc;
    tc.schedule = amdec::BlockScheduleSpec::parse(sched);
    const DecodeOutputs outs =
        run_decode(utts, params, corpus.vocab, tc, false, workers, limit);
    Row row;
    row.label = sched;
    row.wer = summarize(outs.records, refs).wer_pct;
    row.rtf_val = amdec::rtf(outs.total_wall, outs.total_audio);
    row.amd = outs.total_amd;
    row.ar = outs.total_ar;
    rows.push_back(row);
  }

  // Deterministic table (WER, call counts) apart from the timing table.
  atomic_file(dir / "bench_calls.tsv", [&](const fs::path& p) {
    std::ofstream os(p);
    os << "schedule\twer_pct\tamd_calls\tar_calls\n";
    for (const auto& r : rows)
      os << r.label << '\t' << r.wer << '\t' << r.amd << '\t' << r.ar << '\n';
  });
  const double base_rtf = rows.front().rtf_val;
  atomic_file(dir / "bench_rtf.tsv", [&](const fs::path& p) {
    std::ofstream os(p);
    os << "schedule\trtf\tspeedup_vs_baseline\n";
    for (const auto& r : rows)
      os << r.label << '\t' << r.rtf_val << '\t' << amdec::speedup(base_rtf, r.rtf_val)
         << '\n';
  });
  std::vector<amdec::TradeoffPoint> points;
  for (const auto& r : rows) points.push_back({r.label, r.rtf_val, r.wer});
  atomic_file(dir / "tradeoff.svg",
              [&](const fs::path& p) { amdec::write_tradeoff_svg(points, p); });
  echo_config(cfg, dir);
  for (const auto& r : rows)
    std::cout << r.label << ": wer " << r.wer << "%, rtf " << r.rtf_val << ", speedup "
              << amdec::speedup(base_rtf, r.rtf_val) << ", amd calls " << r.amd << "\n";
  return kOk;
}

int cmd_analyze(const std::string& nbest_path, const std::string& refs_path,
                const std::string& out) {
  const auto records = amdec::load_nbest(nbest_path);
  const auto refs = amdec::load_refs(refs_path);
  const amdec::EvalSummary sum = summarize(records, refs);
  const json j = amdec::report_to_json(sum);
  if (!out.empty()) {
    atomic_file(out, [&](const fs::path& p) {
      std::ofstream os(p);
      os << j.dump(2) << '\n';
    });
  }
  std::cout << "wer " << sum.wer_pct << "%\noracle wer " << sum.oracle_wer_pct
            << "%\nlattice density " << sum.lattice_density << "\n";
  return kOk;
}

int cmd_sig(const std::string& report_a, const std::string& report_b,
            const std::string& out) {
  auto load = [](const std::string& path) {
    std::ifstream is(path);
    if (!is) throw amdec::IoError("cannot open report: " + path);
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw amdec::FormatError(std::string("bad report json: ") + e.what());
    }
    return amdec::report_from_json(j);
  };
  const amdec::EvalSummary a = load(report_a);
  const amdec::EvalSummary b = load(report_b);
  if (a.utts.size() != b.utts.size())
    throw amdec::ConfigError("reports cover different segment counts");
  std::vector<long> err_a, err_b;
  for (size_t i = 0; i < a.utts.size(); ++i) {
    if (a.utts[i].id != b.utts[i].id)
      throw amdec::ConfigError("reports cover different utterances");
    err_a.push_back(a.utts[i].ops.total());
    err_b.push_back(b.utts[i].ops.total());
  }
  const amdec::MapssweResult res = amdec::mapsswe(err_a, err_b);
  std::cout << "z = " << res.z << "\n"
            << (res.significant ? "significant at alpha=0.05"
                                : "not significant at alpha=0.05")
            << "\n";
  if (!out.empty()) {
    atomic_file(out, [&](const fs::path& p) {
      std::ofstream os(p);
      json j;
      j["z"] = res.z;
      j["significant_at_0.05"] = res.significant;
      os << j.dump(2) << '\n';
    });
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-masked tripartite decoding engine"};
  app.require_subcommand(1);

  std::string config_path, out, corpus_dir, model_path;
  std::string nbest_path, refs_path, report_a, report_b;
  int seed = -1, workers = -1;
  std::string schedule, weights, decoder, split;
  int k_main = -1, k1 = -1, k2 = -1, l_max = -1, limit = -1;

  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "global seed override");
  app.add_option("--workers", workers, "decode worker threads");

  auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
  gen->add_option("--out", out, "output corpus directory")->required();

  auto* train = app.add_subcommand("train", "staged training: CTC+AR, then AMD deltas");
  train->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train->add_option("--out", out, "output directory")->required();

  auto* decode = app.add_subcommand("decode", "decode a corpus split");
  decode->add_option("--corpus", corpus_dir, "corpus directory")->required();
  decode->add_option("--model", model_path, "checkpoint file")->required();
  decode->add_option("--out", out, "output directory")->required();
  decode->add_option("--decoder", decoder, "baseline | tripartite");
  decode->add_option("--schedule", schedule, "block schedule, e.g. 4 or 1-20-4");
  decode->add_option("--kmain", k_main, "main beam width");
  decode->add_option("--k1", k1, "per-slot candidate beam");
  decode->add_option("--k2", k2, "in-block hypothesis beam");
  decode->add_option("--lmax", l_max, "maximum hypothesis length");
  decode->add_option("--weights", weights, "fusion weights l1:l2:l3");
  decode->add_option("--split", split, "train | dev | test");
  decode->add_option("--limit", limit, "decode only the first N utterances");

  auto* bench = app.add_subcommand("bench", "sweep block sizes, report WER/RTF/calls");
  bench->add_option("--corpus", corpus_dir, "corpus directory")->required();
  bench->add_option("--model", model_path, "checkpoint file")->required();
  bench->add_option("--out", out, "output directory")->required();
  bench->add_option("--split", split, "train | dev | test");
  bench->add_option("--limit", limit, "bench only the first N utterances");

  auto* analyze = app.add_subcommand("analyze", "score an n-best file against references");
  analyze->add_option("--nbest", nbest_path, "n-best jsonl file")->required();
  analyze->add_option("--refs", refs_path, "reference tsv file")->required();
  analyze->add_option("--out", out, "report json output path");

  auto* sig = app.add_subcommand("sig", "matched-pairs significance test of two reports");
  sig->add_option("--report-a", report_a, "report json of system A")->required();
  sig->add_option("--report-b", report_b, "report json of system B")->required();
  sig->add_option("--out", out, "verdict json output path");

  CLI11_PARSE(app, argc, argv);

  try {
    json cfg = load_config(config_path);
    if (seed >= 0) cfg["seed"] = seed;
    if (workers >= 0) cfg["workers"] = workers;
    if (!schedule.empty()) cfg["decode"]["schedule"] = schedule;
    if (!weights.empty()) cfg["decode"]["weights"] = weights;
    if (!decoder.empty()) cfg["decode"]["decoder"] = decoder;
    if (!split.empty()) {
      cfg["decode"]["split"] = split;
      cfg["bench"]["split"] = split;
    }
    if (k_main >= 0) cfg["decode"]["k_main"] = k_main;
    if (k1 >= 0) cfg["decode"]["k1"] = k1;
    if (k2 >= 0) cfg["decode"]["k2"] = k2;
    if (l_max >= 0) cfg["decode"]["l_max"] = l_max;
    if (limit >= 0) {
      cfg["decode"]["limit"] = limit;
      cfg["bench"]["limit"] = limit;
    }

    if (gen->parsed()) return cmd_gen(cfg, out);
    if (train->parsed()) return cmd_train(cfg, corpus_dir, out);
    if (decode->parsed()) return cmd_decode(cfg, corpus_dir, model_path, out);
    if (bench->parsed()) return cmd_bench(cfg, corpus_dir, model_path, out);
    if (analyze->parsed()) return cmd_analyze(nbest_path, refs_path, out);
    if (sig->parsed()) return cmd_sig(report_a, report_b, out);
  } catch (const amdec::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const amdec::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kFormat;
  } catch (const amdec::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const amdec::DivergedError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOk;
}
