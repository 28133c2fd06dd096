// amdec/eval.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "amdec/common.hpp"

namespace amdec {

// ---------------------------------------------------------------------------
// Levenshtein alignment with deterministic operation attribution: among
// minimum-edit alignments, the one with the fewest insertions+deletions wins
// (substitution preferred on ties).

struct EditOps {
  long sub = 0, del = 0, ins = 0;
  long total() const { return sub + del + ins; }
};

template <typename Seq>
EditOps edit_distance(const Seq& ref, const Seq& hyp) {
  const size_t n = ref.size(), m = hyp.size();
  struct Cell {
    long sub, del, ins;
    long total() const { return sub + del + ins; }
    long indel() const { return del + ins; }
  };
  auto better = [](const Cell& a, const Cell& b) {
    if (a.total() != b.total()) return a.total() < b.total();
    return a.indel() < b.indel();
  };
  std::vector<Cell> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = {0, 0, long(j)};
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = {0, long(i), 0};
    for (size_t j = 1; j <= m; ++j) {
      Cell diag = prev[j - 1];
      if (!(ref[i - 1] == hyp[j - 1])) ++diag.sub;
      Cell del = prev[j];
      ++del.del;
      Cell ins = cur[j - 1];
      ++ins.ins;
      Cell best = diag;
      if (better(del, best)) best = del;
      if (better(ins, best)) best = ins;
      cur[j] = best;
    }
    std::swap(prev, cur);
  }
  return {prev[m].sub, prev[m].del, prev[m].ins};
}

// ---------------------------------------------------------------------------
// Corpus-level scoring over parallel (reference, hypothesis-list) corpora.

struct UttScore {
  int id = 0;
  long n_ref = 0;
  EditOps ops;  // against the 1-best
  long oracle_errs = 0;
};

struct EvalSummary {
  std::vector<UttScore> utts;
  double wer_pct = 0.0;
  double oracle_wer_pct = 0.0;
  double lattice_density = 0.0;
};

// refs[i] is the reference for nbest[i]; each nbest entry is a list of
// hypothesis token sequences, best first.
template <typename Tok>
EvalSummary score_corpus(const std::vector<std::vector<Tok>>& refs,
                         const std::vector<std::vector<std::vector<Tok>>>& nbest,
                         const std::vector<int>* ids = nullptr) {
  if (refs.size() != nbest.size()) throw ConfigError("refs/nbest size mismatch");
  EvalSummary sum;
  long tot_ref = 0, tot_err = 0, tot_oracle = 0;
  std::size_t tot_distinct = 0;
  for (size_t i = 0; i < refs.size(); ++i) {
    if (nbest[i].empty()) throw ConfigError("empty n-best list for an utterance");
    UttScore us;
    us.id = ids ? (*ids)[i] : int(i);
    us.n_ref = long(refs[i].size());
    us.ops = edit_distance(refs[i], nbest[i].front());
    us.oracle_errs = us.ops.total();
    std::set<Tok> distinct;
    for (const auto& hyp : nbest[i]) {
      us.oracle_errs = std::min(us.oracle_errs, edit_distance(refs[i], hyp).total());
      distinct.insert(hyp.begin(), hyp.end());
    }
    tot_ref += us.n_ref;
    tot_err += us.ops.total();
    tot_oracle += us.oracle_errs;
    tot_distinct += distinct.size();
    sum.utts.push_back(std::move(us));
  }
  if (tot_ref == 0) throw ConfigError("reference corpus has zero tokens");
  sum.wer_pct = 100.0 * double(tot_err) / double(tot_ref);
  sum.oracle_wer_pct = 100.0 * double(tot_oracle) / double(tot_ref);
  // Distinct token types across each list, normalized by reference length.
  sum.lattice_density = double(tot_distinct) / double(tot_ref);
  return sum;
}

template <typename Tok>
double oracle_wer(const std::vector<std::vector<Tok>>& refs,
                  const std::vector<std::vector<std::vector<Tok>>>& nbest) {
  return score_corpus(refs, nbest).oracle_wer_pct;
}

template <typename Tok>
double lattice_density(const std::vector<std::vector<Tok>>& refs,
                       const std::vector<std::vector<std::vector<Tok>>>& nbest) {
  return score_corpus(refs, nbest).lattice_density;
}

// ---------------------------------------------------------------------------
// Matched-pairs segment-level significance test at alpha = 0.05. Each
// utterance is one segment; d_i = errA_i - errB_i, z = mean(d) over its
// standard error with the sample (n-1) deviation. All-zero differences give
// z = 0; zero deviation with nonzero mean is significant by convention
// (reported as +/-inf).

struct MapssweResult {
  double z = 0.0;
  bool significant = false;
};

inline MapssweResult mapsswe(std::span<const long> err_a, std::span<const long> err_b) {
  if (err_a.size() != err_b.size()) throw ConfigError("mismatched segment counts");
  const size_t n = err_a.size();
  if (n < 2) throw ConfigError("mapsswe needs at least two segments");
  double mean = 0.0;
  for (size_t i = 0; i < n; ++i) mean += double(err_a[i] - err_b[i]);
  mean /= double(n);
  double ss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = double(err_a[i] - err_b[i]) - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / double(n - 1));
  MapssweResult res;
  if (sd == 0.0) {
    if (mean == 0.0) {
      res.z = 0.0;
      res.significant = false;
    } else {
      res.z = mean > 0 ? kPosInf : kNegInf;
      res.significant = true;
    }
    return res;
  }
  res.z = mean / (sd / std::sqrt(double(n)));
  res.significant = std::abs(res.z) > 1.96;
  return res;
}

// ---------------------------------------------------------------------------
// Real-time factor and speedup.

inline double rtf(double decode_seconds, double audio_seconds) {
  if (audio_seconds <= 0) throw ConfigError("audio duration must be positive");
  return decode_seconds / audio_seconds;
}

inline double speedup(double rtf_baseline, double rtf_system) {
  if (rtf_system <= 0) throw ConfigError("rtf must be positive");
  return rtf_baseline / rtf_system;
}

// ---------------------------------------------------------------------------
// Report file: JSON with corpus metrics plus per-utterance error counts, the
// input to the significance test.

inline nlohmann::ordered_json report_to_json(const EvalSummary& sum) {
  nlohmann::ordered_json j;
  j["wer_pct"] = sum.wer_pct;
  j["oracle_wer_pct"] = sum.oracle_wer_pct;
  j["lattice_density"] = sum.lattice_density;
  j["per_utt"] = nlohmann::ordered_json::array();
  for (const auto& u : sum.utts) {
    nlohmann::ordered_json ju;
    ju["id"] = u.id;
    ju["n_ref"] = u.n_ref;
    ju["sub"] = u.ops.sub;
    ju["del"] = u.ops.del;
    ju["ins"] = u.ops.ins;
    ju["oracle_errs"] = u.oracle_errs;
    j["per_utt"].push_back(std::move(ju));
  }
  return j;
}

inline EvalSummary report_from_json(const nlohmann::ordered_json& j) {
  EvalSummary sum;
  try {
    sum.wer_pct = j.at("wer_pct").get<double>();
    sum.oracle_wer_pct = j.at("oracle_wer_pct").get<double>();
    sum.lattice_density = j.at("lattice_density").get<double>();
    for (const auto& ju : j.at("per_utt")) {
      UttScore u;
      u.id = ju.at("id").get<int>();
      u.n_ref = ju.at("n_ref").get<long>();
      u.ops.sub = ju.at("sub").get<long>();
      u.ops.del = ju.at("del").get<long>();
      u.ops.ins = ju.at("ins").get<long>();
      u.oracle_errs = ju.at("oracle_errs").get<long>();
      sum.utts.push_back(u);
    }
  } catch (const nlohmann::ordered_json::exception& e) {
    throw FormatError(std::string("bad eval report: ") + e.what());
  }
  return sum;
}

// ---------------------------------------------------------------------------
// WER vs RTF trade-off curve as a standalone SVG.

struct TradeoffPoint {
  std::string label;
  double rtf = 0.0;
  double wer_pct = 0.0;
};

inline void write_tradeoff_svg(const std::vector<TradeoffPoint>& points,
                               const std::filesystem::path& path) {
  if (points.empty()) throw ConfigError("no points for trade-off plot");
  const int w = 640, h = 440, ml = 70, mr = 30, mt = 30, mb = 60;
  double xmin = kPosInf, xmax = -kPosInf, ymin = kPosInf, ymax = -kPosInf;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.rtf);
    xmax = std::max(xmax, p.rtf);
    ymin = std::min(ymin, p.wer_pct);
    ymax = std::max(ymax, p.wer_pct);
  }
  if (xmax == xmin) xmax = xmin + 1e-6;
  if (ymax == ymin) ymax = ymin + 1e-6;
  const double xpad = 0.08 * (xmax - xmin), ypad = 0.12 * (ymax - ymin);
  xmin -= xpad;
  xmax += xpad;
  ymin -= ypad;
  ymax += ypad;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };

  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h
     << "'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='"
     << h - mb << "' stroke='black'/>\n";
  os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
     << "' stroke='black'/>\n";
  os << "<text x='" << (ml + w - mr) / 2 << "' y='" << h - 15
     << "' text-anchor='middle' font-size='14'>RTF</text>\n";
  os << "<text x='18' y='" << (mt + h - mb) / 2
     << "' text-anchor='middle' font-size='14' transform='rotate(-90 18 "
     << (mt + h - mb) / 2 << ")'>WER (%)</text>\n";

  std::vector<TradeoffPoint> sorted = points;
  std::sort(sorted.begin(), sorted.end(),
            [](const TradeoffPoint& a, const TradeoffPoint& b) { return a.rtf < b.rtf; });
  os << "<polyline fill='none' stroke='#3465a4' stroke-width='1.5' points='";
  for (const auto& p : sorted) os << px(p.rtf) << ',' << py(p.wer_pct) << ' ';
  os << "'/>\n";
  for (const auto& p : sorted) {
    os << "<circle cx='" << px(p.rtf) << "' cy='" << py(p.wer_pct)
       << "' r='4' fill='#cc0000'/>\n";
    os << "<text x='" << px(p.rtf) + 6 << "' y='" << py(p.wer_pct) - 6
       << "' font-size='12'>" << p.label << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace amdec
