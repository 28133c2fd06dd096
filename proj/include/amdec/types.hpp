// amdec/types.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "amdec/common.hpp"

namespace amdec {

// ---------------------------------------------------------------------------
// Vocab: token inventory with reserved blank / sos / eos ids, shared by the
// CTC head and both attention decoders.

struct Vocab {
  std::vector<std::string> tokens;
  int blank_id = -1;
  int sos_id = -1;
  int eos_id = -1;

  int size() const { return int(tokens.size()); }

  bool is_special(int id) const {
    return id == blank_id || id == sos_id || id == eos_id;
  }

  void validate() const {
    const int v = size();
    if (v < 4) throw ConfigError("vocab needs at least one regular token plus blank/sos/eos");
    for (int id : {blank_id, sos_id, eos_id})
      if (id < 0 || id >= v) throw ConfigError("special token id out of range");
    if (blank_id == sos_id || blank_id == eos_id || sos_id == eos_id)
      throw ConfigError("blank/sos/eos ids must be distinct");
    std::set<std::string> seen(tokens.begin(), tokens.end());
    if (int(seen.size()) != v) throw ConfigError("token strings must be unique");
  }

  // Regular tokens tok-00..tok-NN followed by the three specials.
  static Vocab make_synthetic(int regular) {
    Vocab v;
    for (int i = 0; i < regular; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "tok-%02d", i);
      v.tokens.emplace_back(buf);
    }
    v.blank_id = regular;
    v.sos_id = regular + 1;
    v.eos_id = regular + 2;
    v.tokens.emplace_back("<blank>");
    v.tokens.emplace_back("<sos>");
    v.tokens.emplace_back("<eos>");
    v.validate();
    return v;
  }
};

// ---------------------------------------------------------------------------
// EncoderOutput: frame-synchronous feature matrix, T' rows x D columns.

struct EncoderOutput {
  Mat frames;                  // T' x D
  double frame_period_s = 0.0;

  Eigen::Index num_frames() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
  double audio_duration_s() const { return double(frames.rows()) * frame_period_s; }

  void validate() const {
    if (frames.rows() > 0 && frames.cols() < 1)
      throw ConfigError("encoder output needs at least one feature dimension");
    if (!frames.allFinite()) throw ConfigError("encoder output contains non-finite values");
    if (frame_period_s < 0.0) throw ConfigError("negative frame period");
  }
};

// ---------------------------------------------------------------------------
// Score fusion weights.

struct FusionWeights {
  double lambda1 = 0.3;  // CTC
  double lambda2 = 0.6;  // AR
  double lambda3 = 0.1;  // AMD

  void validate() const {
    for (double l : {lambda1, lambda2, lambda3})
      if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("fusion weights must be finite and >= 0");
    if (lambda1 + lambda2 + lambda3 <= 0.0)
      throw ConfigError("at least one fusion weight must be positive");
  }

  static FusionWeights baseline() { return {0.3, 0.7, 0.0}; }
};

struct TrainWeights {
  double gamma1 = 0.3;  // CTC loss
  double gamma2 = 0.7;  // AR loss

  void validate() const {
    if (!std::isfinite(gamma1) || !std::isfinite(gamma2) || gamma1 < 0 || gamma2 < 0 ||
        gamma1 + gamma2 <= 0)
      throw ConfigError("training loss weights must be finite, >= 0, and not both zero");
  }
};

// ---------------------------------------------------------------------------
// Block schedule specification. Spelled the way the result tables spell it:
// "4" is a fixed block size of 4, "1-20-4" decodes the first 20 slots with
// size-1 blocks and the rest with size-4 blocks. n_initial == 0 is Fixed.

struct BlockScheduleSpec {
  int n_initial = 0;
  int block = 1;

  bool fixed() const { return n_initial == 0; }

  void validate() const {
    if (block < 1) throw ConfigError("block size must be >= 1");
    if (n_initial < 0) throw ConfigError("initial monotonic slot count must be >= 0");
  }

  std::string str() const {
    if (fixed()) return std::to_string(block);
    return "1-" + std::to_string(n_initial) + "-" + std::to_string(block);
  }

  static BlockScheduleSpec parse(const std::string& s) {
    BlockScheduleSpec spec;
    const auto dash1 = s.find('-');
    if (dash1 == std::string::npos) {
      try {
        spec.block = std::stoi(s);
      } catch (const std::exception&) {
        throw ConfigError("bad schedule spec '" + s + "'");
      }
      spec.validate();
      return spec;
    }
    const auto dash2 = s.find('-', dash1 + 1);
    if (dash2 == std::string::npos) throw ConfigError("bad schedule spec '" + s + "'");
    try {
      if (std::stoi(s.substr(0, dash1)) != 1)
        throw ConfigError("mixed schedule spec must start with '1-'");
      spec.n_initial = std::stoi(s.substr(dash1 + 1, dash2 - dash1 - 1));
      spec.block = std::stoi(s.substr(dash2 + 1));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("bad schedule spec '" + s + "'");
    }
    spec.validate();
    return spec;
  }
};

// ---------------------------------------------------------------------------
// Search configuration. Defaults are the greedy-search settings
// (k_main=1, k1=2, k2=2) with 0.3:0.6:0.1 fusion weights.

struct SearchConfig {
  int k_main = 1;
  int k1 = 2;
  int k2 = 2;
  int l_max = 512;
  FusionWeights weights;
  BlockScheduleSpec schedule;
  bool length_norm = false;

  void validate() const {
    if (k_main < 1 || k1 < 1 || k2 < 1) throw ConfigError("beam widths must be >= 1");
    if (l_max < 1) throw ConfigError("l_max must be >= 1");
    weights.validate();
    schedule.validate();
  }
};

}  // namespace amdec
