#pragma once

// Run configuration: flat key=value text, '#' comments, blank lines ignored.
// Unknown keys are an error so typos do not silently fall back to defaults.
// Relative paths are resolved against the config file's directory.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "genrec/evaluation.hpp"
#include "genrec/model.hpp"
#include "genrec/tasks.hpp"

namespace genrec {

struct RunConfig {
  std::filesystem::path raw_data = "interactions.tsv";
  std::filesystem::path workdir = "work";
  std::size_t min_count = 5;

  GenRecConfig model;  // vocab/user/item sizes are filled from the data
  StageConfig pretrain = StageConfig::pretrain_defaults();
  StageConfig finetune = StageConfig::finetune_defaults();

  std::size_t beam_width = 20;
  std::vector<std::size_t> k_list{1, 5, 10};
  RankingMode ranking = RankingMode::Beam;
  std::size_t eval_threads = 1;
  std::uint64_t seed = 42;

  // Derived file locations inside workdir.
  std::filesystem::path splits_path() const { return workdir / "splits.tsv"; }
  std::filesystem::path vocab_path() const { return workdir / "vocab.txt"; }
  std::filesystem::path stats_path() const { return workdir / "stats.txt"; }
  std::filesystem::path loss_log_path() const { return workdir / "loss.log"; }
  std::filesystem::path checkpoint_path(Stage s) const {
    return workdir / (std::string(to_string(s)) + ".ckpt");
  }
  std::filesystem::path report_path(Phase p) const { return workdir / ("report_" + std::string(to_string(p)) + ".txt"); }

  // Applies one key=value setting; throws on unknown keys or bad values.
  void set(const std::string& key, const std::string& value, const std::filesystem::path& base = {}) {
    auto bad = [&](const char* why) { return Error("config: " + key + "=" + value + ": " + why); };
    auto to_size = [&]() -> std::size_t {
      std::size_t pos = 0;
      unsigned long long v = 0;
      try {
        if (!value.empty() && value[0] == '-') throw bad("expected a non-negative integer");
        v = std::stoull(value, &pos);
      } catch (const std::logic_error&) {
        throw bad("expected a non-negative integer");
      }
      if (pos != value.size()) throw bad("expected a non-negative integer");
      return std::size_t(v);
    };
    auto to_double = [&]() {
      std::size_t pos = 0;
      double v = 0;
      try {
        v = std::stod(value, &pos);
      } catch (const std::logic_error&) {
        throw bad("expected a number");
      }
      if (pos != value.size()) throw bad("expected a number");
      return v;
    };
    auto to_path = [&]() {
      std::filesystem::path p(value);
      return p.is_relative() && !base.empty() ? base / p : p;
    };
    auto stage_key = [&](StageConfig& s, const std::string& field) {
      if (field == "epochs") s.epochs = to_size();
      else if (field == "batch_size") s.batch_size = to_size();
      else if (field == "lr") s.base_lr = to_double();
      else if (field == "weight_decay") s.weight_decay = to_double();
      else if (field == "warmup_fraction") s.warmup_fraction = to_double();
      else if (field == "clip_norm") s.clip_norm = to_double();
      else return false;
      return true;
    };

    if (key == "raw_data") raw_data = to_path();
    else if (key == "workdir") workdir = to_path();
    else if (key == "min_count") min_count = to_size();
    else if (key == "d_model") model.d_model = to_size();
    else if (key == "num_encoder_layers") model.num_encoder_layers = to_size();
    else if (key == "num_decoder_layers") model.num_decoder_layers = to_size();
    else if (key == "num_heads") model.num_heads = to_size();
    else if (key == "ffn_dim") model.ffn_dim = to_size();
    else if (key == "max_length") model.max_length = to_size();
    else if (key == "dropout") model.dropout = to_double();
    else if (key == "encoder_positions") model.encoder_positions = parse_position_mode(value);
    else if (key == "beam_width") beam_width = to_size();
    else if (key == "eval_threads") eval_threads = to_size();
    else if (key == "seed") seed = to_size();
    else if (key == "ranking") {
      if (value == "beam") ranking = RankingMode::Beam;
      else if (value == "exhaustive") ranking = RankingMode::Exhaustive;
      else throw bad("expected beam or exhaustive");
    } else if (key == "k_list") {
      k_list.clear();
      std::stringstream ss(value);
      std::string part;
      while (std::getline(ss, part, ',')) {
        std::size_t pos = 0;
        unsigned long v = 0;
        try {
          v = std::stoul(part, &pos);
        } catch (const std::logic_error&) {
          pos = 0;
        }
        if (pos == 0 || pos != part.size() || v < 1) throw bad("expected comma-separated positive integers");
        k_list.push_back(v);
      }
      if (k_list.empty()) throw bad("empty list");
    } else if (key.starts_with("pretrain_") && stage_key(pretrain, key.substr(9))) {
    } else if (key.starts_with("finetune_") && stage_key(finetune, key.substr(9))) {
    } else {
      throw Error("config: unknown key '" + key + "'");
    }
  }

  static RunConfig parse(std::istream& in, const std::filesystem::path& base = {}) {
    RunConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(lineno, "expected key=value");
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t") - b + 1);
      };
      try {
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), base);
      } catch (const ParseError&) {
        throw;
      } catch (const Error& e) {
        throw ParseError(lineno, e.what());
      }
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read config '" + path.string() + "'");
    try {
      return parse(in, path.parent_path());
    } catch (const ParseError& e) {
      throw Error(path.string() + ": " + e.what());
    }
  }
};

}  // namespace genrec
