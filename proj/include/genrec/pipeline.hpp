#pragma once

// The five pipeline commands. Each returns key=value status fields for the
// CLI's final line and throws genrec::Error on failure.
//
// Files under workdir:
//   splits.tsv  vocab.txt  stats.txt  loss.log
//   pretrain.ckpt  finetune.ckpt  report_<phase>.txt

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "genrec/checkpoint.hpp"
#include "genrec/config.hpp"
#include "genrec/corpus.hpp"
#include "genrec/decoding.hpp"
#include "genrec/evaluation.hpp"
#include "genrec/tasks.hpp"
#include "genrec/tokenizer.hpp"

namespace genrec {

using StatusFields = std::vector<std::pair<std::string, std::string>>;

struct CommandOptions {
  std::optional<std::string> from;        // finetune: initial checkpoint
  std::optional<std::string> checkpoint;  // evaluate/recommend: weights to use
  std::optional<std::string> out;         // pretrain/finetune: output checkpoint
  Phase phase = Phase::Test;
  std::optional<std::string> user;
};

namespace detail {

inline std::ifstream open_in(const std::filesystem::path& p, const char* what) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(std::string("cannot read ") + what + " '" + p.string() + "' (run preprocess first?)");
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& p, std::ios::openmode mode = std::ios::trunc) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::out | mode);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  return out;
}

template <class F>
auto with_file_context(const std::filesystem::path& p, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(p.string() + ": " + e.what());
  }
}

}  // namespace detail

// Preprocessed data plus the tokenizer built on it.
struct Dataset {
  std::vector<corpus::SplitSequence> splits;
  Tokenizer tokenizer;
  std::string vocab_hash;

  GenRecConfig model_config(GenRecConfig base) const {
    base.vocab_size = tokenizer.vocab().size();
    base.num_users = tokenizer.catalog().num_users();
    base.num_items = tokenizer.catalog().num_items();
    return base;
  }
};

inline Dataset load_dataset(const RunConfig& cfg) {
  auto split_in = detail::open_in(cfg.splits_path(), "split file");
  auto splits = detail::with_file_context(cfg.splits_path(), [&] { return corpus::read_splits(split_in); });
  if (splits.empty()) throw Error(cfg.splits_path().string() + ": no users");
  auto vocab_in = detail::open_in(cfg.vocab_path(), "vocabulary file");
  auto vocab = detail::with_file_context(cfg.vocab_path(), [&] { return Vocab::load(vocab_in); });
  corpus::Catalog catalog(splits);
  if (!(Vocab::build(catalog) == vocab)) {
    throw Error(cfg.vocab_path().string() + ": vocabulary does not match " + cfg.splits_path().string());
  }
  auto hash = vocab_hash(vocab);
  return Dataset{std::move(splits), Tokenizer(std::move(catalog), std::move(vocab), cfg.model.max_length), hash};
}

// A checkpoint must have been trained on this vocabulary.
inline LoadedCheckpoint load_compatible(const std::string& path, const Dataset& data) {
  auto ck = load_checkpoint_file(path);
  if (ck.info.vocab_hash != data.vocab_hash) {
    throw Error(path + ": vocabulary hash " + ck.info.vocab_hash + " does not match the current data (" +
                data.vocab_hash + ")");
  }
  const auto& c = ck.info.config;
  if (c.num_users != data.tokenizer.catalog().num_users() || c.num_items != data.tokenizer.catalog().num_items()) {
    throw Error(path + ": user/item table sizes do not match the current data");
  }
  return ck;
}

inline StatusFields cmd_preprocess(const RunConfig& cfg, std::ostream& log = std::cerr) {
  auto raw_in = detail::open_in(cfg.raw_data, "raw data");
  auto interactions = detail::with_file_context(cfg.raw_data, [&] { return corpus::ingest(raw_in); });
  auto sequences = corpus::core_filter(corpus::build_sequences(interactions), cfg.min_count);
  if (sequences.empty()) throw Error("preprocess: no users survive the " + std::to_string(cfg.min_count) + "-core filter");
  const auto splits = corpus::leave_one_out(sequences);
  const corpus::Catalog catalog(splits);
  const auto vocab = Vocab::build(catalog);
  const auto st = corpus::stats(sequences);

  {
    auto out = detail::open_out(cfg.splits_path());
    corpus::write_splits(out, splits);
  }
  {
    auto out = detail::open_out(cfg.vocab_path());
    vocab.save(out);
  }
  {
    auto out = detail::open_out(cfg.stats_path());
    corpus::write_stats(out, st);
  }
  corpus::write_stats(log, st);
  return {{"raw_interactions", std::to_string(interactions.size())},
          {"users", std::to_string(st.num_users)},
          {"items", std::to_string(st.num_items)},
          {"interactions", std::to_string(st.num_interactions)},
          {"vocab_size", std::to_string(vocab.size())},
          {"splits", cfg.splits_path().string()}};
}

namespace detail {

inline StatusFields train_and_save(const RunConfig& cfg, const Dataset& data, GenRecModel<float>& model, Stage stage,
                                   const CommandOptions& opts, std::ostream& log) {
  StageConfig sc = stage == Stage::Pretrain ? cfg.pretrain : cfg.finetune;
  sc.stage = stage;
  sc.seed = cfg.seed + (stage == Stage::Pretrain ? 1 : 2);
  auto loss_out = open_out(cfg.loss_log_path(), std::ios::app);
  auto result = run_stage(model, data.tokenizer, data.splits, sc, [&](const EpochLog& e) {
    write_loss_line(loss_out, e);
    loss_out.flush();
    write_loss_line(log, e);
  });
  const std::filesystem::path path = opts.out ? std::filesystem::path(*opts.out) : cfg.checkpoint_path(stage);
  {
    auto out = open_out(path);
    save_checkpoint(out, model, {model.config(), data.vocab_hash, to_string(stage), sc.epochs});
  }
  char loss[32];
  std::snprintf(loss, sizeof loss, "%.6f", result.epochs.back().mean_loss);
  return {{"checkpoint", path.string()},
          {"epochs", std::to_string(sc.epochs)},
          {"steps", std::to_string(result.steps)},
          {"skipped_users", std::to_string(result.skipped_users)},
          {"final_loss", loss}};
}

}  // namespace detail

inline StatusFields cmd_pretrain(const RunConfig& cfg, const CommandOptions& opts = {}, std::ostream& log = std::cerr) {
  const auto data = load_dataset(cfg);
  GenRecModel<float> model(data.model_config(cfg.model), cfg.seed);
  return detail::train_and_save(cfg, data, model, Stage::Pretrain, opts, log);
}

// Finetunes from `opts.from` if given, otherwise from a fresh initialization.
inline StatusFields cmd_finetune(const RunConfig& cfg, const CommandOptions& opts = {}, std::ostream& log = std::cerr) {
  const auto data = load_dataset(cfg);
  const auto expected = data.model_config(cfg.model);
  std::optional<GenRecModel<float>> model;
  if (opts.from) {
    auto ck = load_compatible(*opts.from, data);
    if (!(ck.info.config == expected)) throw Error(*opts.from + ": model configuration differs from the run config");
    model.emplace(ck.model);
  } else {
    model.emplace(expected, cfg.seed);
  }
  auto fields = detail::train_and_save(cfg, data, *model, Stage::Finetune, opts, log);
  fields.emplace_back("init", opts.from ? *opts.from : "scratch");
  return fields;
}

inline std::string default_checkpoint(const RunConfig& cfg, const CommandOptions& opts) {
  return opts.checkpoint ? *opts.checkpoint : cfg.checkpoint_path(Stage::Finetune).string();
}

inline StatusFields cmd_evaluate(const RunConfig& cfg, const CommandOptions& opts = {}, std::ostream& out = std::cout) {
  const auto data = load_dataset(cfg);
  const auto ckpt = default_checkpoint(cfg, opts);
  const auto ck = load_compatible(ckpt, data);
  const auto trie = ItemTrie::build(data.tokenizer);
  EvalOptions eo;
  eo.beam_width = cfg.beam_width;
  eo.k_list = cfg.k_list;
  eo.mode = cfg.ranking;
  eo.threads = cfg.eval_threads;
  const auto report = evaluate(ck.model, data.tokenizer, trie, data.splits, opts.phase, eo);
  const auto text = format_report(report);
  {
    auto f = detail::open_out(cfg.report_path(opts.phase));
    f << text;
  }
  out << text;
  StatusFields fields{{"report", cfg.report_path(opts.phase).string()}, {"checkpoint", ckpt}};
  if (report.beam_narrower_than_k) fields.emplace_back("warning", "beam_width_below_max_k");
  return fields;
}

// One line: user \t item:logprob,item:logprob,... for the user's next item
// after their full history.
inline std::string format_recommendation(const std::string& user, const RankedPrediction& ranked,
                                         const corpus::Catalog& catalog) {
  std::string line = user + '\t';
  for (std::size_t r = 0; r < ranked.items.size(); ++r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", ranked.items[r].log_prob);
    if (r) line += ',';
    line += catalog.item_id(ranked.items[r].item) + ':' + buf;
  }
  return line + '\n';
}

inline StatusFields cmd_recommend(const RunConfig& cfg, const CommandOptions& opts = {}, std::ostream& out = std::cout) {
  if (!opts.user) throw Error("recommend: --user is required");
  const auto data = load_dataset(cfg);
  const auto& catalog = data.tokenizer.catalog();
  if (!catalog.has_user(*opts.user)) throw Error("recommend: unknown user '" + *opts.user + "'");
  const auto ckpt = default_checkpoint(cfg, opts);
  const auto ck = load_compatible(ckpt, data);
  const auto trie = ItemTrie::build(data.tokenizer);
  const auto& split = data.splits.at(catalog.user_index(*opts.user));
  const auto input = data.tokenizer.encode(split.user_id, split.full(), AppendMask{});
  const auto ranked = beam_search(ck.model, input, cfg.beam_width, trie);
  out << format_recommendation(*opts.user, ranked, catalog);
  return {{"user", *opts.user}, {"items", std::to_string(ranked.size())}, {"checkpoint", ckpt}};
}

}  // namespace genrec
