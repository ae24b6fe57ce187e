#pragma once

// Cloze-style training examples and the two-stage training loop.
//
//   pretrain:  one random train item replaced by [MASK], target = that item
//   finetune:  train[0..n-2] + [MASK],                  target = train[n-1]
//   validate:  train + [MASK],                          target = val
//   test:      train + val + [MASK],                    target = test
//
// The val and test items never reach a training example.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "genrec/corpus.hpp"
#include "genrec/model.hpp"
#include "genrec/optim.hpp"
#include "genrec/tokenizer.hpp"

namespace genrec {

enum class Stage { Pretrain, Finetune };
enum class Phase { Validation, Test };

inline const char* to_string(Stage s) { return s == Stage::Pretrain ? "pretrain" : "finetune"; }
inline const char* to_string(Phase p) { return p == Phase::Validation ? "validation" : "test"; }

inline Phase parse_phase(const std::string& s) {
  if (s == "validation") return Phase::Validation;
  if (s == "test") return Phase::Test;
  throw Error("unknown phase '" + s + "' (expected validation or test)");
}

struct MaskOrigin {
  enum class Kind { PretrainReplace, FinetuneAppend, EvalAppend };
  Kind kind = Kind::EvalAppend;
  std::size_t index = 0;  // masked position for PretrainReplace
};

struct MaskedExample {
  std::size_t user_index = 0;
  TokenSequence input;
  std::size_t target_item = 0;
  std::vector<TokenId> target_tokens;
  MaskOrigin origin;
};

struct StageConfig {
  Stage stage = Stage::Finetune;
  std::size_t epochs = 25;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double base_lr = 1e-5;
  double weight_decay = 1e-5;
  double warmup_fraction = 0.05;
  double clip_norm = 0.0;

  static StageConfig pretrain_defaults() {
    StageConfig c;
    c.stage = Stage::Pretrain;
    c.epochs = 20;
    return c;
  }
  static StageConfig finetune_defaults() { return StageConfig{}; }
};

struct EpochLog {
  Stage stage = Stage::Pretrain;
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

inline void write_loss_line(std::ostream& out, const EpochLog& e) {
  std::ostringstream os;
  os.precision(9);
  os << to_string(e.stage) << '\t' << e.epoch << '\t' << e.mean_loss << '\t' << e.lr << '\n';
  out << os.str();
}

namespace detail {

inline MaskedExample finish_example(const Tokenizer& tok, const std::string& user_id, const std::vector<std::string>& items,
                                    MaskSpec spec, const std::string& target, MaskOrigin origin) {
  MaskedExample ex;
  ex.user_index = tok.catalog().user_index(user_id);
  ex.input = tok.encode(user_id, items, spec);
  ex.target_item = tok.catalog().item_index(target);
  ex.target_tokens = tok.target_tokens(ex.target_item);
  ex.origin = origin;
  return ex;
}

// Visiting order for one epoch: a seeded permutation of 0..n-1.
template <class Rng>
std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace detail

template <class Rng>
MaskedExample make_pretrain_example(const corpus::SplitSequence& split, Rng& rng, const Tokenizer& tok) {
  if (split.train_items.empty()) throw Error("make_pretrain_example: user '" + split.user_id + "' has no train items");
  std::uniform_int_distribution<std::size_t> pick(0, split.train_items.size() - 1);
  const std::size_t k = pick(rng);
  return detail::finish_example(tok, split.user_id, split.train_items, ReplaceItemAt{k}, split.train_items[k],
                                {MaskOrigin::Kind::PretrainReplace, k});
}

// nullopt when the train split is too short to hold a prefix and a target.
inline std::optional<MaskedExample> make_finetune_example(const corpus::SplitSequence& split, const Tokenizer& tok) {
  if (split.train_items.size() < 2) return std::nullopt;
  std::vector<std::string> prefix(split.train_items.begin(), split.train_items.end() - 1);
  return detail::finish_example(tok, split.user_id, prefix, AppendMask{}, split.train_items.back(),
                                {MaskOrigin::Kind::FinetuneAppend, 0});
}

inline MaskedExample make_eval_example(const corpus::SplitSequence& split, Phase phase, const Tokenizer& tok) {
  auto items = split.train_items;
  if (phase == Phase::Test) items.push_back(split.val_item);
  const auto& target = phase == Phase::Test ? split.test_item : split.val_item;
  return detail::finish_example(tok, split.user_id, items, AppendMask{}, target, {MaskOrigin::Kind::EvalAppend, 0});
}

struct StageResult {
  std::vector<EpochLog> epochs;
  std::size_t steps = 0;
  std::size_t skipped_users = 0;
};

// Trains `model` in place. `on_epoch` is called after every epoch.
template <class T>
StageResult run_stage(GenRecModel<T>& model, const Tokenizer& tok, const std::vector<corpus::SplitSequence>& splits,
                      const StageConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (cfg.epochs < 1) throw Error("run_stage: epochs must be >= 1");
  if (cfg.batch_size < 1) throw Error("run_stage: batch_size must be >= 1");
  std::mt19937_64 rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  StageResult result;
  std::vector<const corpus::SplitSequence*> users;
  std::vector<MaskedExample> examples;
  for (const auto& s : splits) {
    if (cfg.stage == Stage::Finetune) {
      auto ex = make_finetune_example(s, tok);
      if (!ex) {
        ++result.skipped_users;
        continue;
      }
      examples.push_back(std::move(*ex));
    } else if (s.train_items.empty()) {
      ++result.skipped_users;
      continue;
    }
    users.push_back(&s);
  }
  const std::size_t n = users.size();
  if (n == 0) throw Error(std::string("run_stage: no usable ") + to_string(cfg.stage) + " examples");

  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const auto schedule = nn::WarmupSchedule::with_fraction(steps_per_epoch * cfg.epochs, cfg.base_lr, cfg.warmup_fraction);
  nn::AdamWOptions opts;
  opts.lr = cfg.base_lr;
  opts.weight_decay = cfg.weight_decay;
  opts.clip_norm = cfg.clip_norm;
  auto params = model.parameters();
  nn::AdamW<T> optimizer(params, opts);
  const bool use_dropout = model.config().dropout > 0.0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.stage == Stage::Pretrain) {
      examples.clear();
      for (const auto* s : users) examples.push_back(make_pretrain_example(*s, rng, tok));
    }
    const auto order = detail::epoch_order(n, rng);

    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const T inv_batch = T(1.0 / double(end - start));
      model.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const auto& ex = examples[order[b]];
        nn::Tape<T> tape;
        auto loss = model.training_loss(tape, ex.input, ex.target_tokens, use_dropout ? &dropout_rng : nullptr);
        const double value = double(loss.value().item());
        if (!std::isfinite(value)) {
          std::string ids;
          for (std::size_t k = start; k < end; ++k) ids += " " + users[order[k]]->user_id;
          throw Error(std::string(to_string(cfg.stage)) + ": non-finite loss at step " + std::to_string(result.steps + 1) +
                      "; batch users:" + ids);
        }
        loss_sum += value;
        tape.backward(nn::scale(loss, inv_batch));
        tape.accumulate_param_grads(params);
      }
      lr = schedule.lr_at(result.steps + 1);
      optimizer.step(lr);
      ++result.steps;
    }
    EpochLog log{cfg.stage, epoch, loss_sum / double(n), lr};
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

}  // namespace genrec
