#pragma once

// HR@k and NDCG@k with a single relevant item per user, over the full item
// catalog (no sampled negatives).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "genrec/decoding.hpp"
#include "genrec/tasks.hpp"

namespace genrec {

inline int hit(const RankedPrediction& ranked, std::size_t target, std::size_t k) {
  if (k < 1) throw Error("hit: k must be >= 1");
  const auto r = ranked.rank_of(target);
  return (r != 0 && r <= k) ? 1 : 0;
}

// 1 / log2(rank + 1) when the target is within the top k, else 0.
inline double ndcg(const RankedPrediction& ranked, std::size_t target, std::size_t k) {
  if (k < 1) throw Error("ndcg: k must be >= 1");
  const auto r = ranked.rank_of(target);
  if (r == 0 || r > k) return 0.0;
  return 1.0 / std::log2(double(r) + 1.0);
}

enum class RankingMode { Beam, Exhaustive };

struct EvalOptions {
  std::size_t beam_width = 20;
  std::vector<std::size_t> k_list{1, 5, 10};
  RankingMode mode = RankingMode::Beam;
  std::size_t threads = 1;
};

struct EvalReport {
  Phase phase = Phase::Test;
  std::map<std::size_t, double> hr;
  std::map<std::size_t, double> ndcg;
  std::size_t num_users_evaluated = 0;
  std::size_t num_users_excluded = 0;
  std::size_t beam_width = 0;
  bool beam_narrower_than_k = false;
};

// Key=value report with metrics at 4 decimals. NDCG@1 equals HR@1 and is not
// written.
inline std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  auto fixed4 = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  os << "phase=" << to_string(r.phase) << '\n';
  for (const auto& [k, v] : r.hr) os << "HR@" << k << '=' << fixed4(v) << '\n';
  for (const auto& [k, v] : r.ndcg)
    if (k > 1) os << "NDCG@" << k << '=' << fixed4(v) << '\n';
  os << "num_users_evaluated=" << r.num_users_evaluated << '\n';
  os << "num_users_excluded=" << r.num_users_excluded << '\n';
  return os.str();
}

// Averages per-user metrics given each user's ranking and target.
inline EvalReport summarize(Phase phase, const std::vector<RankedPrediction>& rankings,
                            const std::vector<std::size_t>& targets, const std::vector<std::size_t>& k_list) {
  if (rankings.size() != targets.size()) throw Error("summarize: rankings and targets differ in length");
  if (rankings.empty()) throw Error("evaluate: empty evaluation set");
  EvalReport r;
  r.phase = phase;
  for (auto k : k_list) {
    double h = 0, g = 0;
    for (std::size_t u = 0; u < rankings.size(); ++u) {
      h += hit(rankings[u], targets[u], k);
      g += ndcg(rankings[u], targets[u], k);
    }
    r.hr[k] = h / double(rankings.size());
    r.ndcg[k] = g / double(rankings.size());
  }
  r.num_users_evaluated = rankings.size();
  return r;
}

// Ranks every user's eval example and reports the mean metrics. Users whose
// example cannot be built are counted in num_users_excluded.
template <class T>
EvalReport evaluate(const GenRecModel<T>& model, const Tokenizer& tok, const ItemTrie& trie,
                    const std::vector<corpus::SplitSequence>& splits, Phase phase, const EvalOptions& opts = {},
                    std::vector<RankedPrediction>* rankings_out = nullptr) {
  if (opts.k_list.empty()) throw Error("evaluate: empty k_list");
  std::vector<MaskedExample> examples;
  std::size_t excluded = 0;
  for (const auto& s : splits) {
    try {
      examples.push_back(make_eval_example(s, phase, tok));
    } catch (const Error&) {
      ++excluded;
    }
  }
  if (examples.empty()) throw Error("evaluate: empty evaluation set");

  std::vector<RankedPrediction> rankings(examples.size());
  auto rank_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      rankings[i] = opts.mode == RankingMode::Beam ? beam_search(model, examples[i].input, opts.beam_width, trie)
                                                   : exhaustive_rank(model, examples[i].input, tok);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(opts.threads, examples.size()));
  if (threads == 1) {
    rank_range(0, examples.size());
  } else {
    std::vector<std::exception_ptr> errors(threads);
    {
      std::vector<std::jthread> pool;
      const std::size_t chunk = (examples.size() + threads - 1) / threads;
      for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t b = t * chunk, e = std::min(examples.size(), b + chunk);
        if (b >= e) continue;
        pool.emplace_back([&, t, b, e] {
          try {
            rank_range(b, e);
          } catch (...) {
            errors[t] = std::current_exception();
          }
        });
      }
    }
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);
  }

  std::vector<std::size_t> targets;
  for (const auto& ex : examples) targets.push_back(ex.target_item);
  auto report = summarize(phase, rankings, targets, opts.k_list);
  report.num_users_excluded = excluded;
  report.beam_width = opts.beam_width;
  report.beam_narrower_than_k =
      opts.mode == RankingMode::Beam && opts.beam_width < *std::max_element(opts.k_list.begin(), opts.k_list.end());
  if (rankings_out) *rankings_out = std::move(rankings);
  return report;
}

}  // namespace genrec
