#pragma once

// Trie-constrained beam search over item token sequences, and the exhaustive
// teacher-forced ranking used to check it.
//
// Scores are raw summed token log-probabilities (full-vocabulary
// log-softmax, no length normalization). Ties rank the smaller item index
// first.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "genrec/model.hpp"
#include "genrec/tokenizer.hpp"

namespace genrec {

class ItemTrie {
 public:
  struct Node {
    std::map<TokenId, std::size_t> children;
    std::optional<std::size_t> item;
    std::size_t min_item = std::numeric_limits<std::size_t>::max();
  };

  ItemTrie() : nodes_(1) {}

  static ItemTrie build(const Tokenizer& tok) {
    ItemTrie trie;
    for (std::size_t i = 0; i < tok.catalog().num_items(); ++i) trie.insert(tok.item_tokens(i), i);
    return trie;
  }

  void insert(const std::vector<TokenId>& tokens, std::size_t item) {
    if (tokens.empty()) throw Error("ItemTrie: empty token sequence for item " + std::to_string(item));
    std::size_t node = 0;
    nodes_[0].min_item = std::min(nodes_[0].min_item, item);
    for (auto t : tokens) {
      auto it = nodes_[node].children.find(t);
      if (it == nodes_[node].children.end()) {
        nodes_.emplace_back();
        it = nodes_[node].children.emplace(t, nodes_.size() - 1).first;
      }
      node = it->second;
      nodes_[node].min_item = std::min(nodes_[node].min_item, item);
    }
    if (nodes_[node].item) {
      throw Error("ItemTrie: items " + std::to_string(*nodes_[node].item) + " and " + std::to_string(item) +
                  " share a token sequence");
    }
    nodes_[node].item = item;
    ++num_items_;
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t root() const noexcept { return 0; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t num_items() const noexcept { return num_items_; }

  std::size_t num_terminals() const {
    return std::size_t(std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.item.has_value(); }));
  }
  // Terminals that are also a proper prefix of another item.
  std::size_t num_shared_prefix_terminals() const {
    return std::size_t(std::count_if(nodes_.begin(), nodes_.end(),
                                     [](const Node& n) { return n.item.has_value() && !n.children.empty(); }));
  }
  std::size_t max_depth() const { return depth_from(0); }

 private:
  std::size_t depth_from(std::size_t id) const {
    std::size_t d = 0;
    for (const auto& [tok, child] : nodes_[id].children) d = std::max(d, 1 + depth_from(child));
    return d;
  }

  std::vector<Node> nodes_;
  std::size_t num_items_ = 0;
};

struct ScoredItem {
  std::size_t item = 0;
  double log_prob = 0.0;

  friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

struct RankedPrediction {
  std::vector<ScoredItem> items;

  std::size_t size() const noexcept { return items.size(); }
  // 1-based rank of `item`, or 0 if absent.
  std::size_t rank_of(std::size_t item) const {
    for (std::size_t r = 0; r < items.size(); ++r)
      if (items[r].item == item) return r + 1;
    return 0;
  }

  friend bool operator==(const RankedPrediction&, const RankedPrediction&) = default;
};

inline bool ranks_before(const ScoredItem& a, const ScoredItem& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.item < b.item;
}

namespace detail {

template <class T>
std::vector<double> log_softmax_row(const nn::Tensor<T>& logits, std::size_t row) {
  const auto r = logits.row(row);
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : r) mx = std::max(mx, double(v));
  double z = 0;
  for (T v : r) z += std::exp(double(v) - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(r.size());
  for (std::size_t j = 0; j < r.size(); ++j) out[j] = double(r[j]) - lse;
  return out;
}

inline std::size_t count_masks(const TokenSequence& seq) {
  return std::size_t(std::count(seq.ids.begin(), seq.ids.begin() + std::ptrdiff_t(seq.true_length), kMask));
}

}  // namespace detail

// Encoder states plus precomputed cross-attention keys/values, shared by all
// decoder calls of one search.
template <class T>
struct EncodedInput {
  typename GenRecModel<T>::Memory memory;
};

template <class T>
EncodedInput<T> encode_input(const GenRecModel<T>& model, const TokenSequence& input) {
  if (detail::count_masks(input) != 1) throw Error("decoding: input must contain exactly one [MASK]");
  return {model.precompute_memory(input)};
}

// Next-token log-probabilities after `prefix` ([BEG] excluded).
template <class T>
std::vector<double> next_token_log_probs(const GenRecModel<T>& model, const EncodedInput<T>& enc,
                                         const std::vector<TokenId>& prefix) {
  std::vector<TokenId> full{kBeg};
  full.insert(full.end(), prefix.begin(), prefix.end());
  nn::Tape<T> tape;
  auto logits = model.decode_cached(tape, full, enc.memory);
  return detail::log_softmax_row(logits.value(), full.size() - 1);
}

template <class T>
RankedPrediction beam_search(const GenRecModel<T>& model, const TokenSequence& input, std::size_t beam_width,
                             const ItemTrie& trie) {
  if (beam_width < 1) throw Error("beam_search: beam_width must be >= 1");
  const auto enc = encode_input(model, input);
  const std::size_t max_prefix = model.config().max_length;

  struct Hyp {
    std::vector<TokenId> tokens;
    double log_prob = 0.0;
    std::size_t node = 0;
    bool finished = false;
    std::size_t key = 0;  // item index if finished, else smallest item below node
  };
  auto better = [](const Hyp& a, const Hyp& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.key < b.key;
  };

  std::vector<Hyp> live{Hyp{{}, 0.0, trie.root(), false, trie.node(trie.root()).min_item}};
  std::vector<ScoredItem> finished;
  while (!live.empty()) {
    std::vector<Hyp> candidates;
    for (const auto& h : live) {
      if (h.tokens.size() + 2 > max_prefix) throw Error("beam_search: item token sequence exceeds max_length");
      const auto lp = next_token_log_probs(model, enc, h.tokens);
      const auto& node = trie.node(h.node);
      if (node.item) {
        candidates.push_back({h.tokens, h.log_prob + lp[std::size_t(kEnd)], h.node, true, *node.item});
      }
      for (const auto& [tok, child] : node.children) {
        Hyp next{h.tokens, h.log_prob + lp[std::size_t(tok)], child, false, trie.node(child).min_item};
        next.tokens.push_back(tok);
        candidates.push_back(std::move(next));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (candidates.size() > beam_width) candidates.resize(beam_width);
    live.clear();
    for (auto& c : candidates) {
      if (c.finished) {
        finished.push_back({c.key, c.log_prob});
      } else {
        live.push_back(std::move(c));
      }
    }
    // Scores only decrease, so stop once no live hypothesis can enter the
    // top beam_width finished results.
    if (finished.size() >= beam_width && !live.empty()) {
      std::sort(finished.begin(), finished.end(), ranks_before);
      finished.resize(beam_width);
      if (live.front().log_prob < finished.back().log_prob) live.clear();
    }
  }
  if (finished.empty()) throw Error("beam_search: no finished hypotheses");
  std::sort(finished.begin(), finished.end(), ranks_before);
  if (finished.size() > beam_width) finished.resize(beam_width);
  return {std::move(finished)};
}

// log P(item tokens, [END] | input) with one teacher-forced decoder pass.
template <class T>
double sequence_log_prob(const GenRecModel<T>& model, const EncodedInput<T>& enc, const std::vector<TokenId>& tokens) {
  std::vector<TokenId> prefix{kBeg};
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  nn::Tape<T> tape;
  auto logits = model.decode_cached(tape, prefix, enc.memory);
  double total = 0.0;
  for (std::size_t k = 0; k < prefix.size(); ++k) {
    const auto lp = detail::log_softmax_row(logits.value(), k);
    const TokenId next = k + 1 < prefix.size() ? prefix[k + 1] : kEnd;
    total += lp[std::size_t(next)];
  }
  return total;
}

inline constexpr std::size_t kExhaustiveItemLimit = 10000;

// Exact sequence log-probability of every item, sorted best first.
template <class T>
RankedPrediction exhaustive_rank(const GenRecModel<T>& model, const TokenSequence& input, const Tokenizer& tok) {
  const std::size_t num_items = tok.catalog().num_items();
  if (num_items > kExhaustiveItemLimit) {
    throw Error("exhaustive_rank: " + std::to_string(num_items) + " items exceeds the enumeration limit");
  }
  const auto enc = encode_input(model, input);
  RankedPrediction out;
  out.items.reserve(num_items);
  for (std::size_t i = 0; i < num_items; ++i) out.items.push_back({i, sequence_log_prob(model, enc, tok.item_tokens(i))});
  std::sort(out.items.begin(), out.items.end(), ranks_before);
  return out;
}

}  // namespace genrec
