#pragma once

// Synthetic interaction logs with a known next-item rule: items form one
// random cycle and each user walks it from a random start.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "genrec/corpus.hpp"

namespace genrec::synthetic {

struct CyclicOptions {
  std::size_t num_users = 200;
  std::size_t num_items = 30;
  std::size_t sequence_length = 8;
  // Probability that a position is replaced by a uniformly random item.
  double noise = 0.0;
  std::uint64_t seed = 7;
};

inline std::string user_name(std::size_t u) {
  auto s = std::to_string(u);
  return "u" + std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

inline std::string item_name(std::size_t i) {
  auto s = std::to_string(i);
  return "i" + std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

// successor[i] is the item that follows item i.
inline std::vector<std::size_t> make_cycle(std::size_t num_items, std::mt19937_64& rng) {
  std::vector<std::size_t> order(num_items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> successor(num_items);
  for (std::size_t k = 0; k < num_items; ++k) successor[order[k]] = order[(k + 1) % num_items];
  return successor;
}

struct CyclicDataset {
  std::vector<corpus::Interaction> interactions;
  std::vector<std::size_t> successor;
};

inline CyclicDataset cyclic(const CyclicOptions& opts) {
  std::mt19937_64 rng(opts.seed);
  CyclicDataset out;
  out.successor = make_cycle(opts.num_items, rng);
  std::uniform_int_distribution<std::size_t> any_item(0, opts.num_items - 1);
  std::bernoulli_distribution noisy(opts.noise);
  for (std::size_t u = 0; u < opts.num_users; ++u) {
    std::size_t item = any_item(rng);
    for (std::size_t t = 0; t < opts.sequence_length; ++t) {
      std::size_t emitted = item;
      if (opts.noise > 0.0 && noisy(rng)) emitted = any_item(rng);
      out.interactions.push_back({user_name(u), item_name(emitted), std::int64_t(1000 + 10 * t)});
      item = out.successor[item];
    }
  }
  return out;
}

}  // namespace genrec::synthetic
