#pragma once

// Shared fixtures for the unit tests.

#include <random>
#include <string>
#include <vector>

#include "genrec/corpus.hpp"
#include "genrec/tokenizer.hpp"

namespace testing_support {

inline genrec::corpus::Catalog catalog(std::size_t users, std::size_t items) {
  genrec::corpus::Catalog c;
  for (std::size_t u = 0; u < users; ++u) c.add_user("u" + std::to_string(u));
  for (std::size_t i = 0; i < items; ++i) c.add_item("i" + std::to_string(i));
  return c;
}

inline genrec::Tokenizer tokenizer(std::size_t users, std::size_t items, std::size_t max_length = 512) {
  return genrec::Tokenizer(catalog(users, items), max_length);
}

// Random splits over a catalog of `items` items, `len` interactions per user.
inline std::vector<genrec::corpus::SplitSequence> random_splits(std::size_t users, std::size_t items, std::size_t len,
                                                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<genrec::corpus::SplitSequence> out;
  for (std::size_t u = 0; u < users; ++u) {
    genrec::corpus::UserSequence s{"u" + std::to_string(u), {}};
    for (std::size_t t = 0; t < len; ++t) s.items.push_back("i" + std::to_string(rng() % items));
    out.push_back(genrec::corpus::leave_one_out(s));
  }
  return out;
}

}  // namespace testing_support
