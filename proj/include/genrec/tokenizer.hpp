#pragma once

// Text serialization of user/item sequences and the deterministic
// prefix / underscore / two-digit-chunk tokenizer:
//   "item_1234" -> ["item", "_", "12", "34"]

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "genrec/corpus.hpp"
#include "genrec/error.hpp"

namespace genrec {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBeg = 1;
inline constexpr TokenId kEnd = 2;
inline constexpr TokenId kMask = 3;
inline constexpr std::size_t kNumSpecials = 4;
inline constexpr std::size_t kDefaultMaxLength = 512;

struct EntityTag {
  enum class Kind : std::uint8_t { None, User, Item };
  Kind kind = Kind::None;
  std::int32_t index = -1;

  static EntityTag none() { return {}; }
  static EntityTag user(std::int32_t i) { return {Kind::User, i}; }
  static EntityTag item(std::int32_t i) { return {Kind::Item, i}; }

  friend bool operator==(const EntityTag&, const EntityTag&) = default;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<EntityTag> tags;
  std::size_t true_length = 0;
  // Oldest items removed to respect max_length.
  std::size_t dropped_items = 0;

  // Appends [PAD] up to `length`.
  void pad_to(std::size_t length) {
    if (ids.size() > length) throw Error("pad_to: sequence already longer than target length");
    ids.resize(length, kPad);
    tags.resize(length, EntityTag::none());
  }
};

struct NoMask {};
struct AppendMask {};
struct ReplaceItemAt {
  std::size_t index;
};
using MaskSpec = std::variant<NoMask, AppendMask, ReplaceItemAt>;

// Splits "<alpha prefix>_<digits>" into prefix, "_", and left-to-right
// two-character digit chunks.
inline std::vector<std::string> tokenize_word(std::string_view word) {
  auto bad = [&] { return Error("tokenize_word: '" + std::string(word) + "' is not <prefix>_<digits>"); };
  auto us = word.find('_');
  if (us == std::string_view::npos || us == 0 || us + 1 >= word.size()) throw bad();
  auto prefix = word.substr(0, us);
  auto digits = word.substr(us + 1);
  if (!std::all_of(prefix.begin(), prefix.end(), [](unsigned char c) { return std::isalpha(c); })) throw bad();
  if (!std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); })) throw bad();
  std::vector<std::string> out;
  out.emplace_back(prefix);
  out.emplace_back("_");
  for (std::size_t i = 0; i < digits.size(); i += 2) out.emplace_back(digits.substr(i, 2));
  return out;
}

inline std::string user_word(std::size_t index) { return "user_" + std::to_string(index); }
inline std::string item_word(std::size_t index) { return "item_" + std::to_string(index); }

class Vocab {
 public:
  Vocab() : id_to_token_{"[PAD]", "[BEG]", "[END]", "[MASK]"} {
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) token_to_id_[id_to_token_[i]] = TokenId(i);
  }

  // Content tokens in first-seen order over all user words, then all item
  // words, in catalog order.
  static Vocab build(const corpus::Catalog& catalog) {
    Vocab v;
    for (std::size_t u = 0; u < catalog.num_users(); ++u)
      for (auto& t : tokenize_word(user_word(u))) v.add(t);
    for (std::size_t i = 0; i < catalog.num_items(); ++i)
      for (auto& t : tokenize_word(item_word(i))) v.add(t);
    return v;
  }

  TokenId add(const std::string& token) {
    auto [it, inserted] = token_to_id_.emplace(token, TokenId(id_to_token_.size()));
    if (inserted) id_to_token_.push_back(token);
    return it->second;
  }

  std::size_t size() const noexcept { return id_to_token_.size(); }

  TokenId id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end()) throw Error("token '" + token + "' not in vocabulary");
    return it->second;
  }
  std::optional<TokenId> find(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }
  const std::string& token(TokenId id) const {
    if (id < 0 || std::size_t(id) >= id_to_token_.size()) throw Error("token id out of range: " + std::to_string(id));
    return id_to_token_[std::size_t(id)];
  }
  static bool is_special(TokenId id) noexcept { return id >= 0 && std::size_t(id) < kNumSpecials; }

  // One token per line; line number is the id.
  void save(std::ostream& out) const {
    for (const auto& t : id_to_token_) out << t << '\n';
  }

  static Vocab load(std::istream& in) {
    Vocab v;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (lineno < kNumSpecials) {
        if (line != v.id_to_token_[lineno]) throw ParseError(lineno + 1, "expected special token " + v.id_to_token_[lineno]);
      } else {
        if (line.empty()) throw ParseError(lineno + 1, "empty token");
        if (v.token_to_id_.contains(line)) throw ParseError(lineno + 1, "duplicate token '" + line + "'");
        v.add(line);
      }
      ++lineno;
    }
    if (lineno < kNumSpecials) throw ParseError(lineno, "vocabulary file is missing special tokens");
    return v;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.id_to_token_ == b.id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

// Tokenizer bound to a catalog (entity indices) and its vocabulary.
class Tokenizer {
 public:
  Tokenizer(corpus::Catalog catalog, Vocab vocab, std::size_t max_length = kDefaultMaxLength)
      : catalog_(std::move(catalog)), vocab_(std::move(vocab)), max_length_(max_length) {
    if (max_length_ < 4) throw Error("max_length must be at least 4");
    item_tokens_.reserve(catalog_.num_items());
    for (std::size_t i = 0; i < catalog_.num_items(); ++i) item_tokens_.push_back(word_ids(item_word(i)));
  }

  explicit Tokenizer(corpus::Catalog catalog, std::size_t max_length = kDefaultMaxLength)
      : Tokenizer(catalog, Vocab::build(catalog), max_length) {}

  const corpus::Catalog& catalog() const noexcept { return catalog_; }
  const Vocab& vocab() const noexcept { return vocab_; }
  std::size_t max_length() const noexcept { return max_length_; }

  std::string serialize(const std::string& user_id, const std::vector<std::string>& items) const {
    if (items.empty()) throw Error("serialize: empty item list");
    std::string out = user_word(catalog_.user_index(user_id));
    for (const auto& item : items) out += " " + item_word(catalog_.item_index(item));
    return out;
  }

  // Token ids of one item, without [BEG]/[END].
  const std::vector<TokenId>& item_tokens(std::size_t item_index) const { return item_tokens_.at(item_index); }

  // [BEG] item tokens [END]
  std::vector<TokenId> target_tokens(std::size_t item_index) const {
    std::vector<TokenId> out{kBeg};
    const auto& t = item_tokens(item_index);
    out.insert(out.end(), t.begin(), t.end());
    out.push_back(kEnd);
    return out;
  }

  TokenSequence encode(const std::string& user_id, const std::vector<std::string>& items, MaskSpec mask) const {
    std::vector<std::size_t> indices;
    indices.reserve(items.size());
    for (const auto& item : items) indices.push_back(catalog_.item_index(item));
    return encode_indices(catalog_.user_index(user_id), indices, mask);
  }

  TokenSequence encode_indices(std::size_t user_index, const std::vector<std::size_t>& items, MaskSpec mask) const {
    std::optional<std::size_t> replace;
    if (auto* r = std::get_if<ReplaceItemAt>(&mask)) {
      if (r->index >= items.size()) throw Error("ReplaceItemAt index out of range");
      replace = r->index;
    }
    const bool append = std::holds_alternative<AppendMask>(mask);
    auto user_tokens = word_ids(user_word(user_index));

    auto cost = [&](std::size_t k) { return (replace && *replace == k) ? std::size_t{1} : item_tokens(items[k]).size(); };
    std::size_t total = 2 + user_tokens.size() + (append ? 1 : 0);
    for (std::size_t k = 0; k < items.size(); ++k) total += cost(k);

    // Drop oldest items (never the masked one) until the sequence fits.
    std::vector<bool> keep(items.size(), true);
    std::size_t dropped = 0;
    for (std::size_t k = 0; k < items.size() && total > max_length_; ++k) {
      if (replace && *replace == k) continue;
      keep[k] = false;
      total -= cost(k);
      ++dropped;
    }
    if (total > max_length_) throw Error("encode: sequence cannot fit in max_length even after truncation");

    TokenSequence seq;
    seq.dropped_items = dropped;
    seq.ids.reserve(total);
    seq.tags.reserve(total);
    auto push = [&](TokenId id, EntityTag tag) {
      seq.ids.push_back(id);
      seq.tags.push_back(tag);
    };
    push(kBeg, EntityTag::none());
    for (auto id : user_tokens) push(id, EntityTag::user(std::int32_t(user_index)));
    for (std::size_t k = 0; k < items.size(); ++k) {
      if (!keep[k]) continue;
      if (replace && *replace == k) {
        push(kMask, EntityTag::none());
        continue;
      }
      for (auto id : item_tokens(items[k])) push(id, EntityTag::item(std::int32_t(items[k])));
    }
    if (append) push(kMask, EntityTag::none());
    push(kEnd, EntityTag::none());
    seq.true_length = seq.ids.size();
    return seq;
  }

  // Maps generated tokens back to an item index. Specials are ignored.
  std::size_t decode_item(const std::vector<TokenId>& ids) const {
    std::vector<std::string> raw;
    std::string text;
    for (auto id : ids) {
      if (id < 0 || std::size_t(id) >= vocab_.size()) {
        raw.push_back("<" + std::to_string(id) + ">");
        throw MalformedGeneration(raw, "token id out of range");
      }
      raw.push_back(vocab_.token(id));
      if (Vocab::is_special(id)) continue;
      text += vocab_.token(id);
    }
    constexpr std::string_view prefix = "item_";
    if (text.size() <= prefix.size() || text.compare(0, prefix.size(), prefix) != 0) {
      throw MalformedGeneration(raw, "missing item_ prefix or digits");
    }
    auto digits = std::string_view(text).substr(prefix.size());
    if (!std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); })) {
      throw MalformedGeneration(raw, "non-digit characters");
    }
    if (digits.size() > 1 && digits.front() == '0') throw MalformedGeneration(raw, "leading zero");
    if (digits.size() > 18) throw MalformedGeneration(raw, "index too large");
    auto index = std::stoull(std::string(digits));
    if (index >= catalog_.num_items()) throw MalformedGeneration(raw, "unknown item index");
    return std::size_t(index);
  }

 private:
  std::vector<TokenId> word_ids(const std::string& word) const {
    std::vector<TokenId> out;
    for (const auto& t : tokenize_word(word)) out.push_back(vocab_.id(t));
    return out;
  }

  corpus::Catalog catalog_;
  Vocab vocab_;
  std::size_t max_length_;
  std::vector<std::vector<TokenId>> item_tokens_;
};

}  // namespace genrec
