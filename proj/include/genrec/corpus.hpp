#pragma once

// Interaction logs -> chronological per-user sequences -> 5-core filter ->
// leave-one-out splits.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "genrec/error.hpp"

namespace genrec::corpus {

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct UserSequence {
  std::string user_id;
  std::vector<std::string> items;

  friend bool operator==(const UserSequence&, const UserSequence&) = default;
};

struct SplitSequence {
  std::string user_id;
  std::vector<std::string> train_items;
  std::string val_item;
  std::string test_item;

  std::vector<std::string> full() const {
    auto all = train_items;
    all.push_back(val_item);
    all.push_back(test_item);
    return all;
  }

  friend bool operator==(const SplitSequence&, const SplitSequence&) = default;
};

struct DatasetStats {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t num_interactions = 0;
  double avg_items_per_user = 0.0;
  double avg_users_per_item = 0.0;
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view chomp(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Reads `user \t item \t timestamp` lines. Blank lines are skipped.
inline std::vector<Interaction> ingest(std::istream& in) {
  std::vector<Interaction> out;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    auto line = detail::chomp(raw);
    if (line.empty()) continue;
    auto fields = detail::split(line, '\t');
    if (fields.size() != 3) {
      throw ParseError(lineno, "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    }
    if (fields[0].empty() || fields[1].empty()) throw ParseError(lineno, "empty user or item id");
    std::int64_t ts = 0;
    auto ts_field = fields[2];
    auto [ptr, ec] = std::from_chars(ts_field.data(), ts_field.data() + ts_field.size(), ts);
    if (ec != std::errc{} || ptr != ts_field.data() + ts_field.size() || ts_field.empty()) {
      throw ParseError(lineno, "timestamp is not an integer: '" + std::string(ts_field) + "'");
    }
    if (ts < 0) throw ParseError(lineno, "negative timestamp");
    out.push_back({std::string(fields[0]), std::string(fields[1]), ts});
  }
  return out;
}

inline std::vector<Interaction> ingest(std::string_view text) {
  std::istringstream in{std::string(text)};
  return ingest(in);
}

// One sequence per user, ordered by timestamp; equal timestamps keep input
// order. Output is sorted by user_id.
inline std::vector<UserSequence> build_sequences(const std::vector<Interaction>& interactions) {
  std::map<std::string, std::vector<const Interaction*>> by_user;
  for (const auto& x : interactions) by_user[x.user_id].push_back(&x);
  std::vector<UserSequence> out;
  out.reserve(by_user.size());
  for (auto& [user, events] : by_user) {
    std::stable_sort(events.begin(), events.end(),
                     [](const Interaction* a, const Interaction* b) { return a->timestamp < b->timestamp; });
    UserSequence seq{user, {}};
    seq.items.reserve(events.size());
    for (const auto* e : events) seq.items.push_back(e->item_id);
    out.push_back(std::move(seq));
  }
  return out;
}

// Iterated k-core filter: drops users with fewer than `min_count` items and
// items seen in fewer than `min_count` sequences until nothing changes.
inline std::vector<UserSequence> core_filter(std::vector<UserSequence> sequences, std::size_t min_count = 5) {
  if (min_count < 1) throw Error("core_filter: min_count must be >= 1");
  while (true) {
    std::unordered_map<std::string, std::size_t> item_users;
    for (const auto& s : sequences) {
      std::set<std::string_view> distinct(s.items.begin(), s.items.end());
      for (auto item : distinct) ++item_users[std::string(item)];
    }
    bool changed = false;
    std::vector<UserSequence> next;
    next.reserve(sequences.size());
    for (auto& s : sequences) {
      std::vector<std::string> kept;
      kept.reserve(s.items.size());
      for (auto& item : s.items) {
        if (item_users[item] >= min_count) {
          kept.push_back(std::move(item));
        } else {
          changed = true;
        }
      }
      if (kept.size() >= min_count) {
        next.push_back({std::move(s.user_id), std::move(kept)});
      } else {
        changed = true;
      }
    }
    sequences = std::move(next);
    if (!changed) break;
  }
  std::sort(sequences.begin(), sequences.end(),
            [](const UserSequence& a, const UserSequence& b) { return a.user_id < b.user_id; });
  return sequences;
}

inline SplitSequence leave_one_out(const UserSequence& seq) {
  const auto n = seq.items.size();
  if (n < 3) {
    throw Error("leave_one_out: user '" + seq.user_id + "' has " + std::to_string(n) +
                " items, need at least 3");
  }
  SplitSequence s;
  s.user_id = seq.user_id;
  s.train_items.assign(seq.items.begin(), seq.items.end() - 2);
  s.val_item = seq.items[n - 2];
  s.test_item = seq.items[n - 1];
  return s;
}

inline std::vector<SplitSequence> leave_one_out(const std::vector<UserSequence>& seqs) {
  std::vector<SplitSequence> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(leave_one_out(s));
  return out;
}

// Both averages divide the interaction count, so
// users * items/user == items * users/item.
inline DatasetStats stats(const std::vector<UserSequence>& sequences) {
  DatasetStats st;
  std::set<std::string_view> users;
  std::set<std::string_view> items;
  for (const auto& s : sequences) {
    users.insert(s.user_id);
    for (const auto& i : s.items) items.insert(i);
    st.num_interactions += s.items.size();
  }
  st.num_users = users.size();
  st.num_items = items.size();
  if (st.num_users > 0) st.avg_items_per_user = double(st.num_interactions) / double(st.num_users);
  if (st.num_items > 0) st.avg_users_per_item = double(st.num_interactions) / double(st.num_items);
  return st;
}

inline void write_stats(std::ostream& out, const DatasetStats& st) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << "# Users\t" << st.num_users << "\n";
  os << "# Items\t" << st.num_items << "\n";
  os << "Avg. Items / User\t" << st.avg_items_per_user << "\n";
  os << "Avg. Users / Item\t" << st.avg_users_per_item << "\n";
  out << os.str();
}

inline void write_splits(std::ostream& out, const std::vector<SplitSequence>& splits) {
  auto checked = [](const std::string& id) -> const std::string& {
    if (id.find_first_of(",\t\n") != std::string::npos) {
      throw Error("id '" + id + "' contains a separator character");
    }
    return id;
  };
  for (const auto& s : splits) {
    out << checked(s.user_id) << '\t';
    for (std::size_t i = 0; i < s.train_items.size(); ++i) {
      if (i) out << ',';
      out << checked(s.train_items[i]);
    }
    out << '\t' << checked(s.val_item) << '\t' << checked(s.test_item) << '\n';
  }
}

inline std::vector<SplitSequence> read_splits(std::istream& in) {
  std::vector<SplitSequence> out;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    auto line = detail::chomp(raw);
    if (line.empty()) continue;
    auto fields = detail::split(line, '\t');
    if (fields.size() != 4) throw ParseError(lineno, "split line needs 4 tab-separated fields");
    SplitSequence s;
    s.user_id = std::string(fields[0]);
    for (auto item : detail::split(fields[1], ',')) {
      if (item.empty()) throw ParseError(lineno, "empty train item");
      s.train_items.emplace_back(item);
    }
    s.val_item = std::string(fields[2]);
    s.test_item = std::string(fields[3]);
    if (s.user_id.empty() || s.val_item.empty() || s.test_item.empty()) {
      throw ParseError(lineno, "empty id in split line");
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Integer indices for users and items. Users are numbered in split order,
// items by first appearance when walking users in order and each sequence
// chronologically.
class Catalog {
 public:
  Catalog() = default;

  explicit Catalog(const std::vector<SplitSequence>& splits) {
    for (const auto& s : splits) {
      add_user(s.user_id);
      for (const auto& item : s.full()) add_item(item);
    }
  }

  std::size_t num_users() const noexcept { return users_.size(); }
  std::size_t num_items() const noexcept { return items_.size(); }

  const std::string& user_id(std::size_t index) const { return users_.at(index); }
  const std::string& item_id(std::size_t index) const { return items_.at(index); }

  std::size_t user_index(const std::string& id) const {
    auto it = user_lookup_.find(id);
    if (it == user_lookup_.end()) throw Error("unknown user '" + id + "'");
    return it->second;
  }
  std::size_t item_index(const std::string& id) const {
    auto it = item_lookup_.find(id);
    if (it == item_lookup_.end()) throw Error("unknown item '" + id + "'");
    return it->second;
  }
  bool has_user(const std::string& id) const { return user_lookup_.contains(id); }
  bool has_item(const std::string& id) const { return item_lookup_.contains(id); }

  void add_user(const std::string& id) {
    if (user_lookup_.emplace(id, users_.size()).second) users_.push_back(id);
  }
  void add_item(const std::string& id) {
    if (item_lookup_.emplace(id, items_.size()).second) items_.push_back(id);
  }

 private:
  std::vector<std::string> users_;
  std::vector<std::string> items_;
  std::unordered_map<std::string, std::size_t> user_lookup_;
  std::unordered_map<std::string, std::size_t> item_lookup_;
};

}  // namespace genrec::corpus
