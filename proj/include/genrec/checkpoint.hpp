#pragma once

// Checkpoint file: a key=value text manifest terminated by a line "end",
// then one record per parameter in manifest order:
//   u32 name_length, name bytes, u32 rank, u32 dims[rank], f32 data[numel]
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "genrec/model.hpp"
#include "genrec/tokenizer.hpp"

namespace genrec {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr int kCheckpointFormatVersion = 1;

// FNV-1a over the saved vocabulary file bytes.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string vocab_hash(const Vocab& vocab) {
  std::ostringstream os;
  vocab.save(os);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(os.str())));
  return buf;
}

struct CheckpointInfo {
  GenRecConfig config;
  std::string vocab_hash;
  std::string stage;  // pretrain, finetune or init
  std::size_t epoch = 0;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw Error("checkpoint: truncated record");
  return v;
}

inline std::size_t parse_size(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw Error("checkpoint: manifest missing '" + key + "'");
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(it->second, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != it->second.size()) throw Error("checkpoint: bad value for '" + key + "': " + it->second);
  return std::size_t(v);
}

}  // namespace detail

template <class T>
void save_checkpoint(std::ostream& out, const GenRecModel<T>& model, const CheckpointInfo& info) {
  const auto& c = model.config();
  const auto params = model.parameters();
  out << "format_version=" << kCheckpointFormatVersion << '\n'
      << "vocab_size=" << c.vocab_size << '\n'
      << "num_users=" << c.num_users << '\n'
      << "num_items=" << c.num_items << '\n'
      << "d_model=" << c.d_model << '\n'
      << "num_encoder_layers=" << c.num_encoder_layers << '\n'
      << "num_decoder_layers=" << c.num_decoder_layers << '\n'
      << "num_heads=" << c.num_heads << '\n'
      << "ffn_dim=" << c.ffn_dim << '\n'
      << "max_length=" << c.max_length << '\n'
      << "dropout=" << detail::format_double(c.dropout) << '\n'
      << "encoder_positions=" << to_string(c.encoder_positions) << '\n'
      << "vocab_hash=" << info.vocab_hash << '\n'
      << "stage=" << info.stage << '\n'
      << "epoch=" << info.epoch << '\n'
      << "num_tensors=" << params.size() << '\n';
  for (const auto* p : params) out << "tensor=" << p->name << '\n';
  out << "end\n";
  for (const auto* p : params) {
    detail::put_u32(out, std::uint32_t(p->name.size()));
    out.write(p->name.data(), std::streamsize(p->name.size()));
    detail::put_u32(out, std::uint32_t(p->value.shape.size()));
    for (auto d : p->value.shape) detail::put_u32(out, std::uint32_t(d));
    std::vector<float> buf(p->value.data.begin(), p->value.data.end());
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
  }
  if (!out) throw Error("checkpoint: write failed");
}

struct LoadedCheckpoint {
  CheckpointInfo info;
  GenRecModel<float> model;
};

inline LoadedCheckpoint load_checkpoint(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::vector<std::string> names;
  std::string line;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("checkpoint: malformed manifest line: " + line);
    auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "tensor") {
      names.push_back(value);
    } else if (!kv.emplace(key, value).second) {
      throw Error("checkpoint: duplicate manifest key '" + key + "'");
    }
  }
  if (!ended) throw Error("checkpoint: manifest not terminated");
  if (detail::parse_size(kv, "format_version") != std::size_t(kCheckpointFormatVersion)) {
    throw Error("checkpoint: unsupported format_version " + kv["format_version"]);
  }

  CheckpointInfo info;
  auto& c = info.config;
  c.vocab_size = detail::parse_size(kv, "vocab_size");
  c.num_users = detail::parse_size(kv, "num_users");
  c.num_items = detail::parse_size(kv, "num_items");
  c.d_model = detail::parse_size(kv, "d_model");
  c.num_encoder_layers = detail::parse_size(kv, "num_encoder_layers");
  c.num_decoder_layers = detail::parse_size(kv, "num_decoder_layers");
  c.num_heads = detail::parse_size(kv, "num_heads");
  c.ffn_dim = detail::parse_size(kv, "ffn_dim");
  c.max_length = detail::parse_size(kv, "max_length");
  if (!kv.count("dropout") || !kv.count("encoder_positions") || !kv.count("vocab_hash") || !kv.count("stage")) {
    throw Error("checkpoint: manifest incomplete");
  }
  c.dropout = std::stod(kv["dropout"]);
  c.encoder_positions = parse_position_mode(kv["encoder_positions"]);
  info.vocab_hash = kv["vocab_hash"];
  info.stage = kv["stage"];
  info.epoch = detail::parse_size(kv, "epoch");

  LoadedCheckpoint out{info, GenRecModel<float>(c)};
  auto params = out.model.parameters();
  if (detail::parse_size(kv, "num_tensors") != params.size() || names.size() != params.size()) {
    throw Error("checkpoint: tensor count does not match the configuration");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (names[i] != p.name) throw Error("checkpoint: expected tensor '" + p.name + "', manifest has '" + names[i] + "'");
    const auto len = detail::get_u32(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error("checkpoint: truncated record");
    if (name != p.name) throw Error("checkpoint: record '" + name + "' out of order (expected '" + p.name + "')");
    const auto rank = detail::get_u32(in);
    nn::Shape shape(rank);
    for (auto& d : shape) d = detail::get_u32(in);
    if (shape != p.value.shape) {
      throw ShapeError("checkpoint: tensor '" + name + "' has shape " + nn::shape_str(shape) + ", expected " +
                       nn::shape_str(p.value.shape));
    }
    if (!in.read(reinterpret_cast<char*>(p.value.data.data()), std::streamsize(p.value.data.size() * sizeof(float)))) {
      throw Error("checkpoint: truncated data for '" + name + "'");
    }
    if (!p.value.all_finite()) throw Error("checkpoint: tensor '" + name + "' contains non-finite values");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw Error("checkpoint: trailing bytes after last record");
  return out;
}

inline void save_checkpoint_file(const std::string& path, const GenRecModel<float>& model, const CheckpointInfo& info) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  save_checkpoint(out, model, info);
}

inline LoadedCheckpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint '" + path + "'");
  try {
    return load_checkpoint(in);
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

}  // namespace genrec
