#pragma once

// Encoder-decoder Transformer with composite input embeddings:
//   X_j = token[S_j] + pos[j] + (user_id[u] | item_id[i] | 0)
// Pre-norm layers, learned positions, exact GELU, no tied output projection.

#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "genrec/autograd.hpp"
#include "genrec/tokenizer.hpp"

namespace genrec {

// How encoder tokens index the positional table. Forward uses the token
// index j; Reverse counts back from the last real token, so [END] is always
// position 0 and an appended [MASK] always position 1. Decoder positions are
// always forward.
enum class PositionMode { Forward, Reverse };

inline const char* to_string(PositionMode m) { return m == PositionMode::Forward ? "forward" : "reverse"; }

inline PositionMode parse_position_mode(const std::string& s) {
  if (s == "forward") return PositionMode::Forward;
  if (s == "reverse") return PositionMode::Reverse;
  throw Error("unknown position mode '" + s + "' (expected forward or reverse)");
}

struct GenRecConfig {
  std::size_t vocab_size = 0;
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t d_model = 64;
  std::size_t num_encoder_layers = 2;
  std::size_t num_decoder_layers = 2;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_length = kDefaultMaxLength;
  double dropout = 0.1;
  PositionMode encoder_positions = PositionMode::Reverse;

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error("invalid model config: " + msg); };
    if (vocab_size < 1 || num_users < 1 || num_items < 1) fail("vocab/user/item counts must be >= 1");
    if (d_model < 1 || num_heads < 1 || ffn_dim < 1) fail("dimensions must be >= 1");
    if (num_encoder_layers < 1 || num_decoder_layers < 1) fail("layer counts must be >= 1");
    if (d_model % num_heads != 0) fail("d_model must be divisible by num_heads");
    if (max_length < 4) fail("max_length must be >= 4");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  }

  friend bool operator==(const GenRecConfig&, const GenRecConfig&) = default;
};

// Exact scalar parameter count for a configuration.
inline std::size_t param_count(const GenRecConfig& c) {
  const std::size_t d = c.d_model, f = c.ffn_dim;
  const std::size_t embeddings = (c.vocab_size + c.max_length + c.num_users + c.num_items) * d;
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t norm = 2 * d;
  const std::size_t encoder_layer = attention + ffn + 2 * norm;
  const std::size_t decoder_layer = 2 * attention + ffn + 3 * norm;
  return embeddings + c.num_encoder_layers * encoder_layer + c.num_decoder_layers * decoder_layer + 2 * norm +
         d * c.vocab_size;
}

template <class T>
class GenRecModel {
 public:
  using Var = nn::Var<T>;
  using Tape = nn::Tape<T>;
  using Param = nn::Parameter<T>;
  using Mask = std::shared_ptr<const std::vector<std::uint8_t>>;

  struct Norm {
    Param *gain, *bias;
  };
  struct Attention {
    Param *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  };
  struct FeedForward {
    Param *w1, *b1, *w2, *b2;
  };
  struct EncoderLayer {
    Norm ln1;
    Attention self_attn;
    Norm ln2;
    FeedForward ffn;
  };
  struct DecoderLayer {
    Norm ln1;
    Attention self_attn;
    Norm ln2;
    Attention cross_attn;
    Norm ln3;
    FeedForward ffn;
  };

  explicit GenRecModel(GenRecConfig config, std::uint64_t seed = 0) : config_(config) {
    config_.validate();
    build();
    std::mt19937_64 rng(seed);
    init(rng);
  }

  GenRecModel(const GenRecModel& other) : config_(other.config_) {
    build();
    auto dst = parameters();
    auto src = other.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
  }
  GenRecModel& operator=(const GenRecModel&) = delete;

  const GenRecConfig& config() const noexcept { return config_; }

  // All parameters in a fixed order (the checkpoint order).
  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    for (auto& p : storage_) out.push_back(&p);
    return out;
  }
  std::vector<const Param*> parameters() const {
    std::vector<const Param*> out;
    for (auto& p : storage_) out.push_back(&p);
    return out;
  }

  Param& token_table() { return *token_; }
  Param& pos_table() { return *pos_; }
  Param& user_table() { return *user_; }
  Param& item_table() { return *item_; }
  Param& output_projection() { return *out_proj_; }
  const Param& token_table() const { return *token_; }
  const Param& pos_table() const { return *pos_; }
  const Param& user_table() const { return *user_; }
  const Param& item_table() const { return *item_; }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (auto& p : storage_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : storage_) p.zero_grad();
  }

  // Composite encoder input embedding of a (possibly padded) token sequence.
  Var embed(Tape& tape, const TokenSequence& seq) const {
    const std::size_t n = seq.ids.size();
    if (seq.tags.size() != n) throw ShapeError("embed: ids and tags differ in length");
    if (seq.true_length > n) throw ShapeError("embed: true_length exceeds sequence length");
    if (n > config_.max_length) throw Error("embed: sequence length " + std::to_string(n) + " exceeds max_length");
    std::vector<std::int64_t> tokens(n), positions(n), users(n, -1), items(n, -1);
    for (std::size_t j = 0; j < n; ++j) {
      tokens[j] = seq.ids[j];
      positions[j] = std::int64_t(j);
      if (config_.encoder_positions == PositionMode::Reverse && j < seq.true_length) {
        positions[j] = std::int64_t(seq.true_length - 1 - j);
      }
      const auto& tag = seq.tags[j];
      if (tag.kind == EntityTag::Kind::User) {
        if (tag.index < 0) throw Error("embed: negative user index");
        users[j] = tag.index;
      } else if (tag.kind == EntityTag::Kind::Item) {
        if (tag.index < 0) throw Error("embed: negative item index");
        items[j] = tag.index;
      }
    }
    auto x = nn::add(nn::embedding(tape.param(*token_), std::move(tokens)),
                     nn::embedding(tape.param(*pos_), std::move(positions)));
    x = nn::add(x, nn::embedding(tape.param(*user_), std::move(users)));
    return nn::add(x, nn::embedding(tape.param(*item_), std::move(items)));
  }

  // Bidirectional encoder; keys at positions >= true_length are masked.
  template <class Rng = std::mt19937_64>
  Var encode(Tape& tape, Var x, std::size_t true_length, Rng* rng = nullptr) const {
    const std::size_t n = x.value().rows();
    if (true_length > n) throw Error("encode: true_length exceeds sequence length");
    auto mask = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < true_length; ++j) (*mask)[i * n + j] = 1;
    Mask m = mask;
    for (const auto& layer : encoder_) {
      auto h = norm(tape, layer.ln1, x);
      x = nn::add(x, attention(tape, layer.self_attn, h, h, m, rng));
      x = nn::add(x, feed_forward(tape, layer.ffn, norm(tape, layer.ln2, x), rng));
    }
    return norm(tape, enc_norm_, x);
  }

  Var encode(Tape& tape, const TokenSequence& seq) const {
    return encode<std::mt19937_64>(tape, embed(tape, seq), seq.true_length, nullptr);
  }

  // Encoder output detached from any tape, with per-layer cross-attention
  // keys and values computed once.
  struct Memory {
    nn::Tensor<T> states;
    std::size_t length = 0;
    std::vector<std::pair<nn::Tensor<T>, nn::Tensor<T>>> cross_kv;
  };

  Memory precompute_memory(const TokenSequence& input) const {
    Tape tape;
    auto states = encode(tape, input);
    Memory m;
    m.states = states.value();
    m.length = input.true_length;
    for (const auto& layer : decoder_) {
      m.cross_kv.emplace_back(linear(tape, states, layer.cross_attn.wk, layer.cross_attn.bk).value(),
                              linear(tape, states, layer.cross_attn.wv, layer.cross_attn.bv).value());
    }
    return m;
  }

  // Next-token logits [prefix_len x vocab] for a decoder prefix starting with
  // [BEG]. Causal self-attention; cross-attention over the first
  // `encoder_length` rows of `memory`.
  template <class Rng = std::mt19937_64>
  Var decode(Tape& tape, std::span<const TokenId> prefix, Var memory, std::size_t encoder_length,
             Rng* rng = nullptr) const {
    return decode_impl(tape, prefix, memory, encoder_length, rng, nullptr);
  }

  // Inference-only decode against a precomputed memory.
  Var decode_cached(Tape& tape, std::span<const TokenId> prefix, const Memory& memory) const {
    return decode_impl<std::mt19937_64>(tape, prefix, tape.constant(memory.states), memory.length, nullptr,
                                        &memory.cross_kv);
  }

  // Teacher-forced mean cross-entropy of `target` ([BEG] ... [END]) given the
  // encoder input.
  template <class Rng = std::mt19937_64>
  Var training_loss(Tape& tape, const TokenSequence& input, std::span<const TokenId> target, Rng* rng = nullptr) const {
    if (target.size() < 2) throw Error("training_loss: empty target");
    auto memory = encode(tape, embed(tape, input), input.true_length, rng);
    auto logits = decode(tape, target.first(target.size() - 1), memory, input.true_length, rng);
    std::vector<std::int64_t> labels(target.begin() + 1, target.end());
    return nn::cross_entropy(logits, std::move(labels), std::int64_t(kPad));
  }

 private:
  Param* make(const std::string& name, nn::Shape shape) {
    storage_.emplace_back(name, std::move(shape));
    return &storage_.back();
  }

  Norm make_norm(const std::string& prefix) {
    auto* gain = make(prefix + ".gain", {config_.d_model});
    return {gain, make(prefix + ".bias", {config_.d_model})};
  }

  Attention make_attention(const std::string& p) {
    const std::size_t d = config_.d_model;
    Attention a{};
    a.wq = make(p + ".wq", {d, d});
    a.bq = make(p + ".bq", {d});
    a.wk = make(p + ".wk", {d, d});
    a.bk = make(p + ".bk", {d});
    a.wv = make(p + ".wv", {d, d});
    a.bv = make(p + ".bv", {d});
    a.wo = make(p + ".wo", {d, d});
    a.bo = make(p + ".bo", {d});
    return a;
  }

  FeedForward make_ffn(const std::string& p) {
    const std::size_t d = config_.d_model, f = config_.ffn_dim;
    FeedForward ff{};
    ff.w1 = make(p + ".w1", {d, f});
    ff.b1 = make(p + ".b1", {f});
    ff.w2 = make(p + ".w2", {f, d});
    ff.b2 = make(p + ".b2", {d});
    return ff;
  }

  // Creation order is the checkpoint order.
  void build() {
    const std::size_t d = config_.d_model;
    token_ = make("embed.token", {config_.vocab_size, d});
    pos_ = make("embed.position", {config_.max_length, d});
    user_ = make("embed.user_id", {config_.num_users, d});
    item_ = make("embed.item_id", {config_.num_items, d});
    for (std::size_t l = 0; l < config_.num_encoder_layers; ++l) {
      const auto p = "encoder." + std::to_string(l);
      EncoderLayer L;
      L.ln1 = make_norm(p + ".ln1");
      L.self_attn = make_attention(p + ".self_attn");
      L.ln2 = make_norm(p + ".ln2");
      L.ffn = make_ffn(p + ".ffn");
      encoder_.push_back(L);
    }
    for (std::size_t l = 0; l < config_.num_decoder_layers; ++l) {
      const auto p = "decoder." + std::to_string(l);
      DecoderLayer L;
      L.ln1 = make_norm(p + ".ln1");
      L.self_attn = make_attention(p + ".self_attn");
      L.ln2 = make_norm(p + ".ln2");
      L.cross_attn = make_attention(p + ".cross_attn");
      L.ln3 = make_norm(p + ".ln3");
      L.ffn = make_ffn(p + ".ffn");
      decoder_.push_back(L);
    }
    enc_norm_ = make_norm("encoder.final_norm");
    dec_norm_ = make_norm("decoder.final_norm");
    out_proj_ = make("output.projection", {d, config_.vocab_size});
  }

  template <class Rng>
  void init(Rng& rng) {
    for (auto& p : storage_) {
      if (p.name.ends_with(".gain")) {
        std::fill(p.value.data.begin(), p.value.data.end(), T(1));
      } else if (p.value.rank() == 1) {
        p.value.zero();
      } else {
        nn::fill_normal(p.value, rng, 0.02);
      }
    }
  }

  template <class Rng>
  Var decode_impl(Tape& tape, std::span<const TokenId> prefix, Var memory, std::size_t encoder_length, Rng* rng,
                  const std::vector<std::pair<nn::Tensor<T>, nn::Tensor<T>>>* cross_kv) const {
    const std::size_t n = prefix.size();
    if (n == 0 || prefix[0] != kBeg) throw Error("decode: prefix must start with [BEG]");
    if (n > config_.max_length) throw Error("decode: prefix length " + std::to_string(n) + " exceeds max_length");
    const std::size_t mem_rows = memory.value().rows();
    if (encoder_length > mem_rows) throw Error("decode: encoder_length exceeds encoder states");
    std::vector<std::int64_t> tokens(prefix.begin(), prefix.end()), positions(n);
    for (std::size_t j = 0; j < n; ++j) positions[j] = std::int64_t(j);
    auto x = nn::add(nn::embedding(tape.param(*token_), std::move(tokens)),
                     nn::embedding(tape.param(*pos_), std::move(positions)));

    auto causal = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) (*causal)[i * n + j] = 1;
    auto cross = std::make_shared<std::vector<std::uint8_t>>(n * mem_rows, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < encoder_length; ++j) (*cross)[i * mem_rows + j] = 1;
    Mask causal_mask = causal, cross_mask = cross;

    for (std::size_t l = 0; l < decoder_.size(); ++l) {
      const auto& layer = decoder_[l];
      auto h = norm(tape, layer.ln1, x);
      x = nn::add(x, attention(tape, layer.self_attn, h, h, causal_mask, rng));
      auto q = norm(tape, layer.ln2, x);
      if (cross_kv) {
        const auto& [k, v] = (*cross_kv)[l];
        x = nn::add(x, attention_with_kv(tape, layer.cross_attn, q, tape.constant(k), tape.constant(v), cross_mask, rng));
      } else {
        x = nn::add(x, attention(tape, layer.cross_attn, q, memory, cross_mask, rng));
      }
      x = nn::add(x, feed_forward(tape, layer.ffn, norm(tape, layer.ln3, x), rng));
    }
    x = norm(tape, dec_norm_, x);
    return nn::matmul(x, tape.param(*out_proj_));
  }

  Var norm(Tape& tape, const Norm& n, Var x) const {
    return nn::layer_norm(x, tape.param(*n.gain), tape.param(*n.bias), T(1e-5));
  }

  Var linear(Tape& tape, Var x, const Param* w, const Param* b) const {
    return nn::add_bias(nn::matmul(x, tape.param(*w)), tape.param(*b));
  }

  template <class Rng>
  Var attention(Tape& tape, const Attention& a, Var query_in, Var kv_in, const Mask& mask, Rng* rng) const {
    return attention_with_kv(tape, a, query_in, linear(tape, kv_in, a.wk, a.bk), linear(tape, kv_in, a.wv, a.bv), mask,
                             rng);
  }

  // Multi-head attention given projected keys and values.
  template <class Rng>
  Var attention_with_kv(Tape& tape, const Attention& a, Var query_in, Var k, Var v, const Mask& mask, Rng* rng) const {
    auto q = linear(tape, query_in, a.wq, a.bq);
    const std::size_t heads = config_.num_heads, dh = config_.d_model / heads;
    const T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = nn::slice_cols(q, h * dh, (h + 1) * dh);
      auto kh = nn::slice_cols(k, h * dh, (h + 1) * dh);
      auto vh = nn::slice_cols(v, h * dh, (h + 1) * dh);
      auto p = nn::masked_softmax(nn::scale(nn::matmul_nt(qh, kh), inv_sqrt), mask);
      if (rng) p = nn::dropout(p, config_.dropout, *rng);
      outs.push_back(nn::matmul(p, vh));
    }
    auto o = heads == 1 ? outs[0] : nn::concat_cols(outs);
    return linear(tape, o, a.wo, a.bo);
  }

  template <class Rng>
  Var feed_forward(Tape& tape, const FeedForward& f, Var x, Rng* rng) const {
    auto h = nn::gelu(linear(tape, x, f.w1, f.b1));
    if (rng) h = nn::dropout(h, config_.dropout, *rng);
    return linear(tape, h, f.w2, f.b2);
  }

  GenRecConfig config_;
  std::deque<Param> storage_;
  Param* token_ = nullptr;
  Param* pos_ = nullptr;
  Param* user_ = nullptr;
  Param* item_ = nullptr;
  Param* out_proj_ = nullptr;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Norm enc_norm_;
  Norm dec_norm_;
};

}  // namespace genrec
