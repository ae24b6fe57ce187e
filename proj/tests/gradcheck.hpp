#pragma once

// Central finite-difference checks of tape gradients.
//
// Each op under test maps input tensors to an output Y; the checked scalar
// is L = sum(Y * R) for a fixed random R. The finite-difference side reduces
// L in double so the only rounding is in Y itself. Error per input tensor is
// norm-wise: max|analytic - numeric| / max(max|numeric|, max|analytic|, floor),
// floor = 1e-6 for single ops. For the full model the floor is 1% of the
// largest gradient anywhere in the model: some tensors (attention key biases)
// have an exactly zero true gradient, since softmax ignores a constant shift,
// and their finite differences are pure rounding noise.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "genrec/autograd.hpp"
#include "genrec/model.hpp"

namespace gradcheck {

using namespace genrec;

template <class T>
using Build = std::function<nn::Var<T>(nn::Tape<T>&, const std::vector<nn::Var<T>>&)>;

struct Result {
  double max_error = 0.0;
  std::string worst;  // which input / parameter
  void merge(double err, const std::string& what) {
    if (err > max_error || worst.empty()) {
      max_error = std::max(max_error, err);
      worst = what;
    }
  }
};

inline double normwise(const std::vector<double>& a, const std::vector<double>& n, double floor = 1e-6) {
  double diff = 0, scale = floor;
  for (std::size_t k = 0; k < a.size(); ++k) {
    diff = std::max(diff, std::abs(a[k] - n[k]));
    scale = std::max({scale, std::abs(a[k]), std::abs(n[k])});
  }
  return diff / scale;
}

template <class T>
nn::Tensor<T> random_tensor(nn::Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  nn::Tensor<T> t(std::move(shape));
  nn::fill_normal(t, rng, stddev);
  return t;
}

template <class T>
double weighted_sum(const nn::Tensor<T>& y, const nn::Tensor<double>& r) {
  double s = 0;
  for (std::size_t k = 0; k < y.size(); ++k) s += double(y.data[k]) * r.data[k];
  return s;
}

// Checks d/d(inputs) of sum(build(inputs) * R). `R` is drawn from `rng` once
// the output shape is known.
template <class T>
Result check_op(const std::string& name, std::vector<nn::Tensor<T>> inputs, const Build<T>& build, double eps,
                std::mt19937_64& rng) {
  nn::Tensor<double> r;
  std::vector<std::vector<double>> analytic;
  {
    nn::Tape<T> tape;
    std::vector<nn::Var<T>> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    auto y = build(tape, vars);
    r = random_tensor<double>(y.value().shape, rng);
    auto loss = nn::sum(nn::mul(y, tape.constant(r.cast<T>())));
    // Use R as stored in T so both sides see the same weights.
    r = r.cast<T>().template cast<double>();
    tape.backward(loss);
    for (const auto& v : vars) {
      const auto& g = tape.grad(v.id);
      analytic.emplace_back(g.data.begin(), g.data.end());
    }
  }
  auto eval = [&]() {
    nn::Tape<T> tape;
    std::vector<nn::Var<T>> vars;
    for (const auto& x : inputs) vars.push_back(tape.constant(x));
    return weighted_sum(build(tape, vars).value(), r);
  };
  Result res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> numeric(inputs[i].size());
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const T orig = inputs[i].data[k];
      inputs[i].data[k] = T(double(orig) + eps);
      const double up = eval();
      inputs[i].data[k] = T(double(orig) - eps);
      const double down = eval();
      inputs[i].data[k] = orig;
      numeric[k] = (up - down) / (2 * eps);
    }
    res.merge(normwise(analytic[i], numeric), name + " input " + std::to_string(i));
  }
  return res;
}

// Mean cross-entropy of logits rows against labels (kPad ignored), in double.
template <class T>
double cross_entropy_double(const nn::Tensor<T>& logits, const std::vector<TokenId>& labels) {
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kPad) continue;
    const auto row = logits.row(i);
    double mx = -1e300;
    for (T v : row) mx = std::max(mx, double(v));
    double z = 0;
    for (T v : row) z += std::exp(double(v) - mx);
    total += mx + std::log(z) - double(row[std::size_t(labels[i])]);
    ++count;
  }
  return total / double(count);
}

// Finite-difference check of every parameter of a model under the
// teacher-forced training loss (no dropout).
template <class T>
Result check_model(GenRecModel<T>& model, const TokenSequence& input, const std::vector<TokenId>& target, double eps) {
  model.zero_grad();
  auto params = model.parameters();
  {
    nn::Tape<T> tape;
    auto loss = model.training_loss(tape, input, target);
    tape.backward(loss);
    tape.accumulate_param_grads(params);
  }
  const std::vector<TokenId> prefix(target.begin(), target.end() - 1);
  const std::vector<TokenId> labels(target.begin() + 1, target.end());
  // Finite differences run on a double copy of the same weights so the
  // oracle side carries no 32-bit rounding noise.
  GenRecModel<double> mirror(model.config());
  auto mparams = mirror.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) mparams[i]->value = params[i]->value.template cast<double>();
  auto eval = [&]() {
    nn::Tape<double> tape;
    auto memory = mirror.encode(tape, mirror.embed(tape, input), input.true_length);
    auto logits = mirror.decode(tape, prefix, memory, input.true_length);
    return cross_entropy_double(logits.value(), labels);
  };
  std::vector<std::vector<double>> analytic, numeric;
  double global = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& a = analytic.emplace_back(params[i]->grad.data.begin(), params[i]->grad.data.end());
    auto& n = numeric.emplace_back(params[i]->value.size());
    auto& w = mparams[i]->value.data;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double orig = w[k];
      w[k] = orig + eps;
      const double up = eval();
      w[k] = orig - eps;
      const double down = eval();
      w[k] = orig;
      n[k] = (up - down) / (2 * eps);
      global = std::max({global, std::abs(n[k]), std::abs(a[k])});
    }
  }
  Result res;
  for (std::size_t i = 0; i < params.size(); ++i)
    res.merge(normwise(analytic[i], numeric[i], std::max(1e-6, 1e-2 * global)), params[i]->name);
  return res;
}

// Every differentiable op on small random inputs (<= 32 elements each).
template <class T>
std::vector<Result> check_all_ops(std::uint64_t seed, double eps) {
  using V = nn::Var<T>;
  using Vs = std::vector<V>;
  std::mt19937_64 rng(seed);
  auto dim = [&](std::size_t lo, std::size_t hi) { return lo + std::size_t(rng() % (hi - lo + 1)); };
  auto rt = [&](nn::Shape s, double sd = 1.0) { return random_tensor<T>(std::move(s), rng, sd); };
  std::vector<Result> out;

  const std::size_t m = dim(1, 4), k = dim(1, 5), n = dim(1, 6);
  out.push_back(check_op<T>("matmul", {rt({m, k}), rt({k, n})}, [](nn::Tape<T>&, const Vs& v) {
    return nn::matmul(v[0], v[1]);
  }, eps, rng));
  out.push_back(check_op<T>("matmul_nt", {rt({m, k}), rt({n, k})}, [](nn::Tape<T>&, const Vs& v) {
    return nn::matmul_nt(v[0], v[1]);
  }, eps, rng));
  out.push_back(check_op<T>("add", {rt({m, n}), rt({m, n})}, [](nn::Tape<T>&, const Vs& v) {
    return nn::add(v[0], v[1]);
  }, eps, rng));
  out.push_back(check_op<T>("add_bias", {rt({m, n}), rt({n})}, [](nn::Tape<T>&, const Vs& v) {
    return nn::add_bias(v[0], v[1]);
  }, eps, rng));
  out.push_back(check_op<T>("mul", {rt({m, n}), rt({m, n})}, [](nn::Tape<T>&, const Vs& v) {
    return nn::mul(v[0], v[1]);
  }, eps, rng));
  const T factor = T(std::normal_distribution<double>(0, 2)(rng));
  out.push_back(check_op<T>("scale", {rt({m, n})}, [factor](nn::Tape<T>&, const Vs& v) {
    return nn::scale(v[0], factor);
  }, eps, rng));
  const std::size_t sn = dim(2, 6);
  out.push_back(check_op<T>("softmax", {rt({m, sn}, 2.0)}, [](nn::Tape<T>&, const Vs& v) {
    return nn::softmax(v[0]);
  }, eps, rng));
  auto allowed = std::make_shared<std::vector<std::uint8_t>>(m * sn);
  for (auto& a : *allowed) a = std::uint8_t(rng() % 3 != 0);
  for (std::size_t i = 0; i < m; ++i) (*allowed)[i * sn + (rng() % sn)] = 1;
  if (m > 1) std::fill(allowed->begin(), allowed->begin() + std::ptrdiff_t(sn), 0);  // one fully masked row
  out.push_back(check_op<T>("masked_softmax", {rt({m, sn}, 2.0)}, [allowed](nn::Tape<T>&, const Vs& v) {
    return nn::masked_softmax(v[0], std::shared_ptr<const std::vector<std::uint8_t>>(allowed));
  }, eps, rng));
  // Width 2 is degenerate: the normalized row is (-1, 1) up to eps, so its
  // gradient is pure rounding noise in 32-bit.
  const std::size_t ln = dim(3, 8);
  out.push_back(check_op<T>("layer_norm", {rt({m, ln}), rt({ln}), rt({ln})}, [](nn::Tape<T>&, const Vs& v) {
    return nn::layer_norm(v[0], v[1], v[2]);
  }, eps, rng));
  out.push_back(check_op<T>("gelu", {rt({m, n}, 2.0)}, [](nn::Tape<T>&, const Vs& v) { return nn::gelu(v[0]); },
                            eps, rng));
  const std::size_t rows = dim(2, 6), d = dim(1, 4), len = dim(1, 6);
  std::vector<std::int64_t> ids(len);
  for (auto& id : ids) id = std::int64_t(rng() % (rows + 1)) - 1;  // -1 is a zero row
  out.push_back(check_op<T>("embedding", {rt({rows, d})}, [ids](nn::Tape<T>&, const Vs& v) {
    return nn::embedding(v[0], ids);
  }, eps, rng));
  const std::size_t w0 = dim(1, 3), w1 = dim(1, 3), w2 = dim(1, 3);
  out.push_back(check_op<T>("concat_cols", {rt({m, w0}), rt({m, w1}), rt({m, w2})}, [](nn::Tape<T>&, const Vs& v) {
    return nn::concat_cols(v);
  }, eps, rng));
  const std::size_t c0 = rng() % n, c1 = c0 + 1 + rng() % (n - c0);
  out.push_back(check_op<T>("slice_cols", {rt({m, n})}, [c0, c1](nn::Tape<T>&, const Vs& v) {
    return nn::slice_cols(v[0], c0, c1);
  }, eps, rng));
  const std::size_t r0 = rng() % m, r1 = r0 + 1 + rng() % (m - r0);
  out.push_back(check_op<T>("slice_rows", {rt({m, n})}, [r0, r1](nn::Tape<T>&, const Vs& v) {
    return nn::slice_rows(v[0], r0, r1);
  }, eps, rng));
  out.push_back(check_op<T>("sum", {rt({m, n})}, [](nn::Tape<T>&, const Vs& v) { return nn::sum(v[0]); }, eps, rng));
  const std::size_t classes = dim(2, 8);
  // With more than one row, row 0 carries the ignored label 0.
  const std::int64_t ignore = m > 1 ? 0 : -100;
  std::vector<std::int64_t> targets(m);
  for (std::size_t i = 0; i < m; ++i) targets[i] = 1 + std::int64_t(rng() % (classes - 1));
  if (m > 1) targets[0] = 0;
  out.push_back(check_op<T>("cross_entropy", {rt({m, classes}, 2.0)}, [targets, ignore](nn::Tape<T>&, const Vs& v) {
    return nn::cross_entropy(v[0], targets, ignore);
  }, eps, rng));
  const std::uint64_t dseed = rng();
  out.push_back(check_op<T>("dropout", {rt({m, n})}, [dseed](nn::Tape<T>&, const Vs& v) {
    std::mt19937_64 r(dseed);
    return nn::dropout(v[0], 0.3, r);
  }, eps, rng));
  return out;
}

// Tiny 2-layer d=8 model with weights scaled up so every gradient is well
// above rounding noise.
template <class T>
GenRecModel<T> tiny_model(std::uint64_t seed, std::size_t vocab, std::size_t users, std::size_t items,
                          std::size_t max_length) {
  GenRecConfig c;
  c.vocab_size = vocab;
  c.num_users = users;
  c.num_items = items;
  c.d_model = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.num_encoder_layers = 2;
  c.num_decoder_layers = 2;
  c.max_length = max_length;
  c.dropout = 0.0;
  GenRecModel<T> model(c, seed);
  std::mt19937_64 rng(seed + 1000);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto* p : model.parameters()) {
    const bool gain = p->name.ends_with(".gain");
    const double sd = p->value.rank() == 1 ? 0.3 : 0.5;
    for (auto& v : p->value.data) v = T((gain ? 1.0 : 0.0) + sd * nd(rng));
  }
  return model;
}

}  // namespace gradcheck
