#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ilu/models.hpp"
#include "ilu/numcore.hpp"

namespace ilu::testing {

inline ModelConfig small_mlp(std::size_t in = 5, std::size_t hidden = 7, std::size_t layers = 2,
                             std::size_t classes = 3) {
  ModelConfig c;
  c.family = ModelFamily::kMlp;
  c.input_dim = in;
  c.hidden_dim = hidden;
  c.layers = layers;
  c.classes = classes;
  return c;
}

// 2 blocks, 2 heads, hidden 8, vocab 10, context 6: 1978 parameters.
inline ModelConfig small_lm(std::size_t vocab = 10, std::size_t hidden = 8, std::size_t layers = 2,
                            std::size_t heads = 2, std::size_t context = 6) {
  ModelConfig c;
  c.family = ModelFamily::kTinyLm;
  c.input_dim = vocab;
  c.hidden_dim = hidden;
  c.layers = layers;
  c.heads = heads;
  c.context = context;
  return c;
}

inline Batch random_lm_batch(const ModelConfig& c, std::size_t examples, std::size_t seq_len,
                             RngStream rng, bool sparse_targets = false) {
  Batch b;
  b.examples = examples;
  b.seq_len = seq_len;
  for (std::size_t i = 0; i < examples * seq_len; ++i) {
    b.tokens.push_back(static_cast<std::int32_t>(rng.below(c.input_dim)));
  }
  for (std::size_t i = 0; i < examples * seq_len; ++i) {
    const bool skip = sparse_targets && (i % 3 == 0);
    b.targets.push_back(skip ? kIgnoreTarget : static_cast<std::int32_t>(rng.below(c.input_dim)));
  }
  return b;
}

inline Batch random_mlp_batch(const ModelConfig& c, std::size_t examples, RngStream rng) {
  Batch b;
  b.examples = examples;
  b.seq_len = 1;
  b.features = Tensor::matrix(examples, c.input_dim);
  for (double& v : b.features.data()) v = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < examples; ++i) {
    b.targets.push_back(static_cast<std::int32_t>(rng.below(c.classes)));
  }
  return b;
}

inline Tensor random_tensor(std::size_t rows, std::size_t cols, RngStream rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

/// Evaluate f at a flat parameter vector with the layout of `like`.
template <typename F>
double at_flat(const ParameterVector& like, std::span<const double> flat, F&& f) {
  ParameterVector p(like.layout_ptr(), std::vector<double>(flat.begin(), flat.end()));
  return f(p);
}

}  // namespace ilu::testing
