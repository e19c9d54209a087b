// SPDX-License-Identifier: Apache-2.0
//
// Transformer building blocks over stacked sequence batches.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "textprune/autodiff.hpp"
#include "textprune/image.hpp"
#include "textprune/rng.hpp"

namespace textprune {

template <typename T>
using ParameterList = std::vector<std::pair<std::string, Tensor<T>>>;

// Several token sequences stacked row-wise. Row 0 of every segment is the
// sequence's [CLS] slot.
template <typename T>
struct SequenceBatch {
  Tensor<T> tokens;
  std::vector<Segment> segments;

  std::size_t count() const { return segments.size(); }
  std::size_t dim() const { return tokens.cols(); }
  std::size_t length(std::size_t i) const { return segments[i].length; }
  // Rows of sequence i as a standalone tensor.
  Tensor<T> sequence(std::size_t i) const;
  // One row per sequence: the [CLS] slots.
  Tensor<T> cls_rows() const;
};

template <typename T>
SequenceBatch<T> single_sequence(Tensor<T> tokens);

// Stacks tensors row-wise, one segment each.
template <typename T>
SequenceBatch<T> stack_sequences(const std::vector<Tensor<T>>& sequences);

// y = x W + b, W stored in x out.
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Tensor<T> operator()(const Tensor<T>& x) const { return add_row(matmul(x, weight), bias); }
  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, gamma, beta); }
};

template <typename T>
struct TransformerLayerParams {
  LayerNormParams<T> norm1;
  Linear<T> query, key, value, output;
  LayerNormParams<T> norm2;
  Linear<T> ffn_in, ffn_out;
};

// Weight init: N(0, 0.02) for projections, zero biases, unit LN gains.
template <typename T>
Linear<T> init_linear(std::size_t in, std::size_t out, Rng& rng);
template <typename T>
LayerNormParams<T> init_layernorm(std::size_t dim);
template <typename T>
TransformerLayerParams<T> init_transformer_layer(std::size_t dim, std::size_t ffn, Rng& rng);
template <typename T>
Tensor<T> init_normal(Shape shape, Rng& rng, double stddev = 0.02);

template <typename T>
void collect_parameters(const std::string& prefix, const Linear<T>& p, ParameterList<T>& out);
template <typename T>
void collect_parameters(const std::string& prefix, const LayerNormParams<T>& p, ParameterList<T>& out);
template <typename T>
void collect_parameters(const std::string& prefix, const TransformerLayerParams<T>& p, ParameterList<T>& out);

// Pre-norm layer: x + Attn(LN(x)), then + FFN(LN(.)) with GELU.
// `capture` receives the per-segment attention probabilities when non-null.
template <typename T>
SequenceBatch<T> transformer_layer(const SequenceBatch<T>& seq, const TransformerLayerParams<T>& params,
                                   std::size_t heads, std::vector<AttentionRecord<T>>* capture = nullptr);

// ---- patch embedding -----------------------------------------------------------

struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t patch = 0;

  std::size_t count() const { return rows * cols; }
};

PatchGrid patch_grid(std::size_t width, std::size_t height, std::size_t patch);

template <typename T>
struct PatchEmbedParams {
  Linear<T> projection;  // (P*P*C) x d
  Tensor<T> cls;         // 1 x d
  Tensor<T> positions;   // (n + 1) x d
};

// Flattened patch pixels in [0, 1], row-major grid order: n x (P*P*C).
template <typename T>
Tensor<T> patchify(const Image& image, std::size_t patch);

// [CLS] + projected patches, each summed with its positional embedding.
template <typename T>
SequenceBatch<T> patch_embed(std::span<const Image* const> images, std::size_t patch, const PatchEmbedParams<T>& params);

// ---- text ----------------------------------------------------------------------

// Word-level vocabulary over the synthetic caption language.
class Vocabulary {
 public:
  static constexpr std::int32_t kCls = 0;
  static constexpr std::int32_t kPad = 1;
  static constexpr std::int32_t kUnk = 2;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  std::size_t size() const { return id_to_word_.size(); }
  std::int32_t id(const std::string& word) const;
  const std::string& word(std::int32_t id) const;
  // Lowercases and splits on anything that is not a letter or digit.
  std::vector<std::int32_t> encode(const std::string& text) const;

 private:
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, std::int32_t> word_to_id_;
};

template <typename T>
struct TextEncoderParams {
  Tensor<T> token_embedding;  // |V| x d
  Tensor<T> positions;        // (max_len + 1) x d
  std::vector<TransformerLayerParams<T>> layers;
  LayerNormParams<T> norm;
};

// Encodes each id list as [CLS, ids...]. Ids outside the table map to [UNK].
template <typename T>
SequenceBatch<T> encode_text(const std::vector<std::vector<std::int32_t>>& ids, const TextEncoderParams<T>& params,
                             std::size_t heads, std::size_t max_len);

}  // namespace textprune
