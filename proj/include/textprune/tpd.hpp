// SPDX-License-Identifier: Apache-2.0
//
// Text-aware patch detection: score patch tokens against the text [CLS]
// embedding, keep the top-K, and fold the remaining tokens into one fused
// token with softmax weights over their scores.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "textprune/autodiff.hpp"
#include "textprune/nn.hpp"

namespace textprune {

// MLP 2d -> d -> d/2 -> 1 with GELU between layers; sigmoid applied by the
// scorer.
template <typename T>
struct DetectorParams {
  Linear<T> hidden1;
  Linear<T> hidden2;
  Linear<T> classifier;

  std::size_t dim() const { return hidden1.out_features(); }
};

template <typename T>
DetectorParams<T> init_detector(std::size_t dim, Rng& rng);

template <typename T>
void collect_parameters(const std::string& prefix, const DetectorParams<T>& p, ParameterList<T>& out);

// Alignment scores a_i in (0, 1), shape n x 1.
template <typename T>
Tensor<T> score_patches(const Tensor<T>& patch_tokens, const Tensor<T>& text_cls, const DetectorParams<T>& params);

// Row-aligned variant: row i of `patch_rows` is scored against row i of
// `text_rows`. Used to score a whole batch in one pass.
template <typename T>
Tensor<T> score_patch_rows(const Tensor<T>& patch_rows, const Tensor<T>& text_rows, const DetectorParams<T>& params);

struct SelectionResult {
  std::vector<std::size_t> kept;        // ascending
  std::vector<std::size_t> undetected;  // ascending
  std::size_t k = 0;
  double keep_ratio = 1.0;

  bool bypass() const { return undetected.empty(); }
};

// K = clamp(floor(n * ratio), 1, n - 1) for ratio in (0, 1); ratio == 1 keeps
// every patch.
std::size_t keep_count(std::size_t n, double keep_ratio);

// Keeps the K highest scores; equal scores prefer the lower index.
SelectionResult select_topk(std::span<const double> scores, double keep_ratio);

template <typename T>
SelectionResult select_topk(const Tensor<T>& scores, double keep_ratio);

// v_f = sum_i softmax(a_undetected)_i * v_{z_i}, shape 1 x d.
template <typename T>
Tensor<T> fuse_undetected(const Tensor<T>& patch_tokens, const Tensor<T>& scores, const SelectionResult& sel);

// [cls, kept patches in index order, v_f]; with a bypass selection the
// output is [cls, all patches].
template <typename T>
Tensor<T> reconstruct_sequence(const Tensor<T>& cls_token, const Tensor<T>& patch_tokens, const SelectionResult& sel,
                               const Tensor<T>& fused);

// Mean over heads of the [CLS] row's attention to each patch, renormalized to
// sum to 1 over patches. Returned as constants (n x 1).
template <typename T>
Tensor<T> attention_fallback_scores(const AttentionRecord<T>& attn);

}  // namespace textprune
