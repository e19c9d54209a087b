// SPDX-License-Identifier: Apache-2.0

#include "textprune/tpd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace textprune {

template <typename T>
DetectorParams<T> init_detector(std::size_t dim, Rng& rng) {
  if (dim < 2 || dim % 2 != 0) throw Error("detector width must be even, got " + std::to_string(dim));
  return DetectorParams<T>{init_linear<T>(2 * dim, dim, rng), init_linear<T>(dim, dim / 2, rng),
                           init_linear<T>(dim / 2, 1, rng)};
}

template <typename T>
void collect_parameters(const std::string& prefix, const DetectorParams<T>& p, ParameterList<T>& out) {
  collect_parameters(prefix + ".hidden1", p.hidden1, out);
  collect_parameters(prefix + ".hidden2", p.hidden2, out);
  collect_parameters(prefix + ".classifier", p.classifier, out);
}

template <typename T>
Tensor<T> score_patch_rows(const Tensor<T>& patch_rows, const Tensor<T>& text_rows, const DetectorParams<T>& params) {
  const std::size_t d = params.dim();
  if (patch_rows.cols() != d || text_rows.cols() != d || patch_rows.rows() != text_rows.rows()) {
    throw Error("score_patches: patch rows " + shape_to_string(patch_rows.shape()) + " and text rows " +
                shape_to_string(text_rows.shape()) + " do not match detector width " + std::to_string(d));
  }
  auto joint = concat(std::vector<Tensor<T>>{patch_rows, text_rows}, 1);
  auto h = gelu(params.hidden2(gelu(params.hidden1(joint))));
  return sigmoid(params.classifier(h));
}

template <typename T>
Tensor<T> score_patches(const Tensor<T>& patch_tokens, const Tensor<T>& text_cls, const DetectorParams<T>& params) {
  if (text_cls.numel() != params.dim()) {
    throw Error("score_patches: text [CLS] has " + std::to_string(text_cls.numel()) + " values, detector width is " +
                std::to_string(params.dim()));
  }
  auto cls_row = text_cls.rank() == 2 ? text_cls : reshape(text_cls, {1, text_cls.numel()});
  std::vector<std::size_t> repeat(patch_tokens.rows(), 0);
  return score_patch_rows(patch_tokens, gather_rows(cls_row, repeat), params);
}

std::size_t keep_count(std::size_t n, double keep_ratio) {
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0) throw Error("keeping ratio must lie in (0, 1], got " + std::to_string(keep_ratio));
  if (keep_ratio == 1.0) return n;
  if (n < 2) throw Error("patch selection with keeping ratio < 1 needs at least 2 patches");
  // Small slack so ratios like 0.3 * 10 do not floor to 2.
  const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * keep_ratio + 1e-9));
  return std::clamp<std::size_t>(k, 1, n - 1);
}

SelectionResult select_topk(std::span<const double> scores, double keep_ratio) {
  const std::size_t n = scores.size();
  SelectionResult sel;
  sel.keep_ratio = keep_ratio;
  sel.k = keep_count(n, keep_ratio);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(sel.k), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  std::vector<bool> keep(n, false);
  for (std::size_t i = 0; i < sel.k; ++i) keep[order[i]] = true;
  for (std::size_t i = 0; i < n; ++i) (keep[i] ? sel.kept : sel.undetected).push_back(i);
  return sel;
}

template <typename T>
SelectionResult select_topk(const Tensor<T>& scores, double keep_ratio) {
  std::vector<double> values(scores.data().begin(), scores.data().end());
  return select_topk(std::span<const double>(values), keep_ratio);
}

template <typename T>
Tensor<T> fuse_undetected(const Tensor<T>& patch_tokens, const Tensor<T>& scores, const SelectionResult& sel) {
  if (sel.undetected.empty()) throw Error("nothing to fuse");
  if (scores.numel() != patch_tokens.rows()) {
    throw Error("fuse_undetected: " + std::to_string(scores.numel()) + " scores for " +
                std::to_string(patch_tokens.rows()) + " patches");
  }
  auto column = scores.rank() == 2 && scores.cols() == 1 ? scores : reshape(scores, {scores.numel(), 1});
  auto weights = softmax(gather_rows(column, sel.undetected), 0);  // m x 1
  auto tokens = gather_rows(patch_tokens, sel.undetected);         // m x d
  return matmul(transpose(weights), tokens);
}

template <typename T>
Tensor<T> reconstruct_sequence(const Tensor<T>& cls_token, const Tensor<T>& patch_tokens, const SelectionResult& sel,
                               const Tensor<T>& fused) {
  const std::size_t n = patch_tokens.rows();
  if (cls_token.numel() != patch_tokens.cols()) {
    throw Error("reconstruct_sequence: [CLS] width " + std::to_string(cls_token.numel()) + " vs patch width " +
                std::to_string(patch_tokens.cols()));
  }
  if (sel.kept.size() + sel.undetected.size() != n) throw Error("reconstruct_sequence: selection does not cover the patches");
  auto cls_row = cls_token.rank() == 2 ? cls_token : reshape(cls_token, {1, cls_token.numel()});
  std::vector<Tensor<T>> parts{cls_row, patch_tokens};
  std::vector<std::size_t> idx{0};
  for (auto k : sel.kept) idx.push_back(1 + k);
  if (!sel.bypass()) {
    if (!fused.defined() || fused.numel() != patch_tokens.cols()) throw Error("reconstruct_sequence: fused token width mismatch");
    parts.push_back(fused.rank() == 2 ? fused : reshape(fused, {1, fused.numel()}));
    idx.push_back(n + 1);
  }
  return gather_rows(concat(parts, 0), idx);
}

template <typename T>
Tensor<T> attention_fallback_scores(const AttentionRecord<T>& attn) {
  if (attn.length < 2) throw Error("attention fallback needs at least one patch token");
  const std::size_t n = attn.length - 1;
  std::vector<T> scores(n, T(0));
  for (std::size_t h = 0; h < attn.heads; ++h)
    for (std::size_t i = 0; i < n; ++i) scores[i] += attn.weight(h, 0, i + 1);
  T total = 0;
  for (auto& s : scores) {
    s /= static_cast<T>(attn.heads);
    total += s;
  }
  for (auto& s : scores) s /= total;
  return Tensor<T>({n, 1}, std::move(scores));
}

#define TEXTPRUNE_INSTANTIATE(T)                                                                               \
  template DetectorParams<T> init_detector(std::size_t, Rng&);                                                 \
  template void collect_parameters(const std::string&, const DetectorParams<T>&, ParameterList<T>&);           \
  template Tensor<T> score_patch_rows(const Tensor<T>&, const Tensor<T>&, const DetectorParams<T>&);           \
  template Tensor<T> score_patches(const Tensor<T>&, const Tensor<T>&, const DetectorParams<T>&);              \
  template SelectionResult select_topk(const Tensor<T>&, double);                                              \
  template Tensor<T> fuse_undetected(const Tensor<T>&, const Tensor<T>&, const SelectionResult&);              \
  template Tensor<T> reconstruct_sequence(const Tensor<T>&, const Tensor<T>&, const SelectionResult&,          \
                                          const Tensor<T>&);                                                   \
  template Tensor<T> attention_fallback_scores(const AttentionRecord<T>&);

TEXTPRUNE_INSTANTIATE(float)
TEXTPRUNE_INSTANTIATE(double)

#undef TEXTPRUNE_INSTANTIATE

}  // namespace textprune
