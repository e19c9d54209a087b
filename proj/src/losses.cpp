// SPDX-License-Identifier: Apache-2.0

#include "textprune/losses.hpp"

#include <cmath>

namespace textprune {

template <typename T>
Tensor<T> pta_loss(const Tensor<T>& scores, std::span<const std::uint8_t> labels) {
  if (scores.numel() != labels.size()) {
    throw Error("pta_loss: " + std::to_string(scores.numel()) + " scores for " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw Error("pta_loss: need at least one patch");
  std::vector<T> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] ? T(1) : T(0);
  const Tensor<T> pos(scores.shape(), y);
  for (auto& v : y) v = T(1) - v;
  const Tensor<T> neg(scores.shape(), std::move(y));
  const auto ones = Tensor<T>::full(scores.shape(), T(1));
  auto ll = add(mul(pos, log_clipped(scores)), mul(neg, log_clipped(sub(ones, scores))));
  return scale(mean_all(ll), T(-1));
}

namespace {

template <typename T>
void check_unit_rows(const Tensor<T>& x, const char* what) {
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double norm2 = 0;
    for (std::size_t j = 0; j < c; ++j) norm2 += static_cast<double>(x.at(i, j)) * x.at(i, j);
    if (std::abs(std::sqrt(norm2) - 1.0) > 1e-4) {
      throw Error(std::string("itc_loss: ") + what + " row " + std::to_string(i) + " has norm " +
                  std::to_string(std::sqrt(norm2)) + ", expected unit rows");
    }
  }
}

// -mean_i log_softmax(logits)[i, target_i]
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  const std::size_t b = logits.rows(), c = logits.cols();
  std::vector<std::size_t> flat(b);
  for (std::size_t i = 0; i < b; ++i) flat[i] = i * c + targets[i];
  auto picked = gather_rows(reshape(log_softmax(logits), {b * c, 1}), flat);
  return scale(mean_all(picked), T(-1));
}

}  // namespace

template <typename T>
Tensor<T> itc_loss(const Tensor<T>& image_embeds, const Tensor<T>& text_embeds, const Tensor<T>& temperature) {
  if (image_embeds.rank() != 2 || image_embeds.shape() != text_embeds.shape()) {
    throw Error("itc_loss: embedding shapes " + shape_to_string(image_embeds.shape()) + " and " +
                shape_to_string(text_embeds.shape()) + " differ");
  }
  if (image_embeds.rows() == 0) throw Error("itc_loss: empty batch");
  if (temperature.numel() != 1 || !(temperature.item() > T(0))) throw Error("itc_loss: temperature must be a positive scalar");
  check_unit_rows(image_embeds, "image");
  check_unit_rows(text_embeds, "text");
  const std::size_t b = image_embeds.rows();
  auto logits = div_scalar(matmul(image_embeds, transpose(text_embeds)), temperature);
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i;
  auto i2t = cross_entropy(logits, diag);
  auto t2i = cross_entropy(transpose(logits), diag);
  return scale(add(i2t, t2i), T(0.5));
}

template <typename T>
Tensor<T> itm_loss(const Tensor<T>& logits, std::span<const std::uint8_t> match_labels) {
  if (logits.rank() != 2 || logits.cols() != 2 || logits.rows() != match_labels.size()) {
    throw Error("itm_loss: logits " + shape_to_string(logits.shape()) + " for " + std::to_string(match_labels.size()) +
                " labels");
  }
  if (match_labels.empty()) throw Error("itm_loss: empty batch");
  std::vector<std::size_t> targets(match_labels.size());
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = match_labels[i] ? 1 : 0;
  return cross_entropy(logits, targets);
}

HardNegatives select_hard_negatives(std::span<const double> sim, std::size_t batch,
                                    std::span<const std::uint8_t> eligible) {
  if (batch < 2) throw Error("no negatives available");
  if (sim.size() != batch * batch) throw Error("select_hard_negatives: similarity matrix is not " +
                                               std::to_string(batch) + "x" + std::to_string(batch));
  if (!eligible.empty() && eligible.size() != batch * batch) throw Error("select_hard_negatives: mask size mismatch");

  // Scan candidates j != i of one row or column; masked-out candidates lose
  // to any usable one.
  auto pick = [&](std::size_t i, bool by_row) {
    std::size_t best = batch;
    bool best_ok = false;
    for (std::size_t j = 0; j < batch; ++j) {
      if (j == i) continue;
      const std::size_t at = by_row ? i * batch + j : j * batch + i;
      const bool ok = eligible.empty() || eligible[at] != 0;
      if (best == batch || (ok && !best_ok)) {
        best = j;
        best_ok = ok;
        continue;
      }
      if (ok != best_ok) continue;
      const std::size_t best_at = by_row ? i * batch + best : best * batch + i;
      if (sim[at] > sim[best_at]) best = j;
    }
    return best;
  };
  HardNegatives out;
  for (std::size_t i = 0; i < batch; ++i) {
    out.text_for_image.push_back(pick(i, true));
    out.image_for_text.push_back(pick(i, false));
  }
  return out;
}

template <typename T>
LossBundle<T> total_loss(std::optional<Tensor<T>> pta, std::optional<Tensor<T>> itc, std::optional<Tensor<T>> itm,
                         LossSet enabled) {
  if (enabled.empty()) throw Error("total_loss: no loss component enabled");
  LossBundle<T> out{std::move(pta), std::move(itc), std::move(itm), {}, enabled};
  auto take = [&](const std::optional<Tensor<T>>& part, bool on, const char* name) {
    if (!part) {
      if (on) throw Error(std::string("total_loss: ") + name + " is enabled but was not computed");
      return;
    }
    const T v = part->item();
    if (!std::isfinite(static_cast<double>(v))) throw Error(std::string("total_loss: ") + name + " loss is not finite");
    if (v < T(-1e-6)) throw Error(std::string("total_loss: ") + name + " loss is negative");
    if (!on) return;
    out.total = out.total.defined() ? add(out.total, *part) : *part;
  };
  take(out.pta, enabled.pta, "pta");
  take(out.itc, enabled.itc, "itc");
  take(out.itm, enabled.itm, "itm");
  return out;
}

#define TEXTPRUNE_INSTANTIATE(T)                                                                     \
  template Tensor<T> pta_loss(const Tensor<T>&, std::span<const std::uint8_t>);                      \
  template Tensor<T> itc_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> itm_loss(const Tensor<T>&, std::span<const std::uint8_t>);                      \
  template LossBundle<T> total_loss(std::optional<Tensor<T>>, std::optional<Tensor<T>>,              \
                                    std::optional<Tensor<T>>, LossSet);

TEXTPRUNE_INSTANTIATE(float)
TEXTPRUNE_INSTANTIATE(double)

#undef TEXTPRUNE_INSTANTIATE

}  // namespace textprune
