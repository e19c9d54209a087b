// SPDX-License-Identifier: Apache-2.0

#include "textprune/model.hpp"

#include <numeric>

#include "textprune/rng.hpp"

namespace textprune {

std::string to_string(DetectorMode mode) {
  switch (mode) {
    case DetectorMode::Learned: return "learned";
    case DetectorMode::AttentionFallback: return "fallback";
    case DetectorMode::Bypass: return "bypass";
  }
  return "unknown";
}

DetectorMode detector_mode_from_string(const std::string& name) {
  if (name == "learned") return DetectorMode::Learned;
  if (name == "fallback" || name == "attention-fallback") return DetectorMode::AttentionFallback;
  if (name == "bypass") return DetectorMode::Bypass;
  throw Error("unknown detector mode '" + name + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error("model config: " + msg); };
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (channels == 0) fail("channels must be positive");
  if (visual_layers < 2) fail("visual_layers must be at least 2");
  if (detect_location < 1 || detect_location >= visual_layers) fail("detect_location must satisfy 1 <= k < visual_layers");
  if (dim == 0 || heads == 0 || dim % heads != 0) fail("heads must divide dim");
  if (dim % 2 != 0) fail("dim must be even");
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0) fail("keep_ratio must lie in (0, 1]");
  if (num_patches() < 2 && keep_ratio < 1.0) fail("token selection needs at least 2 patches");
  if (vocab_size < 3) fail("vocab_size must cover the reserved tokens");
}

std::size_t ModelConfig::reduced_length() const {
  const std::size_t n = num_patches();
  if (mode == DetectorMode::Bypass || keep_ratio == 1.0) return n + 1;
  return keep_count(n, keep_ratio) + 2;
}

template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.dim, n = config.num_patches();
  const std::size_t flat = config.patch_size * config.patch_size * config.channels;
  ModelParams<T> p;
  p.patch_embed.projection = init_linear<T>(flat, d, rng);
  p.patch_embed.cls = init_normal<T>({1, d}, rng);
  p.patch_embed.positions = init_normal<T>({n + 1, d}, rng);
  for (std::size_t i = 0; i < config.visual_layers; ++i) p.visual_layers.push_back(init_transformer_layer<T>(d, config.ffn_dim, rng));
  p.visual_norm = init_layernorm<T>(d);
  p.text.token_embedding = init_normal<T>({config.vocab_size, d}, rng);
  p.text.positions = init_normal<T>({config.max_text_len + 1, d}, rng);
  for (std::size_t i = 0; i < config.text_layers; ++i) p.text.layers.push_back(init_transformer_layer<T>(d, config.ffn_dim, rng));
  p.text.norm = init_layernorm<T>(d);
  p.detector = init_detector<T>(d, rng);
  for (std::size_t i = 0; i < config.fusion_layers; ++i) p.fusion_layers.push_back(init_transformer_layer<T>(d, config.ffn_dim, rng));
  p.image_proj = init_linear<T>(d, d, rng);
  p.text_proj = init_linear<T>(d, d, rng);
  p.itm_head = init_linear<T>(d, 2, rng);
  p.temperature = Tensor<T>::scalar(T(0.07), true);
  return p;
}

template <typename T>
ParameterList<T> parameters(const ModelParams<T>& p) {
  ParameterList<T> out;
  collect_parameters("visual.patch.projection", p.patch_embed.projection, out);
  out.emplace_back("visual.patch.cls", p.patch_embed.cls);
  out.emplace_back("visual.patch.positions", p.patch_embed.positions);
  for (std::size_t i = 0; i < p.visual_layers.size(); ++i) collect_parameters("visual.layer" + std::to_string(i), p.visual_layers[i], out);
  collect_parameters("visual.norm", p.visual_norm, out);
  out.emplace_back("text.token_embedding", p.text.token_embedding);
  out.emplace_back("text.positions", p.text.positions);
  for (std::size_t i = 0; i < p.text.layers.size(); ++i) collect_parameters("text.layer" + std::to_string(i), p.text.layers[i], out);
  collect_parameters("text.norm", p.text.norm, out);
  collect_parameters("detector", p.detector, out);
  for (std::size_t i = 0; i < p.fusion_layers.size(); ++i) collect_parameters("fusion.layer" + std::to_string(i), p.fusion_layers[i], out);
  collect_parameters("head.image_proj", p.image_proj, out);
  collect_parameters("head.text_proj", p.text_proj, out);
  collect_parameters("head.itm", p.itm_head, out);
  out.emplace_back("head.temperature", p.temperature);
  return out;
}

// ---- visual encoder ------------------------------------------------------------

template <typename T>
VisualPrefix<T> encode_visual_prefix(std::span<const Image* const> images, const ModelConfig& config,
                                     const ModelParams<T>& params) {
  for (const Image* img : images) {
    if (img->width != config.image_size || img->height != config.image_size || img->channels != config.channels) {
      throw Error("image " + std::to_string(img->width) + "x" + std::to_string(img->height) + "x" +
                  std::to_string(img->channels) + " does not match the configured input size");
    }
  }
  VisualPrefix<T> out;
  out.tokens = patch_embed(images, config.patch_size, params.patch_embed);
  for (std::size_t l = 0; l < config.detect_location; ++l) {
    const bool last = l + 1 == config.detect_location;
    out.tokens = transformer_layer(out.tokens, params.visual_layers[l], config.heads, last ? &out.attention : nullptr);
  }
  return out;
}

namespace {

template <typename T>
std::vector<std::size_t> patch_rows_of(const Segment& seg) {
  std::vector<std::size_t> rows(seg.length - 1);
  std::iota(rows.begin(), rows.end(), seg.offset + 1);
  return rows;
}

}  // namespace

template <typename T>
Tensor<T> detector_scores(const VisualPrefix<T>& prefix, const Tensor<T>& text_cls,
                          std::span<const std::size_t> image_index, std::span<const std::size_t> text_index,
                          const ModelConfig& config, const ModelParams<T>& params) {
  if (image_index.size() != text_index.size()) throw Error("detector_scores: request lists differ in length");
  const std::size_t n = config.num_patches();
  std::vector<std::size_t> patch_idx, text_idx;
  patch_idx.reserve(image_index.size() * n);
  text_idx.reserve(image_index.size() * n);
  for (std::size_t j = 0; j < image_index.size(); ++j) {
    const auto& seg = prefix.tokens.segments.at(image_index[j]);
    for (std::size_t i = 0; i < n; ++i) {
      patch_idx.push_back(seg.offset + 1 + i);
      text_idx.push_back(text_index[j]);
    }
  }
  return score_patch_rows(gather_rows(prefix.tokens.tokens, patch_idx), gather_rows(text_cls, text_idx), params.detector);
}

template <typename T>
DetectionOutput<T> apply_detector(const VisualPrefix<T>& prefix, const Tensor<T>* text_cls,
                                  std::span<const std::size_t> image_index, std::span<const std::size_t> text_index,
                                  DetectorMode mode, const ModelConfig& config, const ModelParams<T>& params) {
  const std::size_t J = image_index.size();
  const std::size_t n = config.num_patches();
  DetectionOutput<T> out;
  const auto& all = prefix.tokens.tokens;
  const bool bypass = mode == DetectorMode::Bypass || config.keep_ratio == 1.0;

  if (bypass) {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < J; ++j) {
      const auto& seg = prefix.tokens.segments.at(image_index[j]);
      out.reduced.segments.push_back(Segment{j * (n + 1), n + 1});
      for (std::size_t r = 0; r < seg.length; ++r) idx.push_back(seg.offset + r);
      SelectionResult sel;
      sel.k = n;
      sel.kept.resize(n);
      std::iota(sel.kept.begin(), sel.kept.end(), 0);
      out.selections.push_back(std::move(sel));
    }
    out.reduced.tokens = gather_rows(all, idx);
    return out;
  }

  Tensor<T> learned;
  if (mode == DetectorMode::Learned) {
    if (text_cls == nullptr) throw Error("learned detector mode requires the text [CLS] embedding");
    if (text_index.size() != J) throw Error("apply_detector: text and image request lists differ in length");
    learned = detector_scores(prefix, *text_cls, image_index, text_index, config, params);
  }

  std::vector<Tensor<T>> fused;
  fused.reserve(J);
  std::vector<std::size_t> idx;
  const std::size_t fused_base = all.rows();
  std::size_t offset = 0;
  for (std::size_t j = 0; j < J; ++j) {
    const auto& seg = prefix.tokens.segments.at(image_index[j]);
    Tensor<T> scores;
    if (mode == DetectorMode::Learned) {
      std::vector<std::size_t> rows(n);
      std::iota(rows.begin(), rows.end(), j * n);
      scores = gather_rows(learned, rows);
    } else {
      scores = attention_fallback_scores(prefix.attention.at(image_index[j]));
    }
    auto sel = select_topk(scores, config.keep_ratio);
    auto patch_tokens = gather_rows(all, patch_rows_of<T>(seg));
    fused.push_back(fuse_undetected(patch_tokens, scores, sel));

    idx.push_back(seg.offset);
    for (auto k : sel.kept) idx.push_back(seg.offset + 1 + k);
    idx.push_back(fused_base + j);
    out.reduced.segments.push_back(Segment{offset, sel.k + 2});
    offset += sel.k + 2;
    out.scores.push_back(std::move(scores));
    out.selections.push_back(std::move(sel));
  }
  std::vector<Tensor<T>> pool{all};
  pool.insert(pool.end(), fused.begin(), fused.end());
  out.reduced.tokens = gather_rows(concat(pool, 0), idx);
  return out;
}

template <typename T>
SequenceBatch<T> encode_visual_suffix(const SequenceBatch<T>& reduced, const ModelConfig& config,
                                      const ModelParams<T>& params) {
  SequenceBatch<T> seq = reduced;
  for (std::size_t l = config.detect_location; l < config.visual_layers; ++l) {
    seq = transformer_layer(seq, params.visual_layers[l], config.heads);
  }
  seq.tokens = params.visual_norm(seq.tokens);
  return seq;
}

template <typename T>
VisualOutput<T> vit_tpd_forward(std::span<const Image* const> images, const Tensor<T>* text_cls,
                                const ModelConfig& config, const ModelParams<T>& params, DetectorMode mode) {
  if (mode == DetectorMode::Learned && text_cls == nullptr) {
    throw Error("learned detector mode requires the text [CLS] embedding");
  }
  auto prefix = encode_visual_prefix(images, config, params);
  std::vector<std::size_t> index(images.size());
  std::iota(index.begin(), index.end(), 0);
  auto det = apply_detector(prefix, text_cls, index, index, mode, config, params);
  VisualOutput<T> out;
  out.visual = encode_visual_suffix(det.reduced, config, params);
  out.scores = std::move(det.scores);
  out.selections = std::move(det.selections);
  out.attention = std::move(prefix.attention);
  return out;
}

template <typename T>
SequenceBatch<T> plain_vit_forward(std::span<const Image* const> images, const ModelConfig& config,
                                   const ModelParams<T>& params) {
  auto seq = patch_embed(images, config.patch_size, params.patch_embed);
  for (const auto& layer : params.visual_layers) seq = transformer_layer(seq, layer, config.heads);
  seq.tokens = params.visual_norm(seq.tokens);
  return seq;
}

template <typename T>
SequenceBatch<T> encode_captions(const std::vector<std::vector<std::int32_t>>& ids, const ModelConfig& config,
                                 const ModelParams<T>& params) {
  return encode_text(ids, params.text, config.heads, config.max_text_len);
}

// ---- fusion and heads ----------------------------------------------------------

template <typename T>
SequenceBatch<T> fuse_modalities(const SequenceBatch<T>& text, const SequenceBatch<T>& visual,
                                 std::span<const std::size_t> text_index, std::span<const std::size_t> visual_index,
                                 const ModelConfig& config, const ModelParams<T>& params) {
  if (text.dim() != visual.dim()) {
    throw Error("fuse_modalities: text width " + std::to_string(text.dim()) + " vs visual width " + std::to_string(visual.dim()));
  }
  if (text_index.size() != visual_index.size()) throw Error("fuse_modalities: pair lists differ in length");
  const std::size_t text_rows = text.tokens.rows();
  std::vector<std::size_t> idx;
  SequenceBatch<T> seq;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < text_index.size(); ++p) {
    const auto& ts = text.segments.at(text_index[p]);
    const auto& vs = visual.segments.at(visual_index[p]);
    for (std::size_t r = 0; r < ts.length; ++r) idx.push_back(ts.offset + r);
    for (std::size_t r = 0; r < vs.length; ++r) idx.push_back(text_rows + vs.offset + r);
    seq.segments.push_back(Segment{offset, ts.length + vs.length});
    offset += ts.length + vs.length;
  }
  seq.tokens = gather_rows(concat(std::vector<Tensor<T>>{text.tokens, visual.tokens}, 0), idx);
  for (const auto& layer : params.fusion_layers) seq = transformer_layer(seq, layer, config.heads);
  return seq;
}

template <typename T>
Tensor<T> pool_image(const SequenceBatch<T>& visual, const ModelParams<T>& params) {
  return normalize_rows(params.image_proj(visual.cls_rows()));
}

template <typename T>
Tensor<T> pool_text(const SequenceBatch<T>& text, const ModelParams<T>& params) {
  return normalize_rows(params.text_proj(text.cls_rows()));
}

template <typename T>
Tensor<T> itm_logits(const SequenceBatch<T>& cross, const ModelParams<T>& params) {
  return params.itm_head(cross.cls_rows());
}

template <typename T>
ForwardOutput<T> model_forward(const Image& image, const std::vector<std::int32_t>& caption_ids,
                               const ModelConfig& config, const ModelParams<T>& params, DetectorMode mode) {
  ForwardOutput<T> out;
  out.text = encode_captions<T>({caption_ids}, config, params);
  auto t_cls = out.text.cls_rows();
  const Image* images[] = {&image};
  auto vis = vit_tpd_forward<T>(images, &t_cls, config, params, mode);
  out.visual = std::move(vis.visual);
  if (!vis.scores.empty()) out.scores = vis.scores[0];
  if (mode != DetectorMode::Bypass && config.keep_ratio < 1.0) out.selection = vis.selections[0];
  out.attention = vis.attention.at(0);
  const std::size_t zero[] = {0};
  out.cross = fuse_modalities(out.text, out.visual, zero, zero, config, params);
  out.image_embedding = pool_image(out.visual, params);
  out.text_embedding = pool_text(out.text, params);
  out.itm_logits = itm_logits(out.cross, params);
  return out;
}

template <typename T>
VisualOutput<T> caption_mode_forward(const Image& image, const ModelConfig& config, const ModelParams<T>& params) {
  const Image* images[] = {&image};
  return vit_tpd_forward<T>(images, nullptr, config, params, DetectorMode::AttentionFallback);
}

#define TEXTPRUNE_INSTANTIATE(T)                                                                                  \
  template ModelParams<T> init_model(const ModelConfig&, std::uint64_t);                                          \
  template ParameterList<T> parameters(const ModelParams<T>&);                                                    \
  template VisualPrefix<T> encode_visual_prefix(std::span<const Image* const>, const ModelConfig&,                \
                                                const ModelParams<T>&);                                           \
  template Tensor<T> detector_scores(const VisualPrefix<T>&, const Tensor<T>&, std::span<const std::size_t>,      \
                                     std::span<const std::size_t>, const ModelConfig&, const ModelParams<T>&);    \
  template DetectionOutput<T> apply_detector(const VisualPrefix<T>&, const Tensor<T>*,                            \
                                             std::span<const std::size_t>, std::span<const std::size_t>,          \
                                             DetectorMode, const ModelConfig&, const ModelParams<T>&);            \
  template SequenceBatch<T> encode_visual_suffix(const SequenceBatch<T>&, const ModelConfig&,                     \
                                                 const ModelParams<T>&);                                          \
  template VisualOutput<T> vit_tpd_forward(std::span<const Image* const>, const Tensor<T>*, const ModelConfig&,   \
                                           const ModelParams<T>&, DetectorMode);                                  \
  template SequenceBatch<T> plain_vit_forward(std::span<const Image* const>, const ModelConfig&,                  \
                                              const ModelParams<T>&);                                             \
  template SequenceBatch<T> encode_captions(const std::vector<std::vector<std::int32_t>>&, const ModelConfig&,    \
                                            const ModelParams<T>&);                                               \
  template SequenceBatch<T> fuse_modalities(const SequenceBatch<T>&, const SequenceBatch<T>&,                     \
                                            std::span<const std::size_t>, std::span<const std::size_t>,           \
                                            const ModelConfig&, const ModelParams<T>&);                           \
  template Tensor<T> pool_image(const SequenceBatch<T>&, const ModelParams<T>&);                                  \
  template Tensor<T> pool_text(const SequenceBatch<T>&, const ModelParams<T>&);                                   \
  template Tensor<T> itm_logits(const SequenceBatch<T>&, const ModelParams<T>&);                                  \
  template ForwardOutput<T> model_forward(const Image&, const std::vector<std::int32_t>&, const ModelConfig&,     \
                                          const ModelParams<T>&, DetectorMode);                                   \
  template VisualOutput<T> caption_mode_forward(const Image&, const ModelConfig&, const ModelParams<T>&);

TEXTPRUNE_INSTANTIATE(float)
TEXTPRUNE_INSTANTIATE(double)

#undef TEXTPRUNE_INSTANTIATE

}  // namespace textprune
