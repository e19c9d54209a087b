// SPDX-License-Identifier: Apache-2.0
//
// Dual-encoder vision-language model with a text-aware patch detector placed
// between visual layers k and k+1, plus a self-attention fusion encoder over
// [text; visual] for image-text matching.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "textprune/autodiff.hpp"
#include "textprune/nn.hpp"
#include "textprune/tpd.hpp"

namespace textprune {

enum class DetectorMode { Learned, AttentionFallback, Bypass };

std::string to_string(DetectorMode mode);
DetectorMode detector_mode_from_string(const std::string& name);

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 16;
  std::size_t channels = 3;
  std::size_t visual_layers = 6;
  std::size_t text_layers = 2;
  std::size_t fusion_layers = 2;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t detect_location = 3;  // TPD runs on the output of this layer (1-based)
  double keep_ratio = 0.5;
  DetectorMode mode = DetectorMode::Learned;
  std::size_t vocab_size = Vocabulary().size();
  std::size_t max_text_len = 16;

  void validate() const;
  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  // Sequence length entering layers after the detector.
  std::size_t reduced_length() const;
};

template <typename T>
struct ModelParams {
  PatchEmbedParams<T> patch_embed;
  std::vector<TransformerLayerParams<T>> visual_layers;
  LayerNormParams<T> visual_norm;
  TextEncoderParams<T> text;
  DetectorParams<T> detector;
  std::vector<TransformerLayerParams<T>> fusion_layers;
  Linear<T> image_proj;
  Linear<T> text_proj;
  Linear<T> itm_head;
  Tensor<T> temperature;  // ITC temperature, scalar
};

template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed);

// Stable, ordered parameter names; shared by the optimizer and checkpoints.
template <typename T>
ParameterList<T> parameters(const ModelParams<T>& params);

// ---- staged visual encoder -----------------------------------------------------

template <typename T>
struct VisualPrefix {
  SequenceBatch<T> tokens;                     // output of layer k, n + 1 rows per image
  std::vector<AttentionRecord<T>> attention;   // layer k, one per image
};

template <typename T>
VisualPrefix<T> encode_visual_prefix(std::span<const Image* const> images, const ModelConfig& config,
                                     const ModelParams<T>& params);

template <typename T>
struct DetectionOutput {
  SequenceBatch<T> reduced;                 // [cls, kept..., v_f] per request
  std::vector<Tensor<T>> scores;            // n x 1 per request (learned or fallback); empty in bypass
  std::vector<SelectionResult> selections;  // per request
};

// Runs the detector for each request j on image image_index[j] of the prefix.
// Learned mode reads text_cls row text_index[j]; the other modes ignore text.
template <typename T>
DetectionOutput<T> apply_detector(const VisualPrefix<T>& prefix, const Tensor<T>* text_cls,
                                  std::span<const std::size_t> image_index, std::span<const std::size_t> text_index,
                                  DetectorMode mode, const ModelConfig& config, const ModelParams<T>& params);

// Learned alignment scores for (image, text) pairs: (J n) x 1, request-major.
template <typename T>
Tensor<T> detector_scores(const VisualPrefix<T>& prefix, const Tensor<T>& text_cls,
                          std::span<const std::size_t> image_index, std::span<const std::size_t> text_index,
                          const ModelConfig& config, const ModelParams<T>& params);

// Layers k+1..N followed by the final norm.
template <typename T>
SequenceBatch<T> encode_visual_suffix(const SequenceBatch<T>& reduced, const ModelConfig& config,
                                      const ModelParams<T>& params);

template <typename T>
struct VisualOutput {
  SequenceBatch<T> visual;
  std::vector<Tensor<T>> scores;
  std::vector<SelectionResult> selections;
  std::vector<AttentionRecord<T>> attention;  // layer k
};

// Image b is paired with text_cls row b. text_cls may be null in fallback or
// bypass mode.
template <typename T>
VisualOutput<T> vit_tpd_forward(std::span<const Image* const> images, const Tensor<T>* text_cls,
                                const ModelConfig& config, const ModelParams<T>& params, DetectorMode mode);

// Plain ViT over the full sequence (no detector).
template <typename T>
SequenceBatch<T> plain_vit_forward(std::span<const Image* const> images, const ModelConfig& config,
                                   const ModelParams<T>& params);

// Text encoder with the model's configuration.
template <typename T>
SequenceBatch<T> encode_captions(const std::vector<std::vector<std::int32_t>>& ids, const ModelConfig& config,
                                 const ModelParams<T>& params);

// Self-attention fusion over [text text_index[p]; visual image_index[p]].
template <typename T>
SequenceBatch<T> fuse_modalities(const SequenceBatch<T>& text, const SequenceBatch<T>& visual,
                                 std::span<const std::size_t> text_index, std::span<const std::size_t> visual_index,
                                 const ModelConfig& config, const ModelParams<T>& params);

template <typename T>
Tensor<T> pool_image(const SequenceBatch<T>& visual, const ModelParams<T>& params);
template <typename T>
Tensor<T> pool_text(const SequenceBatch<T>& text, const ModelParams<T>& params);
template <typename T>
Tensor<T> itm_logits(const SequenceBatch<T>& cross, const ModelParams<T>& params);

template <typename T>
struct ForwardOutput {
  SequenceBatch<T> visual;
  SequenceBatch<T> text;
  SequenceBatch<T> cross;
  std::optional<Tensor<T>> scores;
  std::optional<SelectionResult> selection;
  AttentionRecord<T> attention;
  Tensor<T> image_embedding;  // 1 x d, unit norm
  Tensor<T> text_embedding;   // 1 x d, unit norm
  Tensor<T> itm_logits;       // 1 x 2
};

template <typename T>
ForwardOutput<T> model_forward(const Image& image, const std::vector<std::int32_t>& caption_ids,
                               const ModelConfig& config, const ModelParams<T>& params, DetectorMode mode);

// Text-free forward: the detector switches to attention-fallback scoring.
template <typename T>
VisualOutput<T> caption_mode_forward(const Image& image, const ModelConfig& config, const ModelParams<T>& params);

}  // namespace textprune
