// SPDX-License-Identifier: Apache-2.0

#include "textprune/visualize.hpp"

#include <numeric>

namespace textprune {

Image render_patch_mask(const Image& image, std::size_t patch, const SelectionResult& sel) {
  const PatchGrid grid = patch_grid(image.width, image.height, patch);
  Image out = image;
  if (sel.bypass()) return out;
  std::vector<bool> kept(grid.rows * grid.cols, false);
  for (auto k : sel.kept) kept.at(k) = true;
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      if (kept[(y / patch) * grid.cols + x / patch]) continue;
      for (std::size_t c = 0; c < image.channels; ++c) {
        auto& v = out.at(x, y, c);
        v = static_cast<std::uint8_t>(static_cast<unsigned>(v) * kDimPercent / 100);
      }
    }
  return out;
}

Visualization visualize_detection(const ModelParams<float>& params, const ModelConfig& config, const Image& image,
                                  const std::string& text, double keep_ratio) {
  ModelConfig cfg = config;
  cfg.keep_ratio = keep_ratio;
  cfg.validate();
  Visualization out;
  if (keep_ratio == 1.0) {
    out.overlay = image;
    out.selection.k = cfg.num_patches();
    out.selection.kept.resize(cfg.num_patches());
    std::iota(out.selection.kept.begin(), out.selection.kept.end(), 0);
    return out;
  }
  const Vocabulary vocab;
  auto ids = vocab.encode(text);
  auto t = encode_captions<float>({ids}, cfg, params);
  const Image* images[] = {&image};
  auto prefix = encode_visual_prefix<float>(images, cfg, params);
  const std::size_t zero[] = {0};
  auto scores = detector_scores<float>(prefix, t.cls_rows(), zero, zero, cfg, params);
  out.scores.assign(scores.data().begin(), scores.data().end());
  out.selection = select_topk(std::span<const double>(out.scores), keep_ratio);
  out.overlay = render_patch_mask(image, cfg.patch_size, out.selection);
  return out;
}

}  // namespace textprune
