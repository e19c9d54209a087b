// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "support.hpp"
#include "textprune/model.hpp"
#include "textprune/rng.hpp"

using namespace textprune;

namespace {

ModelConfig toy(std::size_t image = 32, std::size_t patch = 8, std::size_t d = 16) {
  ModelConfig c;
  c.image_size = image;
  c.patch_size = patch;
  c.visual_layers = 4;
  c.detect_location = 2;
  c.text_layers = 1;
  c.fusion_layers = 1;
  c.dim = d;
  c.heads = 2;
  c.ffn_dim = 2 * d;
  c.max_text_len = 8;
  return c;
}

Image random_image(std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  Image img(size, size, 3);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

// Spreads the init so that scores are not all near 0.5.
template <typename T>
void widen(ModelParams<T>& p, double stddev, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& [name, t] : parameters(p)) {
    if (name == "head.temperature") continue;
    auto x = t;
    for (auto& v : x.mutable_data()) v += static_cast<T>(dist(gen));
  }
}

const std::vector<std::int32_t> kCaption{3, 4, 5, 20, 36};

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = toy();
  CHECK_NOTHROW(c.validate());
  c.detect_location = c.visual_layers;
  CHECK_THROWS_AS(c.validate(), Error);
  c = toy();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = toy();
  c.keep_ratio = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = toy();
  c.image_size = 30;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("bypass reproduces the plain backbone bit for bit") {
  for (double ratio : {0.5, 1.0}) {
    ModelConfig c = toy();
    c.keep_ratio = ratio;
    const auto params = init_model<float>(c, 3);
    const Image img = random_image(32, 1);
    const Image* images[] = {&img};
    auto plain = plain_vit_forward<float>(images, c, params);
    const DetectorMode mode = ratio == 1.0 ? DetectorMode::Learned : DetectorMode::Bypass;
    auto t = encode_captions<float>({kCaption}, c, params).cls_rows();
    auto out = vit_tpd_forward<float>(images, &t, c, params, mode);
    REQUIRE(out.visual.tokens.rows() == 17);
    for (std::size_t i = 0; i < plain.tokens.numel(); ++i) CHECK(out.visual.tokens[i] == plain.tokens[i]);
  }
}

TEST_CASE("learned mode shortens the sequence and needs text") {
  ModelConfig c = toy(64, 16, 16);
  const auto params = init_model<float>(c, 4);
  const Image img = random_image(64, 2);
  const Image* images[] = {&img};
  auto t = encode_captions<float>({kCaption}, c, params).cls_rows();
  auto out = vit_tpd_forward<float>(images, &t, c, params, DetectorMode::Learned);
  CHECK(out.visual.length(0) == 10);
  CHECK(c.reduced_length() == 10);
  CHECK_THROWS_AS(vit_tpd_forward<float>(images, nullptr, c, params, DetectorMode::Learned), Error);
  auto fb = vit_tpd_forward<float>(images, nullptr, c, params, DetectorMode::AttentionFallback);
  CHECK(fb.visual.length(0) == 10);
}

TEST_CASE("assembled forward equals hand-composed stages") {
  ModelConfig c = toy();
  c.keep_ratio = 0.375;
  auto params = init_model<double>(c, 5);
  widen(params, 0.2, 6);
  const Image a = random_image(32, 3), b = random_image(32, 4);
  const Image* images[] = {&a, &b};
  auto text = encode_captions<double>({kCaption, {3, 4, 5, 21, 37}}, c, params);
  auto t_cls = text.cls_rows();
  auto out = vit_tpd_forward<double>(images, &t_cls, c, params, DetectorMode::Learned);

  for (std::size_t img = 0; img < 2; ++img) {
    const Image* one[] = {images[img]};
    auto seq = patch_embed<double>(one, c.patch_size, params.patch_embed);
    for (std::size_t l = 0; l < c.detect_location; ++l) seq = transformer_layer(seq, params.visual_layers[l], c.heads);
    const std::size_t n = c.num_patches();
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), 1);
    const std::size_t zero[] = {0};
    const std::size_t pick[] = {img};
    auto patches = gather_rows(seq.tokens, rows);
    auto scores = score_patches(patches, gather_rows(t_cls, pick), params.detector);
    const auto sel = select_topk(scores, c.keep_ratio);
    CHECK(sel.kept == out.selections[img].kept);
    auto reduced = reconstruct_sequence(gather_rows(seq.tokens, zero), patches, sel, fuse_undetected(patches, scores, sel));
    auto rest = single_sequence(reduced);
    for (std::size_t l = c.detect_location; l < c.visual_layers; ++l) rest = transformer_layer(rest, params.visual_layers[l], c.heads);
    auto final_rows = params.visual_norm(rest.tokens);
    auto assembled = out.visual.sequence(img);
    REQUIRE(assembled.numel() == final_rows.numel());
    for (std::size_t i = 0; i < final_rows.numel(); ++i) CHECK(std::abs(assembled[i] - final_rows[i]) <= 1e-6);
  }
}

TEST_CASE("fusion lengths and the zero-layer identity") {
  ModelConfig c = toy();
  c.fusion_layers = 0;
  const auto params = init_model<double>(c, 7);
  const Image img = random_image(32, 5);
  const Image* images[] = {&img};
  auto text = encode_captions<double>({kCaption}, c, params);
  auto t = text.cls_rows();
  auto vis = vit_tpd_forward<double>(images, &t, c, params, DetectorMode::Learned).visual;
  const std::size_t zero[] = {0};
  auto cross = fuse_modalities(text, vis, zero, zero, c, params);
  CHECK(cross.length(0) == text.length(0) + vis.length(0));
  for (std::size_t i = 0; i < text.tokens.numel(); ++i) CHECK(cross.tokens[i] == text.tokens[i]);
  for (std::size_t i = 0; i < vis.tokens.numel(); ++i) CHECK(cross.tokens[text.tokens.numel() + i] == vis.tokens[i]);

  SequenceBatch<double> narrow = vis;
  narrow.tokens = reshape(vis.tokens, {vis.tokens.rows() * 2, vis.tokens.cols() / 2});
  CHECK_THROWS_AS(fuse_modalities(text, narrow, zero, zero, c, params), Error);
}

TEST_CASE("model forward outputs") {
  ModelConfig c = toy(64, 16, 16);
  const auto params = init_model<float>(c, 8);
  const Image img = random_image(64, 6);
  auto out = model_forward<float>(img, kCaption, c, params, DetectorMode::Learned);
  for (const auto* e : {&out.image_embedding, &out.text_embedding}) {
    double norm = 0;
    for (float v : e->data()) norm += static_cast<double>(v) * v;
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-6);
  }
  REQUIRE(out.scores.has_value());
  CHECK(out.scores->numel() == 16);
  CHECK(out.selection->kept.size() == 8);
  CHECK(out.visual.length(0) == 10);
  CHECK(out.cross.length(0) == out.visual.length(0) + out.text.length(0));
  CHECK(out.itm_logits.shape() == Shape{1, 2});

  auto again = model_forward<float>(img, kCaption, c, params, DetectorMode::Learned);
  for (std::size_t i = 0; i < out.cross.tokens.numel(); ++i) CHECK(again.cross.tokens[i] == out.cross.tokens[i]);
  for (std::size_t i = 0; i < 2; ++i) CHECK(again.itm_logits[i] == out.itm_logits[i]);

  auto caption_mode = caption_mode_forward<float>(img, c, params);
  CHECK(caption_mode.visual.length(0) == 10);
  CHECK(caption_mode.scores.size() == 1);
}

TEST_CASE("gradient check through the assembled model") {
  ModelConfig c = toy(8, 4, 16);
  c.visual_layers = 2;
  c.detect_location = 1;
  auto params = init_model<double>(c, 9);
  widen(params, 0.15, 10);
  const Image img = random_image(8, 7);
  auto loss = [&] {
    auto out = model_forward<double>(img, kCaption, c, params, DetectorMode::Learned);
    auto w = Tensor<double>({2, 1}, {0.7, -1.3});
    return add(sum(matmul(out.itm_logits, w)), sum(mul(out.image_embedding, out.text_embedding)));
  };
  const auto r = textprune::testing::check_gradients(textprune::testing::leaves_of(parameters(params)), loss, 1e-5, 8);
  CHECK(r.checked > 100);
  CHECK(r.max_rel_error <= 1e-4);
}
