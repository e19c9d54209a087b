// SPDX-License-Identifier: Apache-2.0

#include "textprune/nn.hpp"

#include <cctype>
#include <numeric>

namespace textprune {

// ---- SequenceBatch -------------------------------------------------------------

namespace {

std::vector<std::size_t> iota_indices(std::size_t first, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), first);
  return idx;
}

}  // namespace

template <typename T>
Tensor<T> SequenceBatch<T>::sequence(std::size_t i) const {
  const auto idx = iota_indices(segments.at(i).offset, segments.at(i).length);
  return gather_rows(tokens, idx);
}

template <typename T>
Tensor<T> SequenceBatch<T>::cls_rows() const {
  std::vector<std::size_t> idx;
  idx.reserve(segments.size());
  for (const auto& s : segments) idx.push_back(s.offset);
  return gather_rows(tokens, idx);
}

template <typename T>
SequenceBatch<T> single_sequence(Tensor<T> tokens) {
  SequenceBatch<T> out;
  out.segments = {Segment{0, tokens.rows()}};
  out.tokens = std::move(tokens);
  return out;
}

template <typename T>
SequenceBatch<T> stack_sequences(const std::vector<Tensor<T>>& sequences) {
  SequenceBatch<T> out;
  std::size_t offset = 0;
  for (const auto& s : sequences) {
    out.segments.push_back(Segment{offset, s.rows()});
    offset += s.rows();
  }
  out.tokens = sequences.size() == 1 ? sequences[0] : concat(sequences, 0);
  return out;
}

// ---- init ------------------------------------------------------------------------

template <typename T>
Tensor<T> init_normal(Shape shape, Rng& rng, double stddev) {
  std::vector<T> data(shape_numel(shape));
  for (auto& x : data) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
Linear<T> init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return Linear<T>{init_normal<T>({in, out}, rng), Tensor<T>::zeros({1, out}, true)};
}

template <typename T>
LayerNormParams<T> init_layernorm(std::size_t dim) {
  auto gamma = Tensor<T>::full({1, dim}, T(1));
  gamma.set_requires_grad(true);
  return LayerNormParams<T>{gamma, Tensor<T>::zeros({1, dim}, true)};
}

template <typename T>
TransformerLayerParams<T> init_transformer_layer(std::size_t dim, std::size_t ffn, Rng& rng) {
  TransformerLayerParams<T> p;
  p.norm1 = init_layernorm<T>(dim);
  p.query = init_linear<T>(dim, dim, rng);
  p.key = init_linear<T>(dim, dim, rng);
  p.value = init_linear<T>(dim, dim, rng);
  p.output = init_linear<T>(dim, dim, rng);
  p.norm2 = init_layernorm<T>(dim);
  p.ffn_in = init_linear<T>(dim, ffn, rng);
  p.ffn_out = init_linear<T>(ffn, dim, rng);
  return p;
}

template <typename T>
void collect_parameters(const std::string& prefix, const Linear<T>& p, ParameterList<T>& out) {
  out.emplace_back(prefix + ".weight", p.weight);
  out.emplace_back(prefix + ".bias", p.bias);
}

template <typename T>
void collect_parameters(const std::string& prefix, const LayerNormParams<T>& p, ParameterList<T>& out) {
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

template <typename T>
void collect_parameters(const std::string& prefix, const TransformerLayerParams<T>& p, ParameterList<T>& out) {
  collect_parameters(prefix + ".norm1", p.norm1, out);
  collect_parameters(prefix + ".query", p.query, out);
  collect_parameters(prefix + ".key", p.key, out);
  collect_parameters(prefix + ".value", p.value, out);
  collect_parameters(prefix + ".output", p.output, out);
  collect_parameters(prefix + ".norm2", p.norm2, out);
  collect_parameters(prefix + ".ffn_in", p.ffn_in, out);
  collect_parameters(prefix + ".ffn_out", p.ffn_out, out);
}

// ---- transformer layer -----------------------------------------------------------

template <typename T>
SequenceBatch<T> transformer_layer(const SequenceBatch<T>& seq, const TransformerLayerParams<T>& params,
                                   std::size_t heads, std::vector<AttentionRecord<T>>* capture) {
  const std::size_t d = seq.dim();
  if (params.query.in_features() != d) {
    throw Error("transformer_layer: sequence width " + std::to_string(d) + " does not match layer width " +
                std::to_string(params.query.in_features()));
  }
  if (heads == 0 || d % heads != 0) {
    throw Error("transformer_layer: " + std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  }
  const auto& x = seq.tokens;
  auto h = params.norm1(x);
  auto attn = attention(params.query(h), params.key(h), params.value(h), seq.segments, heads, capture);
  auto x1 = add(x, params.output(attn));
  auto f = params.ffn_out(gelu(params.ffn_in(params.norm2(x1))));
  return SequenceBatch<T>{add(x1, f), seq.segments};
}

// ---- patch embedding -------------------------------------------------------------

PatchGrid patch_grid(std::size_t width, std::size_t height, std::size_t patch) {
  if (patch == 0 || width % patch != 0 || height % patch != 0) {
    throw Error("image " + std::to_string(width) + "x" + std::to_string(height) +
                " is not divisible by patch size " + std::to_string(patch));
  }
  return PatchGrid{height / patch, width / patch, patch};
}

template <typename T>
Tensor<T> patchify(const Image& image, std::size_t patch) {
  const auto grid = patch_grid(image.width, image.height, patch);
  const std::size_t C = image.channels;
  const std::size_t flat = patch * patch * C;
  std::vector<T> data(grid.count() * flat);
  for (std::size_t r = 0; r < grid.rows; ++r)
    for (std::size_t c = 0; c < grid.cols; ++c) {
      T* out = data.data() + (r * grid.cols + c) * flat;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < C; ++ch)
            *out++ = static_cast<T>(image.at(c * patch + x, r * patch + y, ch)) / T(255);
    }
  return Tensor<T>({grid.count(), flat}, std::move(data));
}

template <typename T>
SequenceBatch<T> patch_embed(std::span<const Image* const> images, std::size_t patch, const PatchEmbedParams<T>& params) {
  if (images.empty()) throw Error("patch_embed: empty image batch");
  const auto grid = patch_grid(images[0]->width, images[0]->height, patch);
  const std::size_t n = grid.count();
  if (params.positions.rows() != n + 1) {
    throw Error("patch_embed: positional table has " + std::to_string(params.positions.rows()) + " rows, need " +
                std::to_string(n + 1));
  }
  std::vector<Tensor<T>> flat;
  flat.reserve(images.size());
  for (const Image* img : images) {
    if (img->width != images[0]->width || img->height != images[0]->height || img->channels != images[0]->channels) {
      throw Error("patch_embed: images in a batch must share dimensions");
    }
    flat.push_back(patchify<T>(*img, patch));
  }
  if (flat[0].cols() != params.projection.in_features()) {
    throw Error("patch_embed: patch vector length " + std::to_string(flat[0].cols()) +
                " does not match projection input " + std::to_string(params.projection.in_features()));
  }
  const std::size_t B = images.size();
  auto projected = params.projection(flat.size() == 1 ? flat[0] : concat(flat, 0));  // (B n) x d
  auto pool = concat(std::vector<Tensor<T>>{params.cls, projected}, 0);            // row 0 = CLS
  std::vector<std::size_t> token_idx, pos_idx;
  token_idx.reserve(B * (n + 1));
  pos_idx.reserve(B * (n + 1));
  SequenceBatch<T> out;
  for (std::size_t b = 0; b < B; ++b) {
    out.segments.push_back(Segment{b * (n + 1), n + 1});
    token_idx.push_back(0);
    pos_idx.push_back(0);
    for (std::size_t i = 0; i < n; ++i) {
      token_idx.push_back(1 + b * n + i);
      pos_idx.push_back(1 + i);
    }
  }
  out.tokens = add(gather_rows(pool, token_idx), gather_rows(params.positions, pos_idx));
  return out;
}

// ---- vocabulary ------------------------------------------------------------------

namespace {

const std::vector<std::string>& default_words() {
  static const std::vector<std::string> words = {
      "[CLS]", "[PAD]", "[UNK]",
      // template and region words
      "this", "is", "a", "an", "the", "there", "of", "with", "and", "in", "on", "at", "to", "next",
      "small", "large", "big", "tiny", "left", "right", "top", "bottom", "center", "corner", "near",
      "shape", "object", "image",
      // colors
      "red", "green", "blue", "yellow", "purple", "orange",
      // shapes
      "rectangle", "circle", "triangle",
  };
  return words;
}

}  // namespace

Vocabulary::Vocabulary() : Vocabulary(default_words()) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  if (words.size() < 3 || words[0] != "[CLS]" || words[1] != "[PAD]" || words[2] != "[UNK]") {
    throw Error("vocabulary must start with [CLS], [PAD], [UNK]");
  }
  for (const auto& w : words) {
    if (word_to_id_.count(w)) throw Error("duplicate vocabulary word '" + w + "'");
    word_to_id_.emplace(w, static_cast<std::int32_t>(id_to_word_.size()));
    id_to_word_.push_back(w);
  }
}

std::int32_t Vocabulary::id(const std::string& word) const {
  auto it = word_to_id_.find(word);
  return it == word_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_word_.size()) return id_to_word_[kUnk];
  return id_to_word_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocabulary::encode(const std::string& text) const {
  std::vector<std::int32_t> ids;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) ids.push_back(id(current));
    current.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      current.push_back(static_cast<char>(std::tolower(u)));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

// ---- text encoder ----------------------------------------------------------------

template <typename T>
SequenceBatch<T> encode_text(const std::vector<std::vector<std::int32_t>>& ids, const TextEncoderParams<T>& params,
                             std::size_t heads, std::size_t max_len) {
  if (ids.empty()) throw Error("encode_text: empty batch");
  const std::size_t vocab = params.token_embedding.rows();
  std::vector<std::size_t> tok, pos;
  SequenceBatch<T> seq;
  std::size_t offset = 0;
  for (const auto& sentence : ids) {
    if (sentence.size() > max_len) {
      throw Error("text of " + std::to_string(sentence.size()) + " tokens exceeds maximum length " + std::to_string(max_len));
    }
    seq.segments.push_back(Segment{offset, sentence.size() + 1});
    offset += sentence.size() + 1;
    tok.push_back(static_cast<std::size_t>(Vocabulary::kCls));
    pos.push_back(0);
    for (std::size_t i = 0; i < sentence.size(); ++i) {
      const auto id = sentence[i];
      const bool known = id >= 0 && static_cast<std::size_t>(id) < vocab;
      tok.push_back(known ? static_cast<std::size_t>(id) : static_cast<std::size_t>(Vocabulary::kUnk));
      pos.push_back(i + 1);
    }
  }
  seq.tokens = add(embedding_lookup(params.token_embedding, tok), gather_rows(params.positions, pos));
  for (const auto& layer : params.layers) seq = transformer_layer(seq, layer, heads);
  seq.tokens = params.norm(seq.tokens);
  return seq;
}

#define TEXTPRUNE_INSTANTIATE(T)                                                                                   \
  template struct SequenceBatch<T>;                                                                                \
  template SequenceBatch<T> single_sequence(Tensor<T>);                                                            \
  template SequenceBatch<T> stack_sequences(const std::vector<Tensor<T>>&);                                        \
  template Tensor<T> init_normal(Shape, Rng&, double);                                                             \
  template Linear<T> init_linear(std::size_t, std::size_t, Rng&);                                                  \
  template LayerNormParams<T> init_layernorm(std::size_t);                                                         \
  template TransformerLayerParams<T> init_transformer_layer(std::size_t, std::size_t, Rng&);                       \
  template void collect_parameters(const std::string&, const Linear<T>&, ParameterList<T>&);                       \
  template void collect_parameters(const std::string&, const LayerNormParams<T>&, ParameterList<T>&);              \
  template void collect_parameters(const std::string&, const TransformerLayerParams<T>&, ParameterList<T>&);       \
  template SequenceBatch<T> transformer_layer(const SequenceBatch<T>&, const TransformerLayerParams<T>&,           \
                                              std::size_t, std::vector<AttentionRecord<T>>*);                      \
  template Tensor<T> patchify(const Image&, std::size_t);                                                          \
  template SequenceBatch<T> patch_embed(std::span<const Image* const>, std::size_t, const PatchEmbedParams<T>&);   \
  template SequenceBatch<T> encode_text(const std::vector<std::vector<std::int32_t>>&, const TextEncoderParams<T>&, \
                                        std::size_t, std::size_t);

TEXTPRUNE_INSTANTIATE(float)
TEXTPRUNE_INSTANTIATE(double)

#undef TEXTPRUNE_INSTANTIATE

}  // namespace textprune
