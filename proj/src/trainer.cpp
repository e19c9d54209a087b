// SPDX-License-Identifier: Apache-2.0

#include "textprune/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <set>

#include "textprune/rng.hpp"

namespace textprune {

namespace {

constexpr std::uint64_t kPtaStream = 1;
constexpr std::uint64_t kPairStream = 2;

std::vector<std::size_t> iota_n(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), start);
  return v;
}

template <typename Fn>
auto named_component(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(std::string("non-finite or invalid value in ") + name + " loss: " + e.what());
  }
}

template <typename T>
SequenceBatch<T> join(const SequenceBatch<T>& a, const SequenceBatch<T>& b) {
  SequenceBatch<T> out;
  out.tokens = concat(std::vector<Tensor<T>>{a.tokens, b.tokens}, 0);
  out.segments = a.segments;
  const std::size_t shift = a.tokens.rows();
  for (auto s : b.segments) out.segments.push_back(Segment{s.offset + shift, s.length});
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error("train config: " + msg); };
  if (steps == 0) fail("steps must be at least 1");
  if (pair_batch == 0 || object_batch == 0) fail("batch sizes must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and non-negative");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (fallback_steps && *fallback_steps > steps) fail("fallback_steps exceeds steps");
  if (warmup_steps && *warmup_steps > steps) fail("warmup_steps exceeds steps");
  if (ema_window == 0) fail("ema_window must be at least 1");
}

std::size_t TrainConfig::warmup() const { return warmup_steps ? *warmup_steps : std::min<std::size_t>(200, steps / 10); }

std::size_t TrainConfig::fallback_switch() const { return fallback_steps ? *fallback_steps : steps / 5; }

double learning_rate_at(const TrainConfig& config, std::size_t step) {
  const std::size_t warm = config.warmup();
  if (step < warm) return config.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::size_t>(1, config.steps - warm));
  const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
  return config.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- AdamW ---------------------------------------------------------------------

template <typename T>
AdamW<T>::AdamW(ParameterList<T> params, Options options) : params_(std::move(params)), options_(options) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    auto& tensor = params_[p].second;
    auto theta = tensor.mutable_data();
    const auto grad = tensor.grad();
    const bool has = tensor.has_grad();
    const double decay = tensor.rank() == 2 ? 1.0 - lr * options_.weight_decay : 1.0;
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = has ? static_cast<double>(grad[i]) : 0.0;
      m[i] = static_cast<T>(b1 * static_cast<double>(m[i]) + (1.0 - b1) * g);
      v[i] = static_cast<T>(b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g);
      const double mhat = static_cast<double>(m[i]) / c1;
      const double vhat = static_cast<double>(v[i]) / c2;
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) * decay - lr * mhat / (std::sqrt(vhat) + options_.eps));
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

// ---- state ---------------------------------------------------------------------

TrainState init_train_state(const ModelConfig& model, const TrainConfig& train, const SceneSpec& data) {
  model.validate();
  train.validate();
  data.validate();
  if (data.canvas != model.image_size) {
    throw Error("scene canvas " + std::to_string(data.canvas) + " does not match model image_size " +
                std::to_string(model.image_size));
  }
  TrainState state;
  state.model = model;
  state.train = train;
  state.data = data;
  state.params = init_model<float>(model, train.seed);
  state.optimizer = AdamW<float>(parameters(state.params),
                                 {train.beta1, train.beta2, train.adam_eps, train.weight_decay});
  return state;
}

DetectorMode scheduled_mode(const TrainState& state) {
  if (state.model.mode == DetectorMode::Bypass || state.model.keep_ratio == 1.0) return DetectorMode::Bypass;
  if (state.model.mode == DetectorMode::AttentionFallback) return DetectorMode::AttentionFallback;
  if (state.train.switch_rule == SwitchRule::LossEma) {
    return state.switched ? DetectorMode::Learned : DetectorMode::AttentionFallback;
  }
  return state.step < state.train.fallback_switch() ? DetectorMode::AttentionFallback : DetectorMode::Learned;
}

PtaBatch make_pta_batch(const TrainState& state, std::size_t step) {
  return {sample_pta_batch(derive_seed(state.train.seed, kPtaStream, step), state.data, state.train.object_batch,
                           state.model.patch_size, Vocabulary())};
}

PairBatch make_pair_batch(const TrainState& state, std::size_t step) {
  return {sample_pair_batch(derive_seed(state.train.seed, kPairStream, step), state.data, state.train.pair_batch,
                            Vocabulary())};
}

// ---- losses --------------------------------------------------------------------

template <typename T>
LossBundle<T> compute_losses(const ModelParams<T>& params, const ModelConfig& config, const PtaBatch& pta,
                             const PairBatch& pairs, DetectorMode mode) {
  std::optional<Tensor<T>> l_pta, l_itc, l_itm;

  l_pta = named_component("pta", [&] {
    std::vector<std::vector<std::int32_t>> ids;
    std::vector<const Image*> images;
    std::vector<std::uint8_t> labels;
    for (const auto& ex : pta.examples) {
      ids.push_back(ex.caption_ids);
      images.push_back(&ex.image);
      labels.insert(labels.end(), ex.labels.labels.begin(), ex.labels.labels.end());
    }
    auto text = encode_captions<T>(ids, config, params);
    auto prefix = encode_visual_prefix<T>(images, config, params);
    const auto idx = iota_n(images.size());
    auto scores = detector_scores<T>(prefix, text.cls_rows(), idx, idx, config, params);
    return pta_loss(scores, labels);
  });

  const std::size_t b = pairs.examples.size();
  std::vector<std::vector<std::int32_t>> ids;
  std::vector<const Image*> images;
  for (const auto& ex : pairs.examples) {
    ids.push_back(ex.caption_ids);
    images.push_back(&ex.image);
  }
  const bool text_dependent = mode == DetectorMode::Learned && config.keep_ratio < 1.0;

  SequenceBatch<T> text, visual;
  VisualPrefix<T> prefix;
  Tensor<T> t_cls;
  Tensor<T> image_emb, text_emb;
  l_itc = named_component("itc", [&] {
    text = encode_captions<T>(ids, config, params);
    t_cls = text.cls_rows();
    prefix = encode_visual_prefix<T>(images, config, params);
    const auto idx = iota_n(b);
    auto det = apply_detector<T>(prefix, &t_cls, idx, idx, mode, config, params);
    visual = encode_visual_suffix<T>(det.reduced, config, params);
    image_emb = pool_image(visual, params);
    text_emb = pool_text(text, params);
    return itc_loss(image_emb, text_emb, params.temperature);
  });

  l_itm = named_component("itm", [&] {
    std::vector<std::size_t> text_index = iota_n(b), visual_index = iota_n(b);
    std::vector<std::uint8_t> labels(b, 1);
    SequenceBatch<T> all_visual = visual;
    if (b >= 2) {
      std::vector<double> sim(b * b);
      std::vector<std::uint8_t> eligible(b * b);
      const std::size_t d = image_emb.cols();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(image_emb.at(i, c)) * text_emb.at(j, c);
          sim[i * b + j] = s;
          // A caption naming any object in image i is a true match, not a negative.
          const auto& present = pairs.examples[i].object_classes;
          eligible[i * b + j] = std::find(present.begin(), present.end(), pairs.examples[j].caption_class) == present.end();
        }
      const auto neg = select_hard_negatives(sim, b, eligible);
      // Negative pairs: (image i, its hardest caption) and (hardest image, caption j).
      std::vector<std::size_t> neg_images, neg_texts;
      for (std::size_t i = 0; i < b; ++i) {
        neg_images.push_back(i);
        neg_texts.push_back(neg.text_for_image[i]);
      }
      for (std::size_t j = 0; j < b; ++j) {
        neg_images.push_back(neg.image_for_text[j]);
        neg_texts.push_back(j);
      }
      text_index.insert(text_index.end(), neg_texts.begin(), neg_texts.end());
      labels.resize(3 * b, 0);
      if (text_dependent) {
        auto det = apply_detector<T>(prefix, &t_cls, neg_images, neg_texts, mode, config, params);
        all_visual = join(visual, encode_visual_suffix<T>(det.reduced, config, params));
        visual_index = iota_n(3 * b);
      } else {
        visual_index.insert(visual_index.end(), neg_images.begin(), neg_images.end());
      }
    }
    auto cross = fuse_modalities<T>(text, all_visual, text_index, visual_index, config, params);
    return itm_loss(itm_logits(cross, params), labels);
  });

  return total_loss<T>(std::move(l_pta), std::move(l_itc), std::move(l_itm), LossSet::all());
}

template LossBundle<float> compute_losses(const ModelParams<float>&, const ModelConfig&, const PtaBatch&,
                                          const PairBatch&, DetectorMode);
template LossBundle<double> compute_losses(const ModelParams<double>&, const ModelConfig&, const PtaBatch&,
                                           const PairBatch&, DetectorMode);

// ---- training ------------------------------------------------------------------

StepRecord pretrain_step(TrainState& state, const PtaBatch& pta, const PairBatch& pairs) {
  const DetectorMode mode = scheduled_mode(state);
  const auto& plist = state.optimizer.params();
  for (const auto& [name, p] : plist) {
    auto t = p;
    t.zero_grad();
  }

  LossBundle<float> bundle;
  {
    Tape<float> tape;
    bundle = compute_losses<float>(state.params, state.model, pta, pairs, mode);
    tape.backward(bundle.total);
  }
  for (const auto& [name, p] : plist) {
    for (float g : p.grad()) {
      if (!std::isfinite(g)) throw Error("non-finite gradient in parameter " + name + " at step " + std::to_string(state.step));
    }
  }

  state.optimizer.step(learning_rate_at(state.train, state.step));
  auto tau = state.params.temperature.mutable_data();
  tau[0] = std::clamp(tau[0], 1e-3f, 1.0f);

  StepRecord rec;
  rec.step = state.step;
  rec.pta = bundle.pta->item();
  rec.itc = bundle.itc->item();
  rec.itm = bundle.itm->item();
  rec.total = bundle.total.item();
  rec.mode = mode;

  const double alpha = 2.0 / (static_cast<double>(state.train.ema_window) + 1.0);
  state.pta_ema = state.pta_ema ? *state.pta_ema + alpha * (rec.pta - *state.pta_ema) : rec.pta;
  if (state.train.switch_rule == SwitchRule::LossEma && *state.pta_ema < state.train.switch_threshold) state.switched = true;
  state.history.push_back(rec);
  ++state.step;
  return rec;
}

void train(TrainState& state, const TrainHooks& hooks, std::optional<std::size_t> until) {
  const std::size_t last = std::min(until.value_or(state.train.steps), state.train.steps);
  while (state.step < last) {
    const std::size_t step = state.step;
    const auto rec = pretrain_step(state, make_pta_batch(state, step), make_pair_batch(state, step));
    if (hooks.on_step) hooks.on_step(rec);
    const bool interval = state.train.checkpoint_interval > 0 && state.step % state.train.checkpoint_interval == 0;
    if (hooks.on_checkpoint && (interval || state.step == state.train.steps)) hooks.on_checkpoint(state);
  }
}

std::string csv_header() { return "step,pta,itc,itm,total,mode"; }

std::string csv_row(const StepRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%s", r.step, r.pta, r.itc, r.itm, r.total,
                to_string(r.mode).c_str());
  return buf;
}

// ---- evaluation ----------------------------------------------------------------

DetectorMetrics detector_metrics(const std::vector<std::vector<double>>& scores,
                                 const std::vector<std::vector<std::uint8_t>>& labels, double keep_ratio) {
  if (scores.size() != labels.size()) throw Error("detector_metrics: score and label counts differ");
  DetectorMetrics m;
  std::uint64_t patches = 0, correct = 0, correct_half = 0, full = 0;
  std::vector<double> recalls, recalls_half;
  for (std::size_t s = 0; s < scores.size(); ++s) {
    const auto& a = scores[s];
    const auto& y = labels[s];
    if (a.size() != y.size()) throw Error("detector_metrics: scene " + std::to_string(s) + " has mismatched lengths");
    const auto sel = select_topk(std::span<const double>(a), keep_ratio);
    std::vector<std::uint8_t> kept(a.size(), 0);
    for (auto k : sel.kept) kept[k] = 1;
    std::size_t pos = 0, hit = 0, hit_half = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const bool half = a[i] > 0.5;
      correct += (kept[i] != 0) == (y[i] != 0);
      correct_half += half == (y[i] != 0);
      if (y[i]) {
        ++pos;
        hit += kept[i];
        hit_half += half;
      }
    }
    patches += a.size();
    if (pos > 0) {
      recalls.push_back(static_cast<double>(hit) / static_cast<double>(pos));
      recalls_half.push_back(static_cast<double>(hit_half) / static_cast<double>(pos));
      full += hit == pos;
    }
  }
  // Sorted sums make the means independent of scene order.
  auto mean_sorted = [](std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  m.scenes = scores.size();
  m.positive_scenes = recalls.size();
  m.accuracy = patches ? static_cast<double>(correct) / static_cast<double>(patches) : 0.0;
  m.accuracy_at_half = patches ? static_cast<double>(correct_half) / static_cast<double>(patches) : 0.0;
  m.recall = mean_sorted(recalls);
  m.recall_at_half = mean_sorted(recalls_half);
  m.full_recall_rate = recalls.empty() ? 0.0 : static_cast<double>(full) / static_cast<double>(recalls.size());
  return m;
}

DetectorMetrics evaluate_detector(const ModelParams<float>& params, const ModelConfig& config, const SceneSpec& spec,
                                  std::size_t n_scenes, double keep_ratio, std::uint64_t eval_seed) {
  if (n_scenes == 0) throw Error("need at least one scene");
  keep_count(config.num_patches(), keep_ratio);  // validates the ratio
  const Vocabulary vocab;
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<std::uint8_t>> labels;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < n_scenes; start += kChunk) {
    const std::size_t count = std::min(kChunk, n_scenes - start);
    std::vector<Scene> scenes;
    std::vector<std::vector<std::int32_t>> ids;
    std::vector<const Image*> images;
    for (std::size_t i = 0; i < count; ++i) scenes.push_back(generate_scene(derive_seed(eval_seed, kEvalStream, start + i), spec));
    for (const auto& sc : scenes) {
      const auto& box = sc.objects[sc.captioned];
      ids.push_back(vocab.encode(box_to_text(box)));
      images.push_back(&sc.image);
      labels.push_back(bbox_to_patch_labels(sc.image.width, sc.image.height, config.patch_size, box).labels);
    }
    auto text = encode_captions<float>(ids, config, params);
    auto prefix = encode_visual_prefix<float>(images, config, params);
    const auto idx = iota_n(count);
    auto a = detector_scores<float>(prefix, text.cls_rows(), idx, idx, config, params);
    const std::size_t n = config.num_patches();
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> row(n);
      for (std::size_t p = 0; p < n; ++p) row[p] = a[i * n + p];
      scores.push_back(std::move(row));
    }
  }
  return detector_metrics(scores, labels, keep_ratio);
}

double retrieval_at_1(const ModelParams<float>& params, const ModelConfig& config, const SceneSpec& spec,
                      std::size_t n_pairs, std::uint64_t eval_seed, DetectorMode mode) {
  if (n_pairs < 2) throw Error("retrieval needs at least two pairs");
  const Vocabulary vocab;
  std::vector<Scene> scenes;
  std::set<std::string> seen;
  for (std::uint64_t i = 0; scenes.size() < n_pairs; ++i) {
    if (i > 1000 * n_pairs) throw Error("could not draw " + std::to_string(n_pairs) + " scenes with distinct captions");
    Scene sc = generate_scene(derive_seed(eval_seed, kEvalStream + 1, i), spec);
    if (seen.insert(sc.caption).second) scenes.push_back(std::move(sc));
  }
  std::vector<std::vector<std::int32_t>> ids;
  std::vector<const Image*> images;
  for (const auto& sc : scenes) {
    ids.push_back(vocab.encode(sc.caption));
    images.push_back(&sc.image);
  }
  const std::size_t n = n_pairs;
  auto text = encode_captions<float>(ids, config, params);
  auto t_cls = text.cls_rows();
  auto text_emb = pool_text(text, params);
  auto prefix = encode_visual_prefix<float>(images, config, params);
  std::vector<std::size_t> image_index, text_index;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i) {
      image_index.push_back(i);
      text_index.push_back(j);
    }
  auto det = apply_detector<float>(prefix, &t_cls, image_index, text_index, mode, config, params);
  auto image_emb = pool_image(encode_visual_suffix<float>(det.reduced, config, params), params);
  const std::size_t d = text_emb.cols();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_sim = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(image_emb.at(j * n + i, c)) * text_emb.at(j, c);
      if (s > best_sim) {
        best_sim = s;
        best = j;
      }
    }
    hits += best == i;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace textprune
