// SPDX-License-Identifier: Apache-2.0
//
// Pre-training loop: every step draws one object batch (patch-text alignment)
// and one image-caption batch (contrastive + matching), sums the three losses
// and takes one AdamW step.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "textprune/losses.hpp"
#include "textprune/model.hpp"
#include "textprune/synth.hpp"

namespace textprune {

enum class SwitchRule { Step, LossEma };

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t pair_batch = 32;    // image-caption pairs per step
  std::size_t object_batch = 32;  // box-supervised scenes per step
  double learning_rate = 1e-3;
  std::optional<std::size_t> warmup_steps;    // default min(200, steps / 10)
  double weight_decay = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 42;
  std::optional<std::size_t> fallback_steps;  // default steps / 5
  SwitchRule switch_rule = SwitchRule::Step;
  double switch_threshold = 0.3;  // alignment-loss EMA below which LossEma switches
  std::size_t ema_window = 200;
  std::size_t eval_interval = 0;        // 0 disables periodic evaluation
  std::size_t eval_scenes = 100;
  std::size_t checkpoint_interval = 0;  // 0 writes only the final checkpoint

  void validate() const;
  std::size_t warmup() const;
  std::size_t fallback_switch() const;
};

// Linear warmup to the base rate, then cosine decay to zero at `steps`.
double learning_rate_at(const TrainConfig& config, std::size_t step);

template <typename T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  AdamW(ParameterList<T> params, Options options);

  // theta <- theta (1 - lr wd) - lr mhat / (sqrt(vhat) + eps). Decay applies
  // to rank-2 tensors only. Parameters without a gradient see g = 0.
  void step(double lr);

  std::size_t steps_taken() const { return t_; }
  void set_steps_taken(std::size_t t) { t_ = t; }
  const ParameterList<T>& params() const { return params_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

 private:
  ParameterList<T> params_;
  Options options_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

struct StepRecord {
  std::size_t step = 0;
  double pta = 0, itc = 0, itm = 0, total = 0;
  DetectorMode mode = DetectorMode::AttentionFallback;
};

struct TrainState {
  TrainState() = default;
  TrainState(TrainState&&) = default;
  TrainState& operator=(TrainState&&) = default;
  // Parameters are shared handles; copying would alias them.
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;

  ModelConfig model;
  TrainConfig train;
  SceneSpec data;
  ModelParams<float> params;
  AdamW<float> optimizer;
  std::size_t step = 0;
  std::optional<double> pta_ema;
  bool switched = false;  // LossEma rule latch
  std::vector<StepRecord> history;
};

// Fresh state: parameters from the training seed, zero moments.
TrainState init_train_state(const ModelConfig& model, const TrainConfig& train, const SceneSpec& data);

// Detector mode for the state's next step.
DetectorMode scheduled_mode(const TrainState& state);

struct PtaBatch {
  std::vector<PtaExample> examples;
};
struct PairBatch {
  std::vector<PairExample> examples;
};

// Batches for a given step depend only on (seed, step).
PtaBatch make_pta_batch(const TrainState& state, std::size_t step);
PairBatch make_pair_batch(const TrainState& state, std::size_t step);

// One optimizer update on L = L_pta + L_itc + L_itm. Throws Error naming the
// loss component (or parameter) when a non-finite value appears; the state
// is left untouched in that case.
StepRecord pretrain_step(TrainState& state, const PtaBatch& pta, const PairBatch& pairs);

// Float version of the loss graph, exposed for gradient checks and tests.
template <typename T>
LossBundle<T> compute_losses(const ModelParams<T>& params, const ModelConfig& config, const PtaBatch& pta,
                             const PairBatch& pairs, DetectorMode mode);

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const TrainState&)> on_checkpoint;  // called at intervals and after the last step
};

// Runs from state.step up to `until` (default: the configured step count).
void train(TrainState& state, const TrainHooks& hooks = {}, std::optional<std::size_t> until = std::nullopt);

std::string csv_header();
std::string csv_row(const StepRecord& record);

struct DetectorMetrics {
  double accuracy = 0;          // top-K rule
  double recall = 0;            // top-K rule, scenes with positives only
  double accuracy_at_half = 0;  // score > 0.5 rule
  double recall_at_half = 0;
  double full_recall_rate = 0;  // scenes whose positives are all kept (top-K)
  std::size_t scenes = 0;
  std::size_t positive_scenes = 0;
};

// Held-out scenes are drawn from `eval_seed`, disjoint from the training
// streams.
DetectorMetrics evaluate_detector(const ModelParams<float>& params, const ModelConfig& config, const SceneSpec& spec,
                                  std::size_t n_scenes, double keep_ratio, std::uint64_t eval_seed);

// Evaluation from externally supplied scores (one score vector per scene).
DetectorMetrics detector_metrics(const std::vector<std::vector<double>>& scores,
                                 const std::vector<std::vector<std::uint8_t>>& labels, double keep_ratio);

// Image -> text retrieval@1 over `n_pairs` held-out pairs with distinct
// captions. Image i is encoded with caption j's [CLS] for every j, so the
// detector never sees the answer.
double retrieval_at_1(const ModelParams<float>& params, const ModelConfig& config, const SceneSpec& spec,
                      std::size_t n_pairs, std::uint64_t eval_seed, DetectorMode mode);

inline constexpr std::uint64_t kEvalStream = 0x45564131;  // held-out scenes

}  // namespace textprune
