#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctnet/autodiff.hpp"
#include "ctnet/data.hpp"
#include "ctnet/model.hpp"

namespace ctnet {

struct TrainConfig {
  int batch_size = 8;
  int epochs = 33;
  double lr0 = 2e-4;
  // 1-based epoch numbers at which the learning rate halves ("the 15th").
  std::vector<int> halving_epochs = {15, 22, 24, 26, 28, 30, 31};
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  NoiseSpec noise = NoiseSpec::fixed(25.0);
  int patch_size = 48;
  int patches_per_image = 108;
  bool augment = true;
  // The objective divides by the sample count; this switches to a per-element
  // mean instead.
  bool pixel_mean_loss = false;
  bool clip_noisy = false;   // clamp noisy inputs to [0,1] before the forward
  double grad_clip = 0.0;    // global-norm clip; 0 disables
  int steps_limit = 0;       // stop after this many optimizer steps; 0 = all epochs

  void validate() const;
};

// Squared-error objective: sum of squared differences over the batch divided
// by 2n, where n is the number of samples (or the element count under
// pixel_mean). The gradient with respect to pred is (pred - target) / n.
Var mse_loss(Graph& g, Var pred, Var target, bool pixel_mean = false);

// Piecewise-constant halving schedule over 0-based epochs.
double lr_at(int epoch, const TrainConfig& cfg);

// One full forward + objective on a (noisy, clean) batch.
double model_loss(const ModelConfig& cfg, const ParamMap& params, const Tensor& noisy,
                  const Tensor& clean, bool pixel_mean = false);

struct LossGrads {
  double loss = 0.0;
  ParamMap grads;
};

// Forward + reverse pass; returns d(loss)/d(param) for every parameter.
LossGrads model_loss_grads(const ModelConfig& cfg, const ParamMap& params,
                           const Tensor& noisy, const Tensor& clean,
                           bool pixel_mean = false);

struct AdamState {
  std::int64_t t = 0;
  ParamMap m;
  ParamMap v;
  static AdamState init(const ParamMap& params);
};

// One Adam update with bias correction; eps sits outside the corrected
// root. Throws ConfigError when a gradient is missing.
void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, double lr,
               const TrainConfig& cfg);

struct StepLog {
  int epoch = 0;
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochLog {
  int epoch = 0;
  std::int64_t step = 0;  // global step count at end of epoch
  double lr = 0.0;
  double mean_loss = 0.0;
  double val_psnr = 0.0;  // NaN when no validation set was given
};

struct TrainResult {
  ParamMap params;
  AdamState state;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  bool aborted_non_finite = false;
  bool interrupted = false;
};

// Trains from scratch on the clean images: patches are cut and augmented
// once up front, then each epoch shuffles the corpus and draws fresh noise.
// Per-epoch checkpoints go to checkpoint_path (kept at the last finished
// epoch if the loss turns non-finite); metrics_csv_path gets one row per
// step plus one per epoch with validation PSNR. Either path may be empty.
// `stop` is polled between steps for external interruption.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const std::vector<ImageBuffer>& train_images,
                  const std::vector<ImageBuffer>& val_images,
                  const std::string& checkpoint_path = "",
                  const std::string& metrics_csv_path = "",
                  const std::function<bool()>& stop = {});

// Derived noise sigma for validation images: fixed spec uses it directly,
// blind uses the range midpoint.
double validation_sigma(const NoiseSpec& spec);

}  // namespace ctnet
