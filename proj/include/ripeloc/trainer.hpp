#pragma once
// ===== SGD training: cosine annealing, freezing, progressive unfreezing ====
//
// The training loop owns one model on one thread. Each phase re-derives the
// backbone freeze mask and the augmentation preset, then runs a cosine LR
// schedule from lr0 down to lrf = lr0 / 100 across its epochs (both
// endpoints are hit exactly). Phase boundaries are the only LR
// discontinuities.
//
// Determinism contract: with a fixed seed the whole run is bit-reproducible
// on one thread. Per-sample augmentation streams come from
// Rng::for_sample(seed, epoch, index) and the per-epoch shuffle from its own
// reserved stream, so neither batch size nor logging cadence perturbs the
// draws.

#include <cstdint>
#include <iosfwd>
#include <set>
#include <vector>

#include "ripeloc/augment.hpp"
#include "ripeloc/data.hpp"
#include "ripeloc/evalkit.hpp"
#include "ripeloc/model.hpp"

namespace ripeloc {

// ===== Phase plan =====

struct PhaseConfig {
  std::set<int> frozen;  // backbone record indices, subset of 0..9
  double lr0 = 0.01;
  int epochs = 0;
  AugStrength aug = AugStrength::Light;
};

// frozen subset of 0..9, lr0 > 0, epochs > 0; violations throw UsageError
void validate_phase(const PhaseConfig& p);

// Progressive unfreezing: phase 1 freezes the whole backbone (0..9, lr
// 0.002, 50 epochs, heavy aug), phase 2 keeps 0..4 frozen (lr 0.001, 80,
// moderate), phase 3 trains everything (lr 0.0003, 120, light). Epoch counts
// scale proportionally for desk runs, each rounded to the nearest epoch with
// a floor of 1 (scale 0.1 -> 5, 8, 12).
std::vector<PhaseConfig> make_phase_plan(double epoch_scale = 1.0);

// Single-phase stock recipe: nothing frozen, lr0 0.01, 300 epochs (scaled
// like above), moderate aug. Its lrf works out to the stock 0.0001.
std::vector<PhaseConfig> baseline_plan(double epoch_scale = 1.0);

// lrf + (lr0 - lrf) * (1 + cos(pi * epoch / total)) / 2, with the endpoints
// returned exactly (the raw formula re-rounds them). total == 0 is the
// degenerate one-epoch schedule and yields lr0. Requires 0 <= epoch <=
// total; violations throw UsageError.
double cosine_lr(double lr0, double lrf, int epoch, int total);

// ===== Optimizer =====

// SGD with momentum and decoupled-from-nothing classic weight decay folded
// into the gradient: v <- momentum*v + g + wd*p; p <- p - lr*v.
//
// Frozen parameters (requires_grad() false at step time) are skipped
// entirely: bytes untouched and no momentum accumulation, so a later
// unfreeze starts from a clean velocity. A non-finite value in any live
// gradient aborts the whole step before any parameter moves; the incident is
// counted and the step counter stays put.
class Sgd {
 public:
  // momentum in [0,1), weight_decay >= 0; violations throw UsageError
  explicit Sgd(std::vector<Tensor> params, double momentum = 0.937,
               double weight_decay = 0.0005);

  bool step(double lr);  // false when aborted on a non-finite gradient
  void zero_grad();

  int64_t global_step() const { return step_; }
  double current_lr() const { return lr_; }
  int nan_incidents() const { return nan_incidents_; }
  size_t n_params() const { return params_.size(); }
  // velocity buffer for one parameter slot (shape mirrors the parameter)
  const std::vector<double>& velocity(size_t slot) const;

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> vel_;
  double momentum_ = 0.937;
  double wd_ = 0.0005;
  int64_t step_ = 0;
  double lr_ = 0.0;
  int nan_incidents_ = 0;
};

// All learnable tensors in visit order (buffers excluded, frozen included so
// one optimizer instance survives unfreezing).
std::vector<Tensor> gather_params(Model& m);
// Total elements of parameters whose requires_grad() is currently true.
int64_t trainable_param_count(Model& m);

// ===== Training loop =====

struct TrainOptions {
  int batch_size = 16;  // scaled down for desk runs; BN sees what it gets
  double momentum = 0.937;
  double weight_decay = 0.0005;
  double lrf_divisor = 100.0;  // per-phase lrf = lr0 / lrf_divisor
  uint64_t seed = 0;
  double val_conf = 0.01;  // low-confidence decode so AP sweeps the curve
  double val_iou = 0.45;   // NMS threshold for the val decode
};

struct EpochLog {
  int phase = 0;  // 1-based
  int epoch = 0;  // 1-based, global across phases
  double lr = 0.0;
  double box_loss = 0.0, cls_loss = 0.0, dfl_loss = 0.0;
  double val_map50 = 0.0, val_map5095 = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;  // one row per epoch actually run
  int nan_steps = 0;          // aborted optimizer steps
  bool diverged = false;      // non-finite loss stopped the run early
};

// Runs the phases in order on `model` (mutated in place). Samples must all
// match the model's input size. Throws DataError on an empty train set or a
// sample size mismatch, UsageError on an empty plan / invalid options.
TrainResult train(Model& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set,
                  const std::vector<PhaseConfig>& phases,
                  const TrainOptions& opts = {});

// Eval-mode inference over a labeled set: forward in batches, postprocess
// each image at (conf, iou), pair with its ground truth. The scenes feed
// evalkit directly.
std::vector<EvalScene> run_model_eval(Model& model,
                                      const std::vector<Sample>& data,
                                      double conf_thresh, double iou_thresh,
                                      int batch_size);

// header row then one CSV row per epoch:
// phase,epoch,lr,box_loss,cls_loss,dfl_loss,val_map50,val_map5095
void write_train_log_csv(std::ostream& os, const std::vector<EpochLog>& log);

}  // namespace ripeloc
