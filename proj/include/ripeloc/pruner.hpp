#pragma once
// ===== BatchNorm-gamma structured channel pruning =====
//
// Network-slimming style: the prunable BN channels are ranked globally by
// |gamma| ascending (ties by layer then channel) and the lowest `ratio`
// fraction is removed, with a per-layer floor of 4 kept channels. The
// prunable set contains exactly the widths whose removal is EXACT for a
// dead channel (gamma = beta = 0): the producer conv loses rows, its BN
// loses entries, every consumer loses the matching input slices, and a
// depthwise-separable consumer additionally gets the dw BN's eval-mode
// response to the dead channel folded into the following pointwise BN's
// running mean (in training mode batch statistics absorb that constant on
// their own). Concat consumers (SPPF's pooled stack, ghost fusion, the
// C2PSA bypass) remap indices through the concat.
//
// Structurally rigid widths stay out of the set: C3k2 block inputs
// (positional half-split plus residual units), the C2PSA attention segment
// (positional table and 1/sqrt(d) scale change under slicing), ghost
// outputs (tied 1:1 to their primaries and feeding C3k2 inputs), backbone
// P3/P4/P5 and t4 outputs (concat partners of C3k2 inputs), the shared head
// width (one stem serves all three scales), and the raw head output convs.
//
// Kept/removed indices are reported relative to the site's own segment
// (only the C2PSA bypass has a nonzero segment offset inside its BN).

#include <cstdint>
#include <string>
#include <vector>

#include "ripeloc/model.hpp"
#include "ripeloc/trainer.hpp"

namespace ripeloc {

// canonical prunable-site names, in ranking order (the `layer` index below)
std::vector<std::string> prunable_layers(const ModelPlan& plan);

struct RankedChannel {
  int layer = 0;    // index into prunable_layers()
  int channel = 0;  // segment-relative
  double mag = 0.0; // |gamma|
};
// ascending by (|gamma|, layer, channel); covers every prunable channel
std::vector<RankedChannel> rank_channels(Model& m);

struct LayerPrune {
  std::string name;
  int before = 0;         // segment width pre-prune
  std::vector<int> kept;  // strictly increasing, segment-relative
  bool floor_hit = false; // ranking wanted more but the floor blocked it
};

struct PruneReport {
  double ratio_requested = 0.0;
  double ratio_achieved = 0.0;  // removed / total, exact count fraction
  int64_t params_before = 0, params_after = 0;
  int channels_total = 0, channels_removed = 0;
  std::vector<LayerPrune> layers;
};

struct PruneResult {
  Model model;  // narrowed plan, surgically sliced weights
  PruneReport report;
};

// 0 <= ratio < 1 (0 is the identity pipeline); UsageError otherwise.
// ratio > 0 removes at least one channel so params strictly drop.
PruneResult prune(Model& m, double ratio);

std::string prune_report_to_json(const PruneReport& r);

// post-prune recovery: one light-augmentation phase at lr 0.0003
TrainResult finetune(Model& m, const std::vector<Sample>& train_set,
                     const std::vector<Sample>& val_set, int epochs,
                     const TrainOptions& opts = {});

}  // namespace ripeloc
