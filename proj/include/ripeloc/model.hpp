#pragma once
// ===== Full detector assembly: backbone + LFPN neck + compact head =====
//
// Layout (nominal widths at width_multiple w, base [64,128,256,512,1024]):
//   backbone records 0..9 ("freeze first N backbone layers" operates here):
//     0 stem conv3x3 s2          3   -> c1
//     1 conv3x3 s2               c1  -> c2
//     2 C3k2                     c2  -> c2
//     3 conv3x3 s2               c2  -> c3
//     4 C3k2                     c3  -> c3   = P3 (stride 8)
//     5 conv3x3 s2               c3  -> c4
//     6 C3k2                     c4  -> c4   = P4 (stride 16)
//     7 conv3x3 s2               c4  -> c5
//     8 C3k2                     c5  -> c5
//     9 SPPF + C2PSA-lite        c5  -> c5   = P5 (stride 32)
//   neck (LFPN): top-down upsample+concat+DW-C3k2 (t4, t3), RAAM on the P3
//   and P4 outputs, bottom-up stride-2 DSConv + Ghost fusion + DW-C3k2
//   (d4,g4,b4 / d5,g5,b5) with a skip from backbone P5 into g5.
//   head (CDH): per-scale 1x1 align to a common width, ONE DSConv stem whose
//   tensors are shared by all three scales, a shared 1x1 classification conv
//   (2 logits) and per-scale 1x1 regression convs (4*bins channels).
//
// Every channel width lives in ModelPlan so a pruned network is just a plan
// with narrower entries; plan_from_tensors() rebuilds the plan from weight
// shapes when loading.

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ripeloc/blocks.hpp"

namespace ripeloc {

struct ConvPlanSpec {
  int cin = 0, cout = 0;
};
struct C3k2Plan {
  int cin = 0, cout = 0, inner1 = 0, inner2 = 0;  // mid = cin/2
  bool dw = false;
};
struct SppfPlan {
  int cin = 0, cout = 0, red = 0;
};
struct C2psaPlan {
  int cin = 0, cout = 0, attn_c = 0, bypass_c = 0;
};
struct RaamPlan {
  int c = 0, hidden = 0;
};
struct HeadPlan {
  int c3 = 0, c4 = 0, c5 = 0;  // neck output widths fed to the aligns
  int hc = 0;                  // aligned common width
  int stem_mid = 0;            // shared stem output width
  int classes = 2, bins = 16;
};

struct ModelPlan {
  double width = 0.25;  // informational; widths below are authoritative
  int input_px = 640;
  int classes = 2, bins = 16;
  ConvPlanSpec l0, l1, l3, l5, l7;
  C3k2Plan l2, l4, l6, l8;
  SppfPlan sppf;
  C2psaPlan psa;
  C3k2Plan t4, t3, b4, b5;  // dw = true
  RaamPlan raam3, raam4;
  ConvPlanSpec d4, d5;  // stride-2 DSConv sites
  ConvPlanSpec g4, g5;  // ghost fusion sites (cin = concat width)
  HeadPlan head;
};

// FLOP convention everywhere: 2 * MACs, convolution/FC terms only.
int64_t flops_conv2d(int cin, int cout, int k, int groups, int out_h,
                     int out_w);

// width_multiple must be one of {0.125, 0.25, 0.5, 1.0}; input_px % 32 == 0.
ModelPlan nominal_plan(double width_multiple, int num_classes, int input_px,
                       int bins = 16);
void validate_plan(const ModelPlan& p);  // structural consistency
int64_t plan_param_count(const ModelPlan& p);  // closed-form sum over blocks

struct LayerRecord {
  int index = 0;
  std::string kind;
  int cin = 0, cout = 0, stride = 1;
  bool frozen = false;
};

struct HeadOutputs {
  std::array<Tensor, 3> cls;  // (N, classes, S, S), S = input/stride
  std::array<Tensor, 3> box;  // (N, 4*bins, S, S)
  std::array<int, 3> strides{8, 16, 32};
};

struct FlopSite {
  std::string name;  // one depthwise-separable conv site in the neck
  int cout = 0, k = 3;
  int64_t ds_flops = 0;     // dw + pw cost, 2*MACs
  int64_t dense_flops = 0;  // dense k x k conv of equal cin/cout/output size
};

struct FlopReport {
  int64_t total = 0, backbone = 0, neck = 0, head = 0;
  // dense-conv neck comparator: every DSConv/DW-C3k2/Ghost site replaced by
  // dense 3x3 convs of equal widths (RAAM identical on both sides)
  int64_t neck_dense_equiv = 0;
  std::vector<FlopSite> neck_ds_sites;
};

class Model {
 public:
  static Model build(const ModelPlan& plan, uint64_t seed);

  HeadOutputs forward(const Tensor& images, bool training);
  // exposes the C2PSA attention matrix from the same pass
  HeadOutputs forward_probe(const Tensor& images, bool training,
                            Tensor* psa_attn);

  const ModelPlan& plan() const { return plan_; }
  void visit(const TensorVisit& v);
  int64_t param_count();  // brute-force enumeration (buffers excluded)
  FlopReport flops() const;

  std::vector<LayerRecord> records() const;
  // freeze semantics: requires_grad off + BN pinned to running stats
  void set_backbone_frozen(const std::set<int>& frozen_records);

  std::vector<std::pair<std::string, Tensor>> named_tensors();  // + buffers
  // strict: unknown/missing names or shape mismatches throw DataError
  void load_tensors(
      const std::vector<std::pair<std::string, Tensor>>& tensors);

  // --- parts (tests reach in; the struct is the API) ---
  ConvBnSilu bb0, bb1, bb3, bb5, bb7;
  C3k2 bb2, bb4, bb6, bb8;
  Sppf sppf;
  C2PsaLite psa;
  C3k2 t4, t3, b4, b5;
  Raam raam3, raam4;
  DsConv d4, d5;
  GhostConv g4, g5;
  ConvBnSilu align3, align4, align5;
  DsConv stem;                 // shared across scales (same tensor objects)
  RawConv cls_out;             // shared 1x1 -> classes, bias -ln(99)
  std::array<RawConv, 3> reg_out;  // per-scale 1x1 -> 4*bins

 private:
  Model() = default;
  ModelPlan plan_;
  std::array<bool, 10> record_frozen_{};
};

// plan reconstruction from weight-file shapes (pruned checkpoints)
ModelPlan plan_from_tensors(
    const std::vector<std::pair<std::string, Tensor>>& tensors);

// "standard decoupled head" comparator: per-scale dual-branch dense 3x3
// stems (cls and reg each get one) + per-scale 1x1 outputs, no sharing,
// same align convs. Documented baseline for the <= 50% head-params bound.
int64_t decoupled_head_param_count(const ModelPlan& p);

}  // namespace ripeloc
