// ===== SGD training loop: phases, cosine schedule, frozen-aware steps =====

#include "ripeloc/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <numeric>
#include <ostream>
#include <utility>

#include "ripeloc/autodiff.hpp"
#include "ripeloc/loss.hpp"
#include "ripeloc/postprocess.hpp"
#include "ripeloc/rng.hpp"

namespace ripeloc {

namespace {

// reserved for_sample index for the per-epoch shuffle stream; far above any
// plausible dataset index so it never collides with a sample's own stream
constexpr uint64_t kShuffleStream = 0x6F72646572ULL;

Tensor stack_images(const std::vector<const Image*>& imgs) {
  const int b = int(imgs.size());
  const int h = imgs[0]->h, w = imgs[0]->w;
  Tensor t = Tensor::zeros({b, 3, h, w});
  double* d = t.data();
  const size_t per = size_t(3) * size_t(h) * size_t(w);
  for (int n = 0; n < b; ++n) {
    if (imgs[size_t(n)]->px.size() != per)
      throw ShapeError("stack_images: mixed image sizes in one batch");
    std::memcpy(d + size_t(n) * per, imgs[size_t(n)]->px.data(),
                per * sizeof(double));
  }
  return t;
}

std::vector<GtNorm> labels_to_gts(const std::vector<Label>& labels) {
  std::vector<GtNorm> gts;
  gts.reserve(labels.size());
  for (const Label& l : labels) gts.push_back({l.class_id, l.cx, l.cy, l.w, l.h});
  return gts;
}

std::vector<GtBox> labels_to_gt_boxes(const std::vector<Label>& labels,
                                      int px) {
  std::vector<GtBox> out;
  out.reserve(labels.size());
  for (const Label& l : labels) {
    GtBox g;
    g.class_id = l.class_id;
    g.x1 = (l.cx - l.w / 2) * px;
    g.y1 = (l.cy - l.h / 2) * px;
    g.x2 = (l.cx + l.w / 2) * px;
    g.y2 = (l.cy + l.h / 2) * px;
    g.has_center = l.has_center;
    if (l.has_center) {
      g.cx = l.pcx * px;
      g.cy = l.pcy * px;
    }
    out.push_back(g);
  }
  return out;
}

void require_sample_size(const Sample& s, int px, const char* who) {
  if (s.image.w != px || s.image.h != px)
    throw DataError(std::string(who) + ": sample is " +
                    std::to_string(s.image.w) + "x" +
                    std::to_string(s.image.h) + ", model expects " +
                    std::to_string(px) + "x" + std::to_string(px));
}

// shortest decimal that round-trips to the same double
std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

// ===== Phase plan =====

void validate_phase(const PhaseConfig& p) {
  for (int i : p.frozen)
    if (i < 0 || i > 9)
      throw UsageError("phase: frozen index " + std::to_string(i) +
                       " outside backbone range 0..9");
  if (!(p.lr0 > 0.0))
    throw UsageError("phase: lr0 must be positive");
  if (p.epochs <= 0) throw UsageError("phase: epochs must be positive");
}

namespace {
int scaled_epochs(int nominal, double scale) {
  return std::max(1, int(std::lround(double(nominal) * scale)));
}
std::set<int> range_set(int lo, int hi) {
  std::set<int> s;
  for (int i = lo; i <= hi; ++i) s.insert(i);
  return s;
}
}  // namespace

std::vector<PhaseConfig> make_phase_plan(double epoch_scale) {
  if (!(epoch_scale > 0.0))
    throw UsageError("make_phase_plan: epoch_scale must be positive");
  std::vector<PhaseConfig> plan(3);
  plan[0] = {range_set(0, 9), 0.002, scaled_epochs(50, epoch_scale),
             AugStrength::Heavy};
  plan[1] = {range_set(0, 4), 0.001, scaled_epochs(80, epoch_scale),
             AugStrength::Moderate};
  plan[2] = {{}, 0.0003, scaled_epochs(120, epoch_scale), AugStrength::Light};
  return plan;
}

std::vector<PhaseConfig> baseline_plan(double epoch_scale) {
  if (!(epoch_scale > 0.0))
    throw UsageError("baseline_plan: epoch_scale must be positive");
  return {{{}, 0.01, scaled_epochs(300, epoch_scale), AugStrength::Moderate}};
}

double cosine_lr(double lr0, double lrf, int epoch, int total) {
  if (total < 0 || epoch < 0 || epoch > total)
    throw UsageError("cosine_lr: need 0 <= epoch <= total");
  // the closed form re-rounds the endpoints; return them exactly
  if (epoch == 0) return lr0;
  if (epoch == total) return lrf;
  const double c = std::cos(M_PI * double(epoch) / double(total));
  return lrf + (lr0 - lrf) * (1.0 + c) / 2.0;
}

// ===== Optimizer =====

Sgd::Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), wd_(weight_decay) {
  if (!(momentum >= 0.0) || momentum >= 1.0)
    throw UsageError("sgd: momentum must be in [0,1)");
  if (!(weight_decay >= 0.0))
    throw UsageError("sgd: weight_decay must be non-negative");
  vel_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i)
    vel_[i].assign(size_t(params_[i].numel()), 0.0);
}

bool Sgd::step(double lr) {
  // abort before touching anything if any live gradient is non-finite
  for (Tensor& p : params_) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    const double* g = p.grad();
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(g[size_t(i)])) {
        ++nan_incidents_;
        return false;
      }
  }
  for (size_t s = 0; s < params_.size(); ++s) {
    Tensor& p = params_[s];
    if (!p.requires_grad()) continue;  // frozen: no momentum either
    const double* g = p.has_grad() ? p.grad() : nullptr;
    double* v = vel_[s].data();
    double* w = p.data();
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      const size_t k = size_t(i);
      const double gi = (g ? g[k] : 0.0) + wd_ * w[k];
      v[k] = momentum_ * v[k] + gi;
      w[k] -= lr * v[k];
    }
  }
  ++step_;
  lr_ = lr;
  return true;
}

void Sgd::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

const std::vector<double>& Sgd::velocity(size_t slot) const {
  if (slot >= vel_.size()) throw UsageError("sgd: velocity slot out of range");
  return vel_[slot];
}

std::vector<Tensor> gather_params(Model& m) {
  std::vector<Tensor> out;
  m.visit([&](const std::string&, Tensor& t, bool is_buffer) {
    if (!is_buffer) out.push_back(t);
  });
  return out;
}

int64_t trainable_param_count(Model& m) {
  int64_t n = 0;
  m.visit([&](const std::string&, Tensor& t, bool is_buffer) {
    if (!is_buffer && t.requires_grad()) n += t.numel();
  });
  return n;
}

// ===== Training loop =====

std::vector<EvalScene> run_model_eval(Model& model,
                                      const std::vector<Sample>& data,
                                      double conf_thresh, double iou_thresh,
                                      int batch_size) {
  if (batch_size <= 0) throw UsageError("eval: batch_size must be positive");
  const int px = model.plan().input_px;
  ag::AutogradMode guard(false);
  std::vector<EvalScene> scenes;
  scenes.reserve(data.size());
  for (size_t start = 0; start < data.size(); start += size_t(batch_size)) {
    const size_t end = std::min(data.size(), start + size_t(batch_size));
    std::vector<const Image*> imgs;
    for (size_t i = start; i < end; ++i) {
      require_sample_size(data[i], px, "eval");
      imgs.push_back(&data[i].image);
    }
    HeadOutputs heads = model.forward(stack_images(imgs), /*training=*/false);
    for (size_t i = start; i < end; ++i) {
      EvalScene sc;
      sc.dets = postprocess_image(heads, int(i - start), conf_thresh, iou_thresh);
      sc.gts = labels_to_gt_boxes(data[i].labels, px);
      scenes.push_back(std::move(sc));
    }
  }
  return scenes;
}

TrainResult train(Model& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set,
                  const std::vector<PhaseConfig>& phases,
                  const TrainOptions& opts) {
  if (phases.empty()) throw UsageError("train: empty phase plan");
  for (const PhaseConfig& p : phases) validate_phase(p);
  if (opts.batch_size <= 0)
    throw UsageError("train: batch_size must be positive");
  if (!(opts.lrf_divisor > 0.0))
    throw UsageError("train: lrf_divisor must be positive");
  if (train_set.empty()) throw DataError("train: empty training set");

  const ModelPlan& plan = model.plan();
  const int px = plan.input_px;
  for (const Sample& s : train_set) require_sample_size(s, px, "train");
  for (const Sample& s : val_set) require_sample_size(s, px, "val");

  const HeadGeometry geom = geometry_for(px, plan.bins);
  const int n = int(train_set.size());
  const SampleSource donor = [&](int k) { return train_set[size_t(k)]; };

  Sgd opt(gather_params(model), opts.momentum, opts.weight_decay);
  TrainResult result;
  int epoch_global = 0;  // 0-based here, logged 1-based

  for (size_t pi = 0; pi < phases.size(); ++pi) {
    const PhaseConfig& phase = phases[pi];
    model.set_backbone_frozen(phase.frozen);
    const AugConfig aug = aug_preset(phase.aug, opts.seed);
    const double lrf = phase.lr0 / opts.lrf_divisor;

    for (int e = 0; e < phase.epochs; ++e, ++epoch_global) {
      const double lr = phase.epochs == 1
                            ? phase.lr0
                            : cosine_lr(phase.lr0, lrf, e, phase.epochs - 1);

      std::vector<int> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle_rng = Rng::for_sample(opts.seed, uint64_t(epoch_global),
                                        kShuffleStream);
      shuffle_rng.shuffle(order);

      double box_acc = 0, cls_acc = 0, dfl_acc = 0;
      int n_batches = 0;
      for (int start = 0; start < n && !result.diverged;
           start += opts.batch_size) {
        const int end = std::min(n, start + opts.batch_size);
        std::vector<Sample> batch;
        batch.reserve(size_t(end - start));
        for (int b = start; b < end; ++b) {
          const int idx = order[size_t(b)];
          Rng rng = Rng::for_sample(opts.seed, uint64_t(epoch_global),
                                    uint64_t(idx));
          batch.push_back(
              augment_sample(train_set[size_t(idx)], donor, n, aug, rng));
        }
        std::vector<const Image*> imgs;
        std::vector<Assignment> asgs;
        for (const Sample& s : batch) {
          imgs.push_back(&s.image);
          asgs.push_back(assign_targets(labels_to_gts(s.labels), geom));
        }

        ag::AutogradMode guard(true);
        HeadOutputs heads = model.forward(stack_images(imgs), true);
        LossParts lp = total_loss(heads, asgs);
        if (!std::isfinite(lp.total.item())) {
          result.diverged = true;
          ag::clear_tape();
          break;
        }
        ag::backward(lp.total);
        if (!opt.step(lr)) ++result.nan_steps;
        opt.zero_grad();
        ag::clear_tape();

        box_acc += lp.box;
        cls_acc += lp.cls;
        dfl_acc += lp.dfl;
        ++n_batches;
      }
      if (result.diverged) return result;

      EpochLog row;
      row.phase = int(pi) + 1;
      row.epoch = epoch_global + 1;
      row.lr = lr;
      row.box_loss = box_acc / n_batches;
      row.cls_loss = cls_acc / n_batches;
      row.dfl_loss = dfl_acc / n_batches;
      if (!val_set.empty()) {
        ApReport ap = map_range(run_model_eval(model, val_set, opts.val_conf,
                                               opts.val_iou, opts.batch_size));
        row.val_map50 = ap.map50;
        row.val_map5095 = ap.map5095;
      }
      result.log.push_back(row);
    }
  }
  return result;
}

void write_train_log_csv(std::ostream& os, const std::vector<EpochLog>& log) {
  os << "phase,epoch,lr,box_loss,cls_loss,dfl_loss,val_map50,val_map5095\n";
  for (const EpochLog& r : log)
    os << r.phase << ',' << r.epoch << ',' << fmt_double(r.lr) << ','
       << fmt_double(r.box_loss) << ',' << fmt_double(r.cls_loss) << ','
       << fmt_double(r.dfl_loss) << ',' << fmt_double(r.val_map50) << ','
       << fmt_double(r.val_map5095) << '\n';
}

}  // namespace ripeloc
