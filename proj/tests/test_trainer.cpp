// ===== Trainer tests: phase plan, cosine LR, SGD semantics, train loop =====

#include <cmath>
#include <complex>
#include <cstring>
#include <limits>
#include <set>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "ripeloc/model.hpp"
#include "ripeloc/rng.hpp"
#include "ripeloc/synthgen.hpp"
#include "ripeloc/trainer.hpp"

using namespace ripeloc;

namespace {

Tensor param(const std::vector<double>& v) {
  Tensor t = Tensor::from_vec({int(v.size())}, v);
  t.set_requires_grad(true);
  return t;
}

void set_grad(Tensor& t, const std::vector<double>& g) {
  REQUIRE(size_t(t.numel()) == g.size());
  double* d = t.grad();
  for (size_t i = 0; i < g.size(); ++i) d[i] = g[i];
}

std::vector<Sample> tiny_dataset(int n, int px, uint64_t seed) {
  SceneSpec sp;
  sp.image_size = px;
  sp.radius_lo = 6;
  sp.radius_hi = 10;
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::for_sample(seed, 0, uint64_t(i));
    out.push_back(generate(sp, rng));
  }
  return out;
}

std::string run_to_csv(const TrainResult& r) {
  std::ostringstream os;
  write_train_log_csv(os, r.log);
  return os.str();
}

std::vector<std::vector<double>> weights_snapshot(Model& m) {
  std::vector<std::vector<double>> snap;
  m.visit([&](const std::string&, Tensor& t, bool) { snap.push_back(t.vec()); });
  return snap;
}

}  // namespace

TEST_CASE("phase plan matches the published schedule") {
  std::vector<PhaseConfig> plan = make_phase_plan();
  REQUIRE(plan.size() == 3);

  CHECK(plan[0].frozen == std::set<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(plan[0].lr0 == 0.002);
  CHECK(plan[0].epochs == 50);
  CHECK(plan[0].aug == AugStrength::Heavy);

  CHECK(plan[1].frozen == std::set<int>{0, 1, 2, 3, 4});
  CHECK(plan[1].lr0 == 0.001);
  CHECK(plan[1].epochs == 80);
  CHECK(plan[1].aug == AugStrength::Moderate);

  CHECK(plan[2].frozen.empty());
  CHECK(plan[2].lr0 == 0.0003);
  CHECK(plan[2].epochs == 120);
  CHECK(plan[2].aug == AugStrength::Light);
}

TEST_CASE("epoch counts scale proportionally with a floor of one") {
  std::vector<PhaseConfig> scaled = make_phase_plan(0.1);
  CHECK(scaled[0].epochs == 5);
  CHECK(scaled[1].epochs == 8);
  CHECK(scaled[2].epochs == 12);
  // freeze sets and lrs are untouched by scaling
  CHECK(scaled[0].frozen.size() == 10);
  CHECK(scaled[2].lr0 == 0.0003);

  std::vector<PhaseConfig> tiny = make_phase_plan(0.002);
  for (const PhaseConfig& p : tiny) CHECK(p.epochs >= 1);

  std::vector<PhaseConfig> base = baseline_plan();
  REQUIRE(base.size() == 1);
  CHECK(base[0].frozen.empty());
  CHECK(base[0].lr0 == 0.01);
  CHECK(base[0].epochs == 300);
  // the stock recipe's final lr: lr0/100 reproduces the published 0.0001
  CHECK(base[0].lr0 / 100.0 == doctest::Approx(0.0001).epsilon(1e-15));

  CHECK_THROWS_AS(make_phase_plan(0.0), UsageError);
  CHECK_THROWS_AS(baseline_plan(-1.0), UsageError);
}

TEST_CASE("validate_phase rejects malformed phases") {
  PhaseConfig ok{{0, 9}, 0.01, 10, AugStrength::Light};
  CHECK_NOTHROW(validate_phase(ok));
  PhaseConfig bad_idx = ok;
  bad_idx.frozen.insert(10);
  CHECK_THROWS_AS(validate_phase(bad_idx), UsageError);
  PhaseConfig bad_lr = ok;
  bad_lr.lr0 = 0.0;
  CHECK_THROWS_AS(validate_phase(bad_lr), UsageError);
  PhaseConfig bad_epochs = ok;
  bad_epochs.epochs = 0;
  CHECK_THROWS_AS(validate_phase(bad_epochs), UsageError);
}

TEST_CASE("cosine schedule hits both endpoints exactly") {
  const double lr0 = 0.01, lrf = 0.0001;
  // bitwise, not approximate: the trainer's published endpoints
  CHECK(cosine_lr(lr0, lrf, 0, 300) == lr0);
  CHECK(cosine_lr(lr0, lrf, 300, 300) == lrf);
  CHECK(cosine_lr(lr0, lrf, 150, 300) ==
        doctest::Approx((lr0 + lrf) / 2).epsilon(1e-12));

  // monotone non-increasing across the whole schedule
  double prev = cosine_lr(lr0, lrf, 0, 300);
  for (int e = 1; e <= 300; ++e) {
    double lr = cosine_lr(lr0, lrf, e, 300);
    CHECK(lr <= prev);
    CHECK(lr >= lrf);
    prev = lr;
  }

  // degenerate one-epoch schedule
  CHECK(cosine_lr(lr0, lrf, 0, 0) == lr0);

  CHECK_THROWS_AS(cosine_lr(lr0, lrf, -1, 10), UsageError);
  CHECK_THROWS_AS(cosine_lr(lr0, lrf, 11, 10), UsageError);
}

TEST_CASE("sgd with zero momentum and zero decay is plain gradient descent") {
  std::vector<double> p0 = {1.5, -2.0, 0.25, 100.0};
  std::vector<double> g = {0.5, 0.125, -4.0, 3.0};
  Tensor p = param(p0);
  Sgd opt({p}, 0.0, 0.0);
  set_grad(p, g);
  const double lr = 0.1;
  CHECK(opt.step(lr));
  for (size_t i = 0; i < p0.size(); ++i) {
    const double expected = p0[i] - lr * g[i];
    CHECK(p.data()[i] == expected);  // identical arithmetic, bitwise equal
  }
  CHECK(opt.global_step() == 1);
  CHECK(opt.current_lr() == lr);
}

TEST_CASE("sgd follows the momentum + weight-decay recurrence") {
  // two hand-tracked steps of v <- m*v + g + wd*p; p <- p - lr*v
  const double m = 0.9, wd = 0.01, lr = 0.5;
  double pv = 2.0, vv = 0.0;
  Tensor p = param({2.0});
  Sgd opt({p}, m, wd);
  for (int step = 0; step < 2; ++step) {
    const double g = 1.0 + step;  // deterministic fake gradients
    set_grad(p, {g});
    CHECK(opt.step(lr));
    vv = m * vv + (g + wd * pv);
    pv = pv - lr * vv;
    CHECK(p.data()[0] == doctest::Approx(pv).epsilon(1e-15));
    CHECK(opt.velocity(0)[0] == doctest::Approx(vv).epsilon(1e-15));
  }
}

TEST_CASE("frozen parameters stay byte-identical with no momentum buildup") {
  std::vector<double> a0 = {1.0, 2.0, 3.0};
  std::vector<double> b0 = {-0.5, 0.75, 8.0, 0.001};
  Tensor a = param(a0);
  Tensor b = param(b0);
  b.set_requires_grad(false);  // frozen

  Sgd opt({a, b}, 0.937, 0.0005);
  const double lr = 0.01;
  for (int step = 0; step < 100; ++step) {
    set_grad(a, {0.1, -0.2, 0.3});
    set_grad(b, {1.0, 1.0, 1.0, 1.0});  // must be ignored entirely
    CHECK(opt.step(lr));
  }
  CHECK(std::memcmp(b.data(), b0.data(), b0.size() * sizeof(double)) == 0);
  for (double v : opt.velocity(1)) CHECK(v == 0.0);
  for (size_t i = 0; i < a0.size(); ++i) CHECK(a.data()[i] != a0[i]);

  // unfreezing starts from a clean velocity: first step is exactly
  // p - lr*(g + wd*p)
  b.set_requires_grad(true);
  std::vector<double> g = {0.5, -0.25, 2.0, -1.0};
  set_grad(a, {0.1, -0.2, 0.3});
  set_grad(b, g);
  CHECK(opt.step(lr));
  for (size_t i = 0; i < b0.size(); ++i) {
    const double v = g[i] + 0.0005 * b0[i];
    CHECK(b.data()[i] == b0[i] - lr * v);
  }
}

TEST_CASE("quadratic bowl matches the closed-form recurrence oracle") {
  // f(p) = 0.5*||p||^2 so g = p. With decay folded in, each coordinate obeys
  //   v' = m*v + c*p,  p' = p - lr*v'   with c = 1 + wd
  // whose iterates have the closed form A*l1^t + B*l2^t for the eigenvalues
  // of the 2x2 companion matrix. Oracle in long-double complex arithmetic.
  const double m = 0.937, wd = 0.0005, lr = 0.1;
  const std::vector<double> p0 = {1.7, -0.4, 0.25, 3.0};

  using C = std::complex<long double>;
  const long double c = 1.0L + (long double)wd;
  const long double T = 1.0L - (long double)lr * c + (long double)m;
  const C disc = std::sqrt(C(T * T - 4.0L * (long double)m, 0.0L));
  const C l1 = (C(T) + disc) / 2.0L;
  const C l2 = (C(T) - disc) / 2.0L;
  REQUIRE(std::abs(l1 - l2) > 1e-6L);

  Tensor p = param(p0);
  Sgd opt({p}, m, wd);
  for (int t = 1; t <= 60; ++t) {
    set_grad(p, std::vector<double>(p.data(), p.data() + p.numel()));
    REQUIRE(opt.step(lr));
    for (size_t i = 0; i < p0.size(); ++i) {
      const C x0 = C((long double)p0[i]);
      const C x1 = (1.0L - (long double)lr * c) * x0;
      const C A = (x1 - l2 * x0) / (l1 - l2);
      const C B = x0 - A;
      const long double oracle =
          (A * std::pow(l1, t) + B * std::pow(l2, t)).real();
      CHECK(std::abs((long double)p.data()[i] - oracle) < 1e-10L);
    }
  }
}

TEST_CASE("a non-finite gradient aborts the whole step") {
  std::vector<double> a0 = {1.0, 2.0};
  std::vector<double> b0 = {3.0};
  Tensor a = param(a0);
  Tensor b = param(b0);
  Sgd opt({a, b}, 0.937, 0.0005);

  set_grad(a, {0.5, std::numeric_limits<double>::quiet_NaN()});
  set_grad(b, {1.0});
  CHECK_FALSE(opt.step(0.1));
  // nothing moved, nothing accumulated, nothing counted as progress
  CHECK(std::memcmp(a.data(), a0.data(), a0.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(b.data(), b0.data(), b0.size() * sizeof(double)) == 0);
  CHECK(opt.velocity(0)[0] == 0.0);
  CHECK(opt.velocity(1)[0] == 0.0);
  CHECK(opt.nan_incidents() == 1);
  CHECK(opt.global_step() == 0);

  set_grad(a, {0.5, std::numeric_limits<double>::infinity()});
  CHECK_FALSE(opt.step(0.1));
  CHECK(opt.nan_incidents() == 2);

  set_grad(a, {0.5, 0.5});
  CHECK(opt.step(0.1));
  CHECK(opt.global_step() == 1);
  CHECK(a.data()[0] != a0[0]);
}

TEST_CASE("sgd rejects malformed hyperparameters") {
  Tensor p = param({1.0});
  CHECK_THROWS_AS(Sgd({p}, 1.0, 0.0), UsageError);
  CHECK_THROWS_AS(Sgd({p}, -0.1, 0.0), UsageError);
  CHECK_THROWS_AS(Sgd({p}, 0.9, -1e-9), UsageError);
}

TEST_CASE("progressive unfreezing grows the trainable set strictly") {
  Model m = Model::build(nominal_plan(0.125, 2, 32), 7);
  std::vector<PhaseConfig> plan = make_phase_plan();

  std::vector<int64_t> counts;
  for (const PhaseConfig& ph : plan) {
    m.set_backbone_frozen(ph.frozen);
    counts.push_back(trainable_param_count(m));
  }
  CHECK(counts[0] > 0);
  CHECK(counts[0] < counts[1]);
  CHECK(counts[1] < counts[2]);
  // fully unfrozen trains every parameter
  CHECK(counts[2] == m.param_count());

  // gather_params sees every learnable tensor regardless of freezing
  int64_t total = 0;
  for (const Tensor& t : gather_params(m)) total += t.numel();
  CHECK(total == m.param_count());
}

TEST_CASE("run_model_eval pairs detections with pixel-space ground truth") {
  Model m = Model::build(nominal_plan(0.125, 2, 32), 19);
  std::vector<Sample> data(2);
  data[0].image = Image::solid(32, 32, 0.5, 0.4, 0.3);
  data[0].labels.push_back({1, 0.5, 0.5, 0.25, 0.25, true, 0.5, 0.5});
  data[1].image = Image::solid(32, 32, 0.2, 0.6, 0.4);
  data[1].labels.push_back({0, 0.25, 0.25, 0.2, 0.3, false, 0.0, 0.0});

  std::vector<EvalScene> scenes = run_model_eval(m, data, 0.01, 0.45, 2);
  REQUIRE(scenes.size() == 2);
  REQUIRE(scenes[0].gts.size() == 1);
  CHECK(scenes[0].gts[0].x1 == doctest::Approx(12.0).epsilon(1e-12));
  CHECK(scenes[0].gts[0].y2 == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(scenes[0].gts[0].has_center);
  CHECK(scenes[0].gts[0].cx == doctest::Approx(16.0).epsilon(1e-12));
  CHECK_FALSE(scenes[1].gts[0].has_center);
  for (const EvalScene& sc : scenes)
    for (const Detection& d : sc.dets) {
      CHECK(d.score >= 0.01);
      CHECK(d.x1 < d.x2);
    }
}

TEST_CASE("train runs phases in order and is bit-reproducible") {
  const int px = 64;
  std::vector<Sample> train_set = tiny_dataset(5, px, 7);
  std::vector<Sample> val_set = tiny_dataset(2, px, 8);

  std::vector<PhaseConfig> plan = {
      {{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 0.002, 2, AugStrength::Light},
      {{}, 0.001, 1, AugStrength::Light},
  };
  TrainOptions opts;
  opts.batch_size = 3;
  opts.seed = 11;

  Model m1 = Model::build(nominal_plan(0.125, 2, px), 3);
  TrainResult r1 = train(m1, train_set, val_set, plan, opts);

  REQUIRE(r1.log.size() == 3);
  CHECK_FALSE(r1.diverged);
  CHECK(r1.nan_steps == 0);
  CHECK(r1.log[0].phase == 1);
  CHECK(r1.log[1].phase == 1);
  CHECK(r1.log[2].phase == 2);
  CHECK(r1.log[0].epoch == 1);
  CHECK(r1.log[1].epoch == 2);
  CHECK(r1.log[2].epoch == 3);
  // two-epoch phase sweeps lr0 -> lrf exactly; one-epoch phase sits at lr0
  CHECK(r1.log[0].lr == 0.002);
  CHECK(r1.log[1].lr == 0.002 / 100.0);
  CHECK(r1.log[2].lr == 0.001);
  for (const EpochLog& row : r1.log) {
    CHECK(std::isfinite(row.box_loss));
    CHECK(std::isfinite(row.cls_loss));
    CHECK(std::isfinite(row.dfl_loss));
    CHECK(row.val_map50 >= 0.0);
    CHECK(row.val_map50 <= 1.0);
    CHECK(row.val_map5095 <= row.val_map50 + 1e-12);
  }

  // same seed, fresh model: identical log and identical final weights
  Model m2 = Model::build(nominal_plan(0.125, 2, px), 3);
  TrainResult r2 = train(m2, train_set, val_set, plan, opts);
  CHECK(run_to_csv(r1) == run_to_csv(r2));
  std::vector<std::vector<double>> w1 = weights_snapshot(m1);
  std::vector<std::vector<double>> w2 = weights_snapshot(m2);
  REQUIRE(w1.size() == w2.size());
  for (size_t i = 0; i < w1.size(); ++i) CHECK(w1[i] == w2[i]);

  // a different seed must change the trajectory
  Model m3 = Model::build(nominal_plan(0.125, 2, px), 3);
  TrainOptions other = opts;
  other.seed = 12;
  TrainResult r3 = train(m3, train_set, val_set, plan, other);
  CHECK(run_to_csv(r1) != run_to_csv(r3));
}

TEST_CASE("train rejects empty inputs and mismatched sizes") {
  std::vector<Sample> train_set = tiny_dataset(2, 64, 7);
  std::vector<Sample> val_set;
  std::vector<PhaseConfig> plan = {{{}, 0.001, 1, AugStrength::Light}};

  Model m = Model::build(nominal_plan(0.125, 2, 64), 3);
  CHECK_THROWS_AS(train(m, {}, val_set, plan), DataError);
  CHECK_THROWS_AS(train(m, train_set, val_set, {}), UsageError);

  TrainOptions bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(train(m, train_set, val_set, plan, bad), UsageError);

  Model small = Model::build(nominal_plan(0.125, 2, 32), 3);
  CHECK_THROWS_AS(train(small, train_set, val_set, plan), DataError);
}

TEST_CASE("csv log uses the pinned header and round-trip floats") {
  std::vector<EpochLog> log(2);
  log[0] = {1, 1, 0.002, 0.5, 0.25, 0.125, 0.0, 0.0};
  log[1] = {2, 2, 0.001, 1.5, 0.75, 0.375, 0.875, 0.4375};
  std::ostringstream os;
  write_train_log_csv(os, log);
  CHECK(os.str() ==
        "phase,epoch,lr,box_loss,cls_loss,dfl_loss,val_map50,val_map5095\n"
        "1,1,0.002,0.5,0.25,0.125,0,0\n"
        "2,2,0.001,1.5,0.75,0.375,0.875,0.4375\n");
}
