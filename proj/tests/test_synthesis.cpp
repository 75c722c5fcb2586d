#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "ccsi/ccsi.hpp"
#include "test_helpers.hpp"

using namespace ccsi;

namespace {

template <typename T>
Tensor<T> random_nhwc(std::size_t n, std::size_t hw, std::size_t c,
                      std::uint64_t seed, double lo = 0.05, double hi = 0.95) {
  Rng rng(seed);
  Tensor<T> t({n, hw, hw, c});
  for (auto& v : t.data) v = T(rng.uniform(lo, hi));
  return t;
}

// A 2-class model trained on the quadrant toy until it separates the classes,
// plus everything synthesis needs.
struct ToyWorld {
  Model<double> model;
  CNSnapshot<double> snapshot;
  MeanImageStore<double> means;
  DatasetBundle<double> data;

  ToyWorld() {
    data = th::quadrant_bundle<double>(2, 24, 6, 24, 8, 321);
    BackboneConfig<double> cfg;
    cfg.in_channels = 1;
    cfg.widths = {4, 4, 8};
    Rng rng(5);
    model = Model<double>(cfg, rng);

    TaskSchedule schedule = build_task_schedule(2, {2});
    TrainConfig<double> tc;
    tc.epochs = 12;
    tc.batch_size = 8;
    tc.lr = 0.05;
    tc.seed = 9;
    MetricsLog log;
    train_first_task(model, data, schedule, tc, log);
    snapshot = snapshot_moments(model);
    means.add_missing(data.train, {0, 1});
  }
};

ToyWorld& toy() {
  static ToyWorld world;
  return world;
}

double frozen_accuracy(Model<double>& m, const Tensor<double>& images,
                       const std::vector<int>& labels) {
  Tensor<double> f = m.forward_features_nhwc(images, Mode::Eval);
  std::vector<int> pred = pseudo_labels(f, m.bank);
  double hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (pred[i] == labels[i]) hits += 1;
  return hits / double(labels.size());
}

}  // namespace

TEST_CASE("total variation is zero on constant images", "[synthesis]") {
  Tensor<double> img({2, 4, 4, 3}, 0.37);
  REQUIRE(r_tv(img) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("a single 0-1 neighbor pair has unit total variation",
          "[synthesis]") {
  Tensor<double> img({1, 1, 2, 1});
  img[0] = 0.0;
  img[1] = 1.0;
  REQUIRE(r_tv(img) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("total variation scales quadratically with contrast",
          "[synthesis]") {
  Tensor<double> img = random_nhwc<double>(2, 6, 1, 11);
  Tensor<double> twice = img;
  for (auto& v : twice.data) v *= 2.0;
  REQUIRE(r_tv(twice) == Catch::Approx(4.0 * r_tv(img)).margin(1e-9));
}

TEST_CASE("total variation gradients match finite differences",
          "[synthesis]") {
  Tensor<double> img = random_nhwc<double>(2, 5, 2, 13);
  Tensor<double> grad(img.shape, 0.0);
  r_tv(img, &grad);
  const double h = 1e-6;
  for (std::size_t i = 0; i < img.numel(); i += 7) {
    Tensor<double> p = img, m = img;
    p[i] += h;
    m[i] -= h;
    const double fd = (r_tv(p) - r_tv(m)) / (2 * h);
    REQUIRE(th::rel_err(grad[i], fd) <= 1e-3);
  }
}

TEST_CASE("the l2 prior is the mean per-image norm", "[synthesis]") {
  Tensor<double> zero({3, 4, 4, 1}, 0.0);
  REQUIRE(r_l2(zero) == Catch::Approx(0.0).margin(1e-12));

  Tensor<double> img({1, 2, 2, 1}, 0.0);
  img[0] = 3.0;
  img[1] = 4.0;
  REQUIRE(r_l2(img) == Catch::Approx(5.0).margin(1e-12));

  Tensor<double> doubled = img;
  for (auto& v : doubled.data) v *= 2.0;
  REQUIRE(r_l2(doubled) == Catch::Approx(10.0).margin(1e-12));
}

TEST_CASE("l2 gradients match finite differences", "[synthesis]") {
  Tensor<double> img = random_nhwc<double>(3, 4, 1, 17, 0.2, 0.9);
  Tensor<double> grad(img.shape, 0.0);
  r_l2(img, &grad);
  const double h = 1e-6;
  for (std::size_t i = 0; i < img.numel(); i += 5) {
    Tensor<double> p = img, m = img;
    p[i] += h;
    m[i] -= h;
    const double fd = (r_l2(p) - r_l2(m)) / (2 * h);
    REQUIRE(th::rel_err(grad[i], fd) <= 1e-3);
  }
}

TEST_CASE("matched moments zero out the statistics regularizer",
          "[synthesis]") {
  CNSnapshot<double> snap;
  snap.layers.resize(2);
  snap.layers[0] = {{0.1, -0.2}, {1.1, 0.9}, {0.3, 0.4, 0.5}, {1.0, 1.2, 0.8}};
  snap.layers[1] = {{0.0}, {1.0}, {0.7}, {0.6}};

  std::vector<CNCapture<double>> caps(2);
  for (std::size_t l = 0; l < 2; ++l) {
    caps[l].gn_mean = snap.layers[l].gn_mean;
    caps[l].gn_var = snap.layers[l].gn_var;
    caps[l].bn_mean = snap.layers[l].bn_mean;
    caps[l].bn_var = snap.layers[l].bn_var;
  }
  REQUIRE(r_cn(caps, snap) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("a single unit deviation scores one", "[synthesis]") {
  CNSnapshot<double> snap;
  snap.layers.resize(1);
  snap.layers[0] = {{0.0}, {1.0}, {0.5}, {0.25}};

  std::vector<CNCapture<double>> caps(1);
  caps[0].gn_mean = {1.0};  // deviation of exactly 1
  caps[0].gn_var = {1.0};
  caps[0].bn_mean = {0.5};
  caps[0].bn_var = {0.25};
  REQUIRE(r_cn(caps, snap) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("the regularizer grows with each deviation", "[synthesis]") {
  CNSnapshot<double> snap;
  snap.layers.resize(1);
  snap.layers[0] = {{0.0, 0.0}, {1.0, 1.0}, {0.0, 0.0}, {1.0, 1.0}};

  std::vector<CNCapture<double>> caps(1);
  caps[0].gn_mean = {0.2, -0.1};
  caps[0].gn_var = {1.3, 0.9};
  caps[0].bn_mean = {0.4, 0.0};
  caps[0].bn_var = {1.5, 0.7};
  double prev = r_cn(caps, snap);
  for (double bump : {0.1, 0.3, 0.7}) {
    auto worse = caps;
    worse[0].bn_mean[1] = bump;
    const double cur = r_cn(worse, snap);
    REQUIRE(cur > prev);
    prev = cur;
  }
}

TEST_CASE("layer-count mismatches are structural errors", "[synthesis]") {
  CNSnapshot<double> snap;
  snap.layers.resize(2);
  std::vector<CNCapture<double>> caps(1);
  REQUIRE_THROWS_AS(r_cn(caps, snap), StructuralError);
}

TEST_CASE("statistics gradients carry the scale factor", "[synthesis]") {
  CNSnapshot<double> snap;
  snap.layers.resize(2);
  snap.layers[0] = {{0.1, -0.2}, {1.1, 0.9}, {0.3, 0.4}, {1.0, 1.2}};
  snap.layers[1] = {{0.0}, {1.0}, {0.7}, {0.6}};

  std::vector<CNCapture<double>> caps(2);
  Rng rng(23);
  for (std::size_t l = 0; l < 2; ++l) {
    auto jitter = [&](const std::vector<double>& base) {
      std::vector<double> out = base;
      for (auto& v : out) v += rng.uniform(0.05, 0.4);
      return out;
    };
    caps[l].gn_mean = jitter(snap.layers[l].gn_mean);
    caps[l].gn_var = jitter(snap.layers[l].gn_var);
    caps[l].bn_mean = jitter(snap.layers[l].bn_mean);
    caps[l].bn_var = jitter(snap.layers[l].bn_var);
  }

  std::vector<RcnGrad<double>> g1, g10;
  const double v1 = r_cn(caps, snap, &g1, 1.0);
  const double v10 = r_cn(caps, snap, &g10, 10.0);
  REQUIRE(v1 == Catch::Approx(v10).margin(1e-12));  // value stays unscaled

  const double h = 1e-6;
  auto fd_check = [&](std::vector<double> CNCapture<double>::*field,
                      std::vector<double> RcnGrad<double>::*gfield) {
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t i = 0; i < (caps[l].*field).size(); ++i) {
        auto p = caps, m = caps;
        (p[l].*field)[i] += h;
        (m[l].*field)[i] -= h;
        const double fd = (r_cn(p, snap) - r_cn(m, snap)) / (2 * h);
        REQUIRE(th::rel_err((g1[l].*gfield)[i], fd) <= 1e-3);
        REQUIRE((g10[l].*gfield)[i] ==
                Catch::Approx(10.0 * (g1[l].*gfield)[i]).margin(1e-12));
      }
  };
  fd_check(&CNCapture<double>::gn_mean, &RcnGrad<double>::gn_mean);
  fd_check(&CNCapture<double>::gn_var, &RcnGrad<double>::gn_var);
  fd_check(&CNCapture<double>::bn_mean, &RcnGrad<double>::bn_mean);
  fd_check(&CNCapture<double>::bn_var, &RcnGrad<double>::bn_var);
}

TEST_CASE("with all priors off the objective is the classification loss",
          "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);

  SynthesisConfig<double> cfg;
  cfg.alpha_tv = 0;
  cfg.alpha_l2 = 0;
  cfg.alpha_cn = 0;
  Tensor<double> images = random_nhwc<double>(4, 8, 1, 29);
  const std::vector<int> labels{0, 1, 0, 1};

  const double obj =
      synthesis_objective(images, labels, frozen, w.snapshot, cfg);

  Tensor<double> f = frozen.forward_features_nhwc(images, Mode::Eval);
  REQUIRE(obj ==
          Catch::Approx(cn_ce_loss(f, labels, frozen.bank)).margin(1e-9));
}

TEST_CASE("pixel gradients of the full objective match finite differences",
          "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);

  SynthesisConfig<double> cfg;
  cfg.alpha_tv = 0.1;  // exaggerated so every term contributes visibly
  cfg.alpha_l2 = 0.05;
  cfg.alpha_cn = 2.0;
  Tensor<double> images = random_nhwc<double>(2, 8, 1, 31);
  const std::vector<int> labels{0, 1};

  Tensor<double> grad(images.shape, 0.0);
  const double base =
      synthesis_objective(images, labels, frozen, w.snapshot, cfg, &grad);
  REQUIRE(std::isfinite(base));

  const double h = 1e-6;
  for (std::size_t i = 0; i < images.numel(); i += 11) {
    Tensor<double> p = images, m = images;
    p[i] += h;
    m[i] -= h;
    const double fp = synthesis_objective(p, labels, frozen, w.snapshot, cfg);
    const double fm = synthesis_objective(m, labels, frozen, w.snapshot, cfg);
    const double fd = (fp - fm) / (2 * h);
    INFO("pixel " << i);
    REQUIRE(th::rel_err(grad[i], fd) <= 1e-3);
  }
}

TEST_CASE("zero-iteration synthesis returns the mean initialization bitwise",
          "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);

  SynthesisConfig<double> cfg;
  cfg.iterations = 0;
  cfg.init_noise_std = 0;  // exact mean-image start
  SyntheticBatch<double> batch = synthesize_batch(
      frozen, w.snapshot, w.means, {0, 1, 0}, cfg, 0, /*round_seed=*/77);

  REQUIRE(batch.labels == std::vector<int>{0, 1, 0});
  REQUIRE(batch.images.shape == std::vector<std::size_t>{3, 8, 8, 1});
  REQUIRE_FALSE(batch.used_noise_fallback);
  const std::size_t ppi = 64;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& mean = w.means.get(batch.labels[i]).pixels;
    for (std::size_t j = 0; j < ppi; ++j)
      REQUIRE(batch.images[i * ppi + j] == mean[j]);
  }
  REQUIRE(std::isfinite(batch.final_objective));
}

TEST_CASE("synthesis is deterministic for a fixed seed", "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);

  SynthesisConfig<double> cfg;
  cfg.iterations = 3;
  SyntheticBatch<double> a =
      synthesize_batch(frozen, w.snapshot, w.means, {0, 1}, cfg, 0, 41);
  SyntheticBatch<double> b =
      synthesize_batch(frozen, w.snapshot, w.means, {0, 1}, cfg, 0, 41);
  REQUIRE(a.images.data == b.images.data);
  REQUIRE(a.final_objective == b.final_objective);

  SyntheticBatch<double> c =
      synthesize_batch(frozen, w.snapshot, w.means, {0, 1}, cfg, 0, 42);
  REQUIRE(a.images.data != c.images.data);
}

TEST_CASE("missing mean images fall back to Gaussian noise", "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);

  SynthesisConfig<double> cfg;
  cfg.iterations = 0;
  th::CaptureStderr cap;
  // class 7 was never seen, so it has no stored mean
  MeanImageStore<double> partial;
  partial.by_class[0] = w.means.get(0);
  SyntheticBatch<double> batch =
      synthesize_batch(frozen, w.snapshot, partial, {0, 7}, cfg, 0, 51);
  REQUIRE(batch.used_noise_fallback);
  REQUIRE(cap.text().find("falling back") != std::string::npos);

  // fallback pixels stay inside the valid range
  for (double v : batch.images.data) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
}

TEST_CASE("disabling mean initialization is silent and flag-free",
          "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);
  SynthesisConfig<double> cfg;
  cfg.iterations = 0;
  cfg.mean_init = false;
  th::CaptureStderr cap;
  SyntheticBatch<double> batch =
      synthesize_batch(frozen, w.snapshot, w.means, {0, 1}, cfg, 0, 53);
  REQUIRE_FALSE(batch.used_noise_fallback);
  REQUIRE(cap.text().empty());
  // noise init differs from the stored means
  const auto& mean0 = w.means.get(0).pixels;
  bool differs = false;
  for (std::size_t j = 0; j < 64; ++j)
    differs = differs || std::abs(batch.images[j] - mean0[j]) > 1e-6;
  REQUIRE(differs);
}

TEST_CASE("synthesized pixels stay clamped to the unit box", "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);
  SynthesisConfig<double> cfg;
  cfg.iterations = 8;
  cfg.learning_rate = 0.5;  // big steps to push against the box
  SyntheticBatch<double> batch =
      synthesize_batch(frozen, w.snapshot, w.means, {0, 1}, cfg, 0, 59);
  for (double v : batch.images.data) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
}

TEST_CASE("synthesis leaves the frozen model and snapshot untouched",
          "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);

  const std::vector<double> emb_before = frozen.bank.embeddings;
  std::vector<double> stem_before;
  frozen.extractor.for_each_param(
      [&](double* p, double*, std::size_t n) {
        if (stem_before.empty()) stem_before.assign(p, p + n);
      });
  const std::vector<double> bn_before =
      frozen.extractor.cn_layers()[0]->state.bn_running_mean;
  const std::vector<double> snap_before = w.snapshot.layers[0].bn_mean;

  SynthesisConfig<double> cfg;
  cfg.iterations = 5;
  synthesize_batch(frozen, w.snapshot, w.means, {0, 1}, cfg, 0, 61);

  REQUIRE(frozen.bank.embeddings == emb_before);
  std::vector<double> stem_after;
  frozen.extractor.for_each_param(
      [&](double* p, double*, std::size_t n) {
        if (stem_after.empty()) stem_after.assign(p, p + n);
      });
  REQUIRE(stem_after == stem_before);
  REQUIRE(frozen.extractor.cn_layers()[0]->state.bn_running_mean == bn_before);
  REQUIRE(w.snapshot.layers[0].bn_mean == snap_before);
}

TEST_CASE("fifty optimization steps do not increase the objective",
          "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);

  SynthesisConfig<double> cfg;
  cfg.iterations = 0;
  SyntheticBatch<double> init =
      synthesize_batch(frozen, w.snapshot, w.means, {0, 1}, cfg, 0, 63);

  cfg.iterations = 51;  // the recorded objective trails the last step by one
  SyntheticBatch<double> run =
      synthesize_batch(frozen, w.snapshot, w.means, {0, 1}, cfg, 0, 63);

  REQUIRE(run.final_objective <= init.final_objective + 1e-6);
}

TEST_CASE("synthetic batches classify at least as well as raw means",
          "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);

  // raw mean images, one per class
  Tensor<double> mean_imgs({2, 8, 8, 1});
  for (int cls = 0; cls < 2; ++cls) {
    const auto& m = w.means.get(cls).pixels;
    std::copy(m.ptr(), m.ptr() + 64, mean_imgs.ptr() + cls * 64);
  }
  const std::vector<int> labels{0, 1};
  const double acc_means = frozen_accuracy(frozen, mean_imgs, labels);

  SynthesisConfig<double> cfg;
  cfg.iterations = 120;
  SyntheticBatch<double> batch =
      synthesize_batch(frozen, w.snapshot, w.means, labels, cfg, 0, 67);
  const double acc_synth =
      frozen_accuracy(frozen, batch.images, batch.labels);
  REQUIRE(acc_synth >= acc_means);
}

TEST_CASE("the replay store balances classes across rounds", "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);

  SynthesisConfig<double> cfg;
  cfg.iterations = 0;
  cfg.batch_size = 40;
  cfg.images_per_class = 40;

  SECTION("two classes fill in two rounds") {
    auto store =
        build_replay_store(frozen, w.snapshot, w.means, {0, 1}, cfg, 0);
    REQUIRE(store.size() == 2);
    std::map<int, int> counts;
    for (const auto& b : store)
      for (int y : b.labels) counts[y]++;
    REQUIRE(counts[0] == 40);
    REQUIRE(counts[1] == 40);
  }
  SECTION("one class fills in one round") {
    auto store = build_replay_store(frozen, w.snapshot, w.means, {0}, cfg, 0);
    REQUIRE(store.size() == 1);
    REQUIRE(store[0].labels == std::vector<int>(40, 0));
  }
  SECTION("uneven batch sizes still balance within one image") {
    cfg.batch_size = 12;
    cfg.images_per_class = 9;
    auto store =
        build_replay_store(frozen, w.snapshot, w.means, {0, 1}, cfg, 0);
    std::map<int, int> counts;
    for (const auto& b : store)
      for (int y : b.labels) counts[y]++;
    REQUIRE(counts[0] >= 9);
    REQUIRE(counts[1] >= 9);
    REQUIRE(std::abs(counts[0] - counts[1]) <= 1);
  }
  SECTION("no previous classes is an error") {
    REQUIRE_THROWS_AS(
        build_replay_store(frozen, w.snapshot, w.means, {}, cfg, 0),
        EmptyClassError);
  }
  SECTION("a zero target produces an empty store") {
    cfg.images_per_class = 0;
    auto store =
        build_replay_store(frozen, w.snapshot, w.means, {0, 1}, cfg, 0);
    REQUIRE(store.empty());
  }
}

TEST_CASE("replay rounds vary their seeds but stay reproducible",
          "[synthesis]") {
  ToyWorld& w = toy();
  Model<double> frozen = clone_frozen(w.model);
  SynthesisConfig<double> cfg;
  cfg.iterations = 0;
  cfg.batch_size = 4;
  cfg.images_per_class = 4;

  auto a = build_replay_store(frozen, w.snapshot, w.means, {0, 1}, cfg, 0);
  auto b = build_replay_store(frozen, w.snapshot, w.means, {0, 1}, cfg, 0);
  REQUIRE(a.size() == b.size());
  for (std::size_t r = 0; r < a.size(); ++r)
    REQUIRE(a[r].images.data == b[r].images.data);
  REQUIRE(a.size() >= 2);
  // different rounds draw different noise
  REQUIRE(a[0].images.data != a[1].images.data);
}

TEST_CASE("the synthesis config validates its ranges", "[synthesis]") {
  SynthesisConfig<double> cfg;
  REQUIRE_NOTHROW(cfg.validate());
  cfg.alpha_tv = -1;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.alpha_l2 = -1e-9;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.alpha_cn = -2;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}
