#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "ccsi/ccsi.hpp"
#include "test_helpers.hpp"

using namespace ccsi;
namespace fs = std::filesystem;

namespace {

BackboneConfig<double> tiny_backbone() {
  BackboneConfig<double> cfg;
  cfg.in_channels = 1;
  cfg.widths = {4, 4, 8};
  return cfg;
}

TrainConfig<double> quick_train(std::size_t epochs, std::uint64_t seed) {
  TrainConfig<double> tc;
  tc.epochs = epochs;
  tc.batch_size = 8;
  tc.lr = 0.05;
  tc.seed = seed;
  return tc;
}

SynthesisConfig<double> quick_synth() {
  SynthesisConfig<double> sc;
  sc.iterations = 40;
  sc.batch_size = 8;
  sc.images_per_class = 16;
  sc.learning_rate = 0.05;
  return sc;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

// One shared two-task pipeline pair (replay vs naive finetune) so several
// tests can inspect the same runs without retraining.
struct PipeWorld {
  DatasetBundle<double> data;
  TaskSchedule schedule;
  PipelineResult<double> ccsi;
  PipelineResult<double> finetune;

  PipeWorld()
      : data(th::quadrant_bundle<double>(4, 24, 6, 24, 8, 97)),
        schedule(build_task_schedule(4, {2, 2})) {
    ccsi = run_pipeline(data, schedule, tiny_backbone(), quick_synth(),
                        quick_train(8, 3), LossWeights<double>{},
                        AblationFlags{});
    AblationFlags ft;
    ft.finetune = true;
    finetune = run_pipeline(data, schedule, tiny_backbone(), quick_synth(),
                            quick_train(8, 3), LossWeights<double>{}, ft);
  }
};

PipeWorld& pipes() {
  static PipeWorld world;
  return world;
}

}  // namespace

TEST_CASE("the cosine schedule hits both endpoints", "[trainer]") {
  TrainConfig<double> cfg;
  cfg.epochs = 10;
  cfg.lr = 0.4;
  cfg.lr_final = 0.004;
  REQUIRE(cosine_lr(cfg, 0) == Catch::Approx(0.4).margin(1e-12));
  REQUIRE(cosine_lr(cfg, 9) == Catch::Approx(0.004).margin(1e-12));
  for (std::size_t e = 1; e < 10; ++e)
    REQUIRE(cosine_lr(cfg, e) < cosine_lr(cfg, e - 1));

  cfg.epochs = 1;
  REQUIRE(cosine_lr(cfg, 0) == Catch::Approx(0.4).margin(1e-12));
}

TEST_CASE("the train config validates its ranges", "[trainer]") {
  TrainConfig<double> cfg;
  REQUIRE_NOTHROW(cfg.validate());
  cfg.epochs = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 1;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("an untrained model scores near chance on unrelated labels",
          "[trainer]") {
  Rng rng(11);
  Model<double> model(tiny_backbone(), rng);
  model.bank.expand(2, rng);

  // random pixels with independently random labels: whatever the model
  // predicts, each sample is a fair coin
  LabeledImageSet<double> test;
  const std::size_t n = 1000;
  test.images = Tensor<double>({n, 8, 8, 1});
  for (auto& v : test.images.data) v = rng.uniform();
  test.labels.resize(n);
  for (auto& y : test.labels) y = int(rng.index(2));
  test.num_classes = 2;

  const double acc = evaluate(model, test, {0, 1});
  REQUIRE(acc > 0.5 - 0.06);
  REQUIRE(acc < 0.5 + 0.06);
}

TEST_CASE("evaluation needs at least one sample of a seen class",
          "[trainer]") {
  Rng rng(12);
  Model<double> model(tiny_backbone(), rng);
  model.bank.expand(6, rng);
  LabeledImageSet<double> test = th::quadrant_set<double>(2, 4, 8, 13);
  REQUIRE_THROWS_AS(evaluate(model, test, {5}), EvalError);
}

TEST_CASE("evaluation agrees with an explicit argmax sweep", "[trainer]") {
  PipeWorld& w = pipes();
  Model<double>& model = w.ccsi.model;

  const double acc = evaluate(model, w.data.test, {0, 1, 2, 3});

  std::size_t correct = 0;
  Tensor<double> f = model.forward_features_nhwc(w.data.test.images, Mode::Eval);
  Tensor<double> logits = head_logits(f, model.bank);
  const std::size_t K = logits.dim(1);
  for (std::size_t i = 0; i < w.data.test.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[i * K + k] > logits[i * K + best]) best = k;
    if (int(best) == w.data.test.labels[i]) ++correct;
  }
  REQUIRE(acc ==
          Catch::Approx(double(correct) / double(w.data.test.size()))
              .margin(1e-12));
}

TEST_CASE("a single-class first task is learned perfectly", "[trainer]") {
  DatasetBundle<double> data = th::quadrant_bundle<double>(1, 16, 4, 16, 8, 21);
  TaskSchedule schedule = build_task_schedule(1, {1});
  Rng rng(22);
  Model<double> model(tiny_backbone(), rng);
  MetricsLog log;
  train_first_task(model, data, schedule, quick_train(2, 5), log);
  REQUIRE(evaluate(model, data.test, {0}) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(log.epochs.size() == 2);
}

TEST_CASE("first-task training is reproducible bit for bit", "[trainer]") {
  DatasetBundle<double> data = th::quadrant_bundle<double>(2, 16, 4, 16, 8, 23);
  TaskSchedule schedule = build_task_schedule(2, {2});

  auto run = [&]() {
    Rng rng(24);
    Model<double> model(tiny_backbone(), rng);
    MetricsLog log;
    train_first_task(model, data, schedule, quick_train(4, 6), log);
    return std::make_pair(model.bank.embeddings, log);
  };
  auto [emb_a, log_a] = run();
  auto [emb_b, log_b] = run();
  REQUIRE(emb_a == emb_b);
  REQUIRE(log_a.epochs.size() == log_b.epochs.size());
  for (std::size_t i = 0; i < log_a.epochs.size(); ++i) {
    REQUIRE(log_a.epochs[i].cn_ce == log_b.epochs[i].cn_ce);
    REQUIRE(log_a.epochs[i].val_accuracy == log_b.epochs[i].val_accuracy);
  }
}

TEST_CASE("training populates the normalization running moments",
          "[trainer]") {
  DatasetBundle<double> data = th::quadrant_bundle<double>(2, 16, 4, 16, 8, 25);
  TaskSchedule schedule = build_task_schedule(2, {2});
  Rng rng(26);
  Model<double> model(tiny_backbone(), rng);
  MetricsLog log;
  train_first_task(model, data, schedule, quick_train(2, 7), log);
  for (ContinualNorm<double>* layer : model.extractor.cn_layers()) {
    REQUIRE(layer->state.ever_updated);
    double drift = 0;
    for (double m : layer->state.bn_running_mean) drift += std::abs(m);
    REQUIRE(drift > 0);
  }
}

TEST_CASE("the balanced sampler oversamples minority classes", "[trainer]") {
  std::vector<int> labels{0, 0, 0, 0, 0, 0, 1, 1};
  detail::BalancedSampler sampler(labels, 31);
  REQUIRE(sampler.pool_size() == 8);
  std::map<int, int> seen;
  for (int reps = 0; reps < 4; ++reps)
    for (std::size_t idx : sampler.next_batch(6)) {
      REQUIRE(idx < labels.size());
      seen[labels[idx]]++;
    }
  REQUIRE(seen[0] == 12);
  REQUIRE(seen[1] == 12);
}

TEST_CASE("pool assembly keeps provenance and row mapping", "[trainer]") {
  LabeledImageSet<double> train = th::quadrant_set<double>(2, 3, 8, 33);
  SyntheticBatch<double> batch;
  batch.images = Tensor<double>({2, 8, 8, 1}, 0.25);
  batch.labels = {0, 1};
  std::vector<SyntheticBatch<double>> store{batch};

  detail::TrainPool<double> pool =
      detail::assemble_pool(store, train, {1, 4});
  REQUIRE(pool.size() == 4);
  REQUIRE(pool.labels == std::vector<int>{0, 1, train.labels[1], train.labels[4]});
  REQUIRE(pool.synthetic == std::vector<char>{1, 1, 0, 0});
  REQUIRE(pool.real_rows == std::vector<std::size_t>{2, 3});
  // synthetic pixels land first, then the gathered real rows
  REQUIRE(pool.images[0] == 0.25);
  REQUIRE(pool.images[2 * 64] == train.image_ptr(1)[0]);
}

TEST_CASE("the pipeline logs one row per task and epoch", "[trainer]") {
  PipeWorld& w = pipes();
  const MetricsLog& log = w.ccsi.log;

  REQUIRE(log.tasks.size() == 2);
  REQUIRE(log.epochs.size() == 16);  // 8 epochs per task
  for (std::size_t i = 0; i < log.epochs.size(); ++i)
    REQUIRE(log.epochs[i].task == (i < 8 ? 0 : 1));
  for (const auto& row : log.tasks) {
    REQUIRE(row.accuracy >= 0.0);
    REQUIRE(row.accuracy <= 1.0);
    REQUIRE(row.seconds >= 0.0);
  }
  REQUIRE_FALSE(log.degraded_replay);
  // the replay losses actually fire on the incremental task
  double idc_sum = 0, margin_sum = 0, dist_sum = 0;
  for (std::size_t i = 8; i < 16; ++i) {
    idc_sum += std::abs(log.epochs[i].idc);
    margin_sum += std::abs(log.epochs[i].margin);
    dist_sum += std::abs(log.epochs[i].dist);
  }
  REQUIRE(dist_sum > 0);
  REQUIRE(idc_sum + margin_sum > 0);
  REQUIRE(w.ccsi.class_order == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("identical seeds reproduce the whole pipeline", "[trainer]") {
  PipeWorld& w = pipes();
  PipelineResult<double> again = run_pipeline(
      w.data, w.schedule, tiny_backbone(), quick_synth(), quick_train(8, 3),
      LossWeights<double>{}, AblationFlags{});
  REQUIRE(again.log.tasks.size() == w.ccsi.log.tasks.size());
  for (std::size_t t = 0; t < again.log.tasks.size(); ++t)
    REQUIRE(again.log.tasks[t].accuracy == w.ccsi.log.tasks[t].accuracy);
  for (std::size_t e = 0; e < again.log.epochs.size(); ++e)
    REQUIRE(again.log.epochs[e].total == w.ccsi.log.epochs[e].total);
  REQUIRE(again.model.bank.embeddings == w.ccsi.model.bank.embeddings);
}

TEST_CASE("replay retains old classes better than naive finetuning",
          "[trainer]") {
  PipeWorld& w = pipes();
  const double old_ccsi = evaluate(w.ccsi.model, w.data.test, {0, 1});
  const double old_ft = evaluate(w.finetune.model, w.data.test, {0, 1});
  INFO("replay " << old_ccsi << " vs finetune " << old_ft);
  REQUIRE(old_ccsi >= old_ft);
  REQUIRE(old_ccsi >= 0.7);
}

TEST_CASE("an empty replay budget degrades gracefully", "[trainer]") {
  PipeWorld& w = pipes();
  SynthesisConfig<double> sc = quick_synth();
  sc.images_per_class = 0;
  th::CaptureStderr cap;
  PipelineResult<double> res =
      run_pipeline(w.data, w.schedule, tiny_backbone(), sc, quick_train(3, 3),
                   LossWeights<double>{}, AblationFlags{});
  REQUIRE(res.log.degraded_replay);
  REQUIRE(res.log.tasks.size() == 2);
  REQUIRE(cap.text().find("replay store is empty") != std::string::npos);
}

TEST_CASE("non-finite training aborts with the failing epoch", "[trainer]") {
  DatasetBundle<double> data = th::quadrant_bundle<double>(2, 16, 4, 16, 8, 41);
  TaskSchedule schedule = build_task_schedule(2, {2});
  Rng rng(42);
  Model<double> model(tiny_backbone(), rng);
  MetricsLog log;
  TrainConfig<double> tc = quick_train(3, 8);
  tc.lr = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_MATCHES(
      train_first_task(model, data, schedule, tc, log), NumericError,
      Catch::Matchers::MessageMatches(
          Catch::Matchers::ContainsSubstring("aborted at epoch")));
}

TEST_CASE("a failing task still flushes the finished rows", "[trainer]") {
  // classes 2 and 3 are declared but have no training samples, and the
  // replay budget is zero, so task 1 has nothing to train on
  DatasetBundle<double> data = th::quadrant_bundle<double>(2, 16, 4, 16, 8, 43);
  data.train.num_classes = 4;
  data.val.num_classes = 4;
  data.test.num_classes = 4;
  TaskSchedule schedule = build_task_schedule(4, {2, 2});
  SynthesisConfig<double> sc = quick_synth();
  sc.images_per_class = 0;

  th::ScratchDir scratch("partial_flush");
  RunWriter writer(scratch.str() + "/run");
  th::CaptureStderr cap;
  REQUIRE_THROWS_AS(
      run_pipeline(data, schedule, tiny_backbone(), sc, quick_train(2, 9),
                   LossWeights<double>{}, AblationFlags{}, &writer),
      EmptyClassError);

  const std::string acc = slurp(fs::path(writer.dir()) / "accuracy.csv");
  REQUIRE(acc.rfind("task,accuracy,seconds\n", 0) == 0);
  REQUIRE(count_lines(acc) == 2);  // header plus the finished task 0
  REQUIRE(fs::exists(fs::path(writer.dir()) / "metrics.csv"));
  REQUIRE(fs::exists(fs::path(writer.dir()) / "summary.json"));
}

TEST_CASE("run artifacts land in the run directory", "[trainer]") {
  PipeWorld& w = pipes();
  th::ScratchDir scratch("artifacts");
  RunWriter writer(scratch.str() + "/run");
  PipelineResult<double> res = run_pipeline(
      w.data, w.schedule, tiny_backbone(), quick_synth(), quick_train(2, 3),
      LossWeights<double>{}, AblationFlags{}, &writer, 1234);

  const fs::path dir(writer.dir());
  REQUIRE(fs::exists(dir / "metrics.csv"));
  REQUIRE(fs::exists(dir / "accuracy.csv"));
  REQUIRE(fs::exists(dir / "summary.json"));
  REQUIRE(fs::exists(dir / "mean_images.bin"));
  REQUIRE(fs::exists(dir / "task_0.ckpt"));
  REQUIRE(fs::exists(dir / "task_1.ckpt"));

  const std::string metrics = slurp(dir / "metrics.csv");
  REQUIRE(metrics.rfind("task,epoch,cn_ce,dist,idc,margin,total,val_accuracy\n",
                        0) == 0);
  REQUIRE(count_lines(metrics) == 1 + 4);

  const std::string summary = slurp(dir / "summary.json");
  REQUIRE(summary.find("\"config_fingerprint\": 1234") != std::string::npos);
  REQUIRE(res.log.config_fingerprint == 1234);

  // the checkpoint round-trips into an equivalent model
  Model<double> back = Model<double>::load((dir / "task_1.ckpt").string());
  Tensor<double> f_a =
      res.model.forward_features_nhwc(w.data.test.images, Mode::Eval);
  Tensor<double> f_b = back.forward_features_nhwc(w.data.test.images, Mode::Eval);
  REQUIRE(f_a.data == f_b.data);
}

TEST_CASE("permuted class orders are remapped to contiguous blocks",
          "[trainer]") {
  TaskSchedule schedule = build_task_schedule(4, {2, 2}, {3, 2, 1, 0});
  REQUIRE(schedule.tasks[0] == std::vector<int>{3, 2});
  REQUIRE(schedule.tasks[1] == std::vector<int>{1, 0});

  DatasetBundle<double> data = th::quadrant_bundle<double>(4, 2, 1, 2, 8, 51);
  TaskSchedule remapped;
  std::vector<int> order;
  DatasetBundle<double> out = remap_by_schedule(data, schedule, remapped, order);

  REQUIRE(order == std::vector<int>{3, 2, 1, 0});
  REQUIRE(remapped.tasks[0] == std::vector<int>{0, 1});
  REQUIRE(remapped.tasks[1] == std::vector<int>{2, 3});
  for (std::size_t i = 0; i < data.train.size(); ++i)
    REQUIRE(out.train.labels[i] == 3 - data.train.labels[i]);
  REQUIRE(out.test.labels.size() == data.test.labels.size());
  REQUIRE(remapped.classes_through(1) == std::vector<int>{0, 1, 2, 3});
}
