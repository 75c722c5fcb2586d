#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccsi/backbone.hpp"
#include "ccsi/common.hpp"
#include "ccsi/dataset.hpp"
#include "ccsi/image_io.hpp"
#include "ccsi/losses.hpp"
#include "ccsi/synthesis.hpp"
#include "ccsi/tensor.hpp"

namespace ccsi {

template <typename T>
struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 40;
  T lr = T(0.01);
  T lr_final = T(1e-4);
  T momentum = T(0.9);
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  }
};

struct AblationFlags {
  bool no_synthesis = false;
  bool no_mean_init = false;
  bool no_reg = false;
  bool bn_only = false;  // norm=bn
  bool no_idc = false;
  bool no_margin = false;
  bool softmax_ce = false;
  bool finetune = false;  // naive lower bound: new data only, CN-CE only
};

struct EpochRow {
  int task = 0;
  int epoch = 0;
  double cn_ce = 0, dist = 0, idc = 0, margin = 0, total = 0;
  double val_accuracy = -1;  // -1 = not measured
};

struct TaskRow {
  int task = 0;
  double accuracy = 0;
  double seconds = 0;
};

struct MetricsLog {
  std::vector<EpochRow> epochs;
  std::vector<TaskRow> tasks;
  std::uint64_t config_fingerprint = 0;
  double wall_seconds = 0;
  bool degraded_replay = false;

  std::string epochs_csv() const {
    std::string s = "task,epoch,cn_ce,dist,idc,margin,total,val_accuracy\n";
    char buf[256];
    for (const auto& r : epochs) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.4f\n",
                    r.task, r.epoch, r.cn_ce, r.dist, r.idc, r.margin, r.total,
                    r.val_accuracy);
      s += buf;
    }
    return s;
  }

  std::string tasks_csv() const {
    std::string s = "task,accuracy,seconds\n";
    char buf[128];
    for (const auto& r : tasks) {
      std::snprintf(buf, sizeof buf, "%d,%.6f,%.2f\n", r.task, r.accuracy,
                    r.seconds);
      s += buf;
    }
    return s;
  }
};

template <typename T>
T cosine_lr(const TrainConfig<T>& cfg, std::size_t epoch) {
  if (cfg.epochs <= 1) return cfg.lr;
  const double t = double(epoch) / double(cfg.epochs - 1);
  return cfg.lr_final +
         T(0.5) * (cfg.lr - cfg.lr_final) *
             T(1.0 + std::cos(3.14159265358979323846 * t));
}

// ---------------------------------------------------------------------------
// SGD with classical momentum.  Velocity slots follow the parameter visit
// order; the embedding slot grows in place when the bank expands.
// ---------------------------------------------------------------------------
template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(T momentum) : mu_(momentum) {}

  void step(Model<T>& model, T lr) {
    std::size_t slot = 0;
    auto visit = [&](T* w, T* g, std::size_t n) {
      if (slot >= vel_.size()) vel_.emplace_back(n, T(0));
      auto& v = vel_[slot];
      if (v.size() != n) v.resize(n, T(0));
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = mu_ * v[i] - lr * g[i];
        w[i] += v[i];
      }
      ++slot;
    };
    model.extractor.for_each_param(visit);
    visit(model.bank.embeddings.data(), model.bank.d_embeddings.data(),
          model.bank.embeddings.size());
    visit(&model.bank.eta_raw, &model.bank.d_eta_raw, 1);
    if (model.bank.softmax_head)
      visit(model.bank.head_bias.data(), model.bank.d_head_bias.data(),
            model.bank.head_bias.size());
  }

 private:
  T mu_;
  std::vector<std::vector<T>> vel_;
};

// ---------------------------------------------------------------------------
// Evaluation: argmax over the head's logits on the union of test samples of
// the seen classes.
// ---------------------------------------------------------------------------
template <typename T>
double evaluate(Model<T>& model, const LabeledImageSet<T>& test,
                const std::vector<int>& seen_classes,
                std::size_t eval_batch = 64) {
  std::set<int> seen(seen_classes.begin(), seen_classes.end());
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (seen.count(test.labels[i])) idx.push_back(i);
  if (idx.empty()) throw EvalError("no test samples for the seen classes");

  const std::size_t h = test.height(), w = test.width();
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += eval_batch) {
    const std::size_t end = std::min(idx.size(), start + eval_batch);
    std::vector<std::size_t> chunk(idx.begin() + long(start),
                                   idx.begin() + long(end));
    Tensor<T> bcd = gather_batch(test, chunk);
    Tensor<T> f = model.forward_features(bcd, h, w, Mode::Eval);
    Tensor<T> logits = head_logits(f, model.bank, (HeadContext<T>*)nullptr);
    const std::size_t K = logits.dim(1);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits[b * K + k] > logits[b * K + best]) best = k;
      if (int(best) == test.labels[chunk[b]]) ++correct;
    }
  }
  return double(correct) / double(idx.size());
}

// ---------------------------------------------------------------------------
// Run directory artifacts.
// ---------------------------------------------------------------------------
class RunWriter {
 public:
  explicit RunWriter(std::string dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  const std::string& dir() const { return dir_; }

  void write_text(const std::string& name, const std::string& content) const {
    std::ofstream os(dir_ + "/" + name, std::ios::binary);
    if (!os) throw Error("cannot write " + dir_ + "/" + name);
    os << content;
  }

  void flush_metrics(const MetricsLog& log) const {
    write_text("metrics.csv", log.epochs_csv());
    write_text("accuracy.csv", log.tasks_csv());
    nlohmann::json j;
    j["config_fingerprint"] = log.config_fingerprint;
    j["wall_seconds"] = log.wall_seconds;
    j["degraded_replay"] = log.degraded_replay;
    j["final_accuracy"] =
        log.tasks.empty() ? nullptr : nlohmann::json(log.tasks.back().accuracy);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : log.tasks)
      rows.push_back({{"task", r.task},
                      {"accuracy", r.accuracy},
                      {"seconds", r.seconds}});
    j["tasks"] = rows;
    write_text("summary.json", j.dump(2));
  }

  std::string checkpoint_path(int task) const {
    return dir_ + "/task_" + std::to_string(task) + ".ckpt";
  }

  // PNG grid of a synthetic batch plus a JSON manifest for inspection.
  template <typename T>
  void dump_synthetic(const SyntheticBatch<T>& batch, int task,
                      int round) const {
    const std::size_t M = batch.images.dim(0), H = batch.images.dim(1),
                      W = batch.images.dim(2), C = batch.images.dim(3);
    const std::size_t cols = 8, rows = (M + cols - 1) / cols;
    ImageU8 grid;
    grid.height = rows * H;
    grid.width = cols * W;
    grid.channels = C;
    grid.pixels.assign(grid.height * grid.width * C, 255);
    for (std::size_t m = 0; m < M; ++m) {
      const std::size_t gy = (m / cols) * H, gx = (m % cols) * W;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          for (std::size_t c = 0; c < C; ++c) {
            const T v = batch.images[((m * H + y) * W + x) * C + c];
            grid.pixels[((gy + y) * grid.width + gx + x) * C + c] =
                (unsigned char)std::lround(
                    std::min(1.0, std::max(0.0, double(v))) * 255.0);
          }
    }
    std::filesystem::create_directories(dir_ + "/synth");
    const std::string stem = "synth/task_" + std::to_string(task) + "_round_" +
                             std::to_string(round);
    write_png(dir_ + "/" + stem + ".png", grid);
    nlohmann::json j;
    j["labels"] = batch.labels;
    j["source_task"] = batch.source_task;
    j["final_objective"] = double(batch.final_objective);
    j["used_noise_fallback"] = batch.used_noise_fallback;
    write_text(stem + ".json", j.dump(2));
  }

 private:
  std::string dir_;
};

namespace detail {

template <typename T>
Tensor<T> gather_nhwc_rows_bcd(const Tensor<T>& images,
                               const std::vector<std::size_t>& idx) {
  const std::size_t h = images.dim(1), w = images.dim(2), c = images.dim(3);
  Tensor<T> out({idx.size(), c, h * w});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const T* src = images.ptr() + idx[b] * h * w * c;
    T* dst = out.ptr() + b * c * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          dst[ch * h * w + y * w + x] = src[(y * w + x) * c + ch];
  }
  return out;
}

// Mixed pool of synthetic replay and real new-task samples.
template <typename T>
struct TrainPool {
  Tensor<T> images;  // [P,H,W,C]
  std::vector<int> labels;
  std::vector<char> synthetic;
  std::vector<std::size_t> real_rows;

  std::size_t size() const { return labels.size(); }
};

template <typename T>
TrainPool<T> assemble_pool(const std::vector<SyntheticBatch<T>>& store,
                           const LabeledImageSet<T>& train,
                           const std::vector<std::size_t>& real_idx) {
  std::size_t n_syn = 0;
  for (const auto& b : store) n_syn += b.labels.size();
  std::size_t h = train.height(), w = train.width(), c = train.channels();
  if (!store.empty()) {
    h = store[0].images.dim(1);
    w = store[0].images.dim(2);
    c = store[0].images.dim(3);
  }
  TrainPool<T> pool;
  pool.images = Tensor<T>({n_syn + real_idx.size(), h, w, c});
  pool.labels.reserve(n_syn + real_idx.size());
  const std::size_t ppi = h * w * c;
  std::size_t row = 0;
  for (const auto& b : store) {
    std::copy(b.images.data.begin(), b.images.data.end(),
              pool.images.ptr() + row * ppi);
    for (int y : b.labels) {
      pool.labels.push_back(y);
      pool.synthetic.push_back(1);
    }
    row += b.labels.size();
  }
  for (std::size_t i : real_idx) {
    std::copy(train.image_ptr(i), train.image_ptr(i) + ppi,
              pool.images.ptr() + row * ppi);
    pool.labels.push_back(train.labels[i]);
    pool.synthetic.push_back(0);
    pool.real_rows.push_back(row);
    ++row;
  }
  return pool;
}

// Class-balanced batch assembly: round-robin over classes, per-class queues
// reshuffled on exhaustion so minority classes are oversampled.
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<int>& labels, std::uint64_t seed)
      : rng_(seed) {
    for (std::size_t i = 0; i < labels.size(); ++i)
      queues_[labels[i]].items.push_back(i);
    for (auto& [cls, q] : queues_) reshuffle(q);
    for (auto& [cls, q] : queues_) classes_.push_back(cls);
  }

  std::size_t pool_size() const {
    std::size_t n = 0;
    for (const auto& [cls, q] : queues_) n += q.items.size();
    return n;
  }

  std::vector<std::size_t> next_batch(std::size_t batch_size) {
    std::vector<std::size_t> out(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
      auto& q = queues_[classes_[cursor_ % classes_.size()]];
      ++cursor_;
      if (q.next >= q.items.size()) reshuffle(q);
      out[i] = q.items[q.next++];
    }
    return out;
  }

 private:
  struct Queue {
    std::vector<std::size_t> items;
    std::size_t next = 0;
  };
  void reshuffle(Queue& q) {
    rng_.shuffle(q.items.begin(), q.items.end());
    q.next = 0;
  }
  std::map<int, Queue> queues_;
  std::vector<int> classes_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Supervised phase for the first task: CN-CE only.
// ---------------------------------------------------------------------------
template <typename T>
void train_first_task(Model<T>& model, const DatasetBundle<T>& data,
                      const TaskSchedule& schedule, const TrainConfig<T>& cfg,
                      MetricsLog& log) {
  cfg.validate();
  const std::vector<int>& classes0 = schedule.tasks.at(0);
  Rng rng(cfg.seed);
  model.bank.expand(classes0.size(), rng);

  std::set<int> cls_set(classes0.begin(), classes0.end());
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < data.train.size(); ++i)
    if (cls_set.count(data.train.labels[i])) train_idx.push_back(i);
  if (train_idx.empty()) throw EmptyClassError("first task has no training data");

  const std::size_t h = data.train.height(), w = data.train.width();
  SgdMomentum<T> opt(cfg.momentum);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const T lr = cosine_lr(cfg, epoch);
    rng.shuffle(train_idx.begin(), train_idx.end());
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train_idx.size();
         start += cfg.batch_size) {
      const std::size_t end =
          std::min(train_idx.size(), start + cfg.batch_size);
      if (end - start < 2) continue;
      std::vector<std::size_t> chunk(train_idx.begin() + long(start),
                                     train_idx.begin() + long(end));
      Tensor<T> bcd = gather_batch(data.train, chunk);
      std::vector<int> labels(chunk.size());
      for (std::size_t i = 0; i < chunk.size(); ++i)
        labels[i] = data.train.labels[chunk[i]];

      try {
        model.zero_grad();
        Tensor<T> f = model.forward_features(bcd, h, w, Mode::Train);
        Tensor<T> dfeat({f.dim(0), f.dim(1)}, T(0));
        const T loss = cn_ce_loss_grad(f, labels, model.bank, dfeat, true);
        if (!std::isfinite(double(loss)))
          throw NumericError("training loss is not finite");
        model.extractor.backward(dfeat, true);
        opt.step(model, lr);
        loss_sum += double(loss);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (aborted at epoch " +
                           std::to_string(epoch) + ")");
      }
      ++batches;
    }
    EpochRow row;
    row.task = 0;
    row.epoch = int(epoch);
    row.cn_ce = batches ? loss_sum / double(batches) : 0.0;
    row.total = row.cn_ce;
    if (data.val.size()) {
      try {
        row.val_accuracy = evaluate(model, data.val, classes0);
      } catch (const EvalError&) {
      }
    }
    log.epochs.push_back(row);
  }
}

// ---------------------------------------------------------------------------
// Incremental step: freeze, snapshot, synthesize replay, expand the head,
// train jointly with the combined loss, refreshing pseudo-labels per epoch.
// ---------------------------------------------------------------------------
template <typename T>
void incremental_step(Model<T>& model, const DatasetBundle<T>& data,
                      const TaskSchedule& schedule, std::size_t task,
                      MeanImageStore<T>& means,
                      const SynthesisConfig<T>& synth_cfg,
                      const TrainConfig<T>& cfg, const LossWeights<T>& weights,
                      const AblationFlags& ablate, MetricsLog& log,
                      const RunWriter* writer = nullptr) {
  cfg.validate();
  weights.validate();
  const std::vector<int> prev_classes = schedule.classes_through(task - 1);
  const std::vector<int>& new_classes = schedule.tasks.at(task);
  const std::vector<int> seen_classes = schedule.classes_through(task);

  Model<T> frozen = clone_frozen(model);
  CNSnapshot<T> snapshot = snapshot_moments(model);

  std::vector<SyntheticBatch<T>> store;
  if (!ablate.finetune) {
    SynthesisConfig<T> scfg = synth_cfg;
    scfg.seed = synth_cfg.seed + 7919 * task;
    if (ablate.no_synthesis) scfg.iterations = 0;  // mean + noise replay
    store = build_replay_store(frozen, snapshot, means, prev_classes, scfg,
                               int(task) - 1);
    if (writer)
      for (std::size_t r = 0; r < store.size(); ++r)
        writer->dump_synthetic(store[r], int(task), int(r));
  }
  const bool degraded = store.empty() && !ablate.finetune;
  if (degraded) {
    warn("replay store is empty; falling back to distillation-only training");
    log.degraded_replay = true;
  }

  Rng rng_expand(cfg.seed + 7700 + task);
  model.bank.expand(new_classes.size(), rng_expand);

  std::set<int> new_set(new_classes.begin(), new_classes.end());
  std::vector<std::size_t> real_idx;
  for (std::size_t i = 0; i < data.train.size(); ++i)
    if (new_set.count(data.train.labels[i])) real_idx.push_back(i);

  detail::TrainPool<T> pool = detail::assemble_pool(store, data.train, real_idx);
  if (pool.size() == 0) throw EmptyClassError("incremental step has no data");
  const std::size_t h = pool.images.dim(1), w = pool.images.dim(2);

  std::set<int> prev_set(prev_classes.begin(), prev_classes.end());
  SgdMomentum<T> opt(cfg.momentum);
  const bool use_dist = !ablate.finetune && weights.alpha_dist > T(0);
  const bool use_idc =
      !ablate.finetune && weights.alpha_idc > T(0) && !store.empty();
  const bool use_margin =
      !ablate.finetune && weights.alpha_margin > T(0) && !store.empty();

  // One optimizer step over a mixed batch; returns the unweighted components.
  auto train_batch = [&](const std::vector<std::size_t>& batch_rows,
                         const std::vector<int>& pseudo, T lr) {
    Tensor<T> bcd = detail::gather_nhwc_rows_bcd(pool.images, batch_rows);
    std::vector<int> labels(batch_rows.size());
    std::vector<std::size_t> syn_rows, real_rows;
    for (std::size_t i = 0; i < batch_rows.size(); ++i) {
      labels[i] = pool.labels[batch_rows[i]];
      if (pool.synthetic[batch_rows[i]])
        syn_rows.push_back(i);
      else
        real_rows.push_back(i);
    }

    model.zero_grad();
    Tensor<T> f = model.forward_features(bcd, h, w, Mode::Train);
    const std::size_t F = f.dim(1);
    Tensor<T> dfeat({f.dim(0), F}, T(0));

    LossComponents<T> comps;
    comps.cn_ce = cn_ce_loss_grad(f, labels, model.bank, dfeat, true);

    if (use_dist) {
      Tensor<T> f_old = frozen.forward_features(bcd, h, w, Mode::Eval);
      comps.dist = distillation_loss_grad(f_old, f, dfeat, weights.alpha_dist);
    }

    if (use_margin && !syn_rows.empty()) {
      Tensor<T> f_syn({syn_rows.size(), F});
      std::vector<int> syn_labels(syn_rows.size());
      for (std::size_t i = 0; i < syn_rows.size(); ++i) {
        std::copy(f.ptr() + syn_rows[i] * F, f.ptr() + (syn_rows[i] + 1) * F,
                  f_syn.ptr() + i * F);
        syn_labels[i] = labels[syn_rows[i]];
      }
      Tensor<T> d_syn({syn_rows.size(), F}, T(0));
      comps.margin =
          margin_loss_grad(f_syn, syn_labels, model.bank, new_classes,
                           weights.margin, d_syn, true, weights.alpha_margin);
      for (std::size_t i = 0; i < syn_rows.size(); ++i)
        for (std::size_t j = 0; j < F; ++j)
          dfeat[syn_rows[i] * F + j] += d_syn[i * F + j];
    }

    if (use_idc) {
      // source: synthetic rows by true label; target: real rows by pseudo
      std::vector<int> src_labels(batch_rows.size(), -1);
      std::vector<int> tgt_labels(batch_rows.size(), -1);
      std::set<int> src_cover, tgt_cover;
      for (std::size_t i : syn_rows) {
        src_labels[i] = labels[i];
        src_cover.insert(labels[i]);
      }
      for (std::size_t i : real_rows) {
        const int pl = pseudo[batch_rows[i]];
        if (pl >= 0 && prev_set.count(pl)) {
          tgt_labels[i] = pl;
          tgt_cover.insert(pl);
        }
      }
      std::vector<int> covered;
      for (int c : src_cover)
        if (tgt_cover.count(c)) covered.push_back(c);
      if (covered.size() >= 2) {
        CentroidContext<T> ctx_s, ctx_t;
        CentroidSet<T> src =
            class_centroids(f, src_labels, covered, "source", &ctx_s);
        CentroidSet<T> tgt =
            class_centroids(f, tgt_labels, covered, "target", &ctx_t);
        std::vector<int> usable;
        for (int c : covered)
          if (src.centroids.count(c) && tgt.centroids.count(c))
            usable.push_back(c);
        if (usable.size() >= 2) {
          std::map<int, std::vector<T>> dsrc, dtgt;
          comps.idc = idc_loss_grad(src, tgt, weights.tau, usable, dsrc, dtgt,
                                    weights.alpha_idc);
          centroid_set_backward(dsrc, src, ctx_s, dfeat);
          centroid_set_backward(dtgt, tgt, ctx_t, dfeat);
        }
      }
    }

    if (!std::isfinite(double(total_loss(comps, weights))))
      throw NumericError("training loss is not finite");
    model.extractor.backward(dfeat, true);
    opt.step(model, lr);
    return comps;
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const T lr = cosine_lr(cfg, epoch);

    // epoch refresh of pseudo-labels for the real (unlabeled) inputs
    std::vector<int> pseudo(pool.size(), -1);
    if (use_idc && !pool.real_rows.empty()) {
      const std::size_t chunk_n = 64;
      for (std::size_t start = 0; start < pool.real_rows.size();
           start += chunk_n) {
        const std::size_t end =
            std::min(pool.real_rows.size(), start + chunk_n);
        std::vector<std::size_t> rows(pool.real_rows.begin() + long(start),
                                      pool.real_rows.begin() + long(end));
        Tensor<T> bcd = detail::gather_nhwc_rows_bcd(pool.images, rows);
        Tensor<T> f = model.forward_features(bcd, h, w, Mode::Eval);
        std::vector<int> pl = pseudo_labels(f, model.bank);
        for (std::size_t i = 0; i < rows.size(); ++i) pseudo[rows[i]] = pl[i];
      }
    }

    detail::BalancedSampler sampler(pool.labels,
                                    cfg.seed ^ (0xb5297a4dull * (task + 1)) ^
                                        (0x68e31da4ull * (epoch + 1)));
    const std::size_t num_batches =
        (pool.size() + cfg.batch_size - 1) / cfg.batch_size;

    LossComponents<double> sums;
    for (std::size_t bi = 0; bi < num_batches; ++bi) {
      try {
        LossComponents<T> comps =
            train_batch(sampler.next_batch(cfg.batch_size), pseudo, lr);
        sums.cn_ce += double(comps.cn_ce);
        sums.dist += double(comps.dist);
        sums.idc += double(comps.idc);
        sums.margin += double(comps.margin);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (aborted at epoch " +
                           std::to_string(epoch) + ")");
      }
    }

    EpochRow row;
    row.task = int(task);
    row.epoch = int(epoch);
    row.cn_ce = sums.cn_ce / double(num_batches);
    row.dist = sums.dist / double(num_batches);
    row.idc = sums.idc / double(num_batches);
    row.margin = sums.margin / double(num_batches);
    row.total = row.cn_ce + double(weights.alpha_dist) * row.dist +
                double(weights.alpha_idc) * row.idc +
                double(weights.alpha_margin) * row.margin;
    if (data.val.size()) {
      try {
        row.val_accuracy = evaluate(model, data.val, seen_classes);
      } catch (const EvalError&) {
      }
    }
    log.epochs.push_back(row);
  }
}

// ---------------------------------------------------------------------------
// Full pipeline.
// ---------------------------------------------------------------------------
template <typename T>
struct PipelineResult {
  MetricsLog log;
  Model<T> model;
  std::vector<int> class_order;  // original label at each remapped position
};

// Remaps dataset labels so schedule tasks become contiguous ascending blocks;
// the head grows in appearance order.
template <typename T>
DatasetBundle<T> remap_by_schedule(const DatasetBundle<T>& data,
                                   const TaskSchedule& schedule,
                                   TaskSchedule& remapped,
                                   std::vector<int>& class_order) {
  class_order.clear();
  std::map<int, int> to_new;
  for (const auto& task : schedule.tasks)
    for (int y : task) {
      to_new[y] = int(class_order.size());
      class_order.push_back(y);
    }
  remapped.tasks.clear();
  int cursor = 0;
  for (const auto& task : schedule.tasks) {
    std::vector<int> t;
    for (std::size_t i = 0; i < task.size(); ++i) t.push_back(cursor++);
    remapped.tasks.push_back(std::move(t));
  }
  DatasetBundle<T> out = data;
  for (SplitTag s : {SplitTag::Train, SplitTag::Val, SplitTag::Test})
    for (int& y : out.split(s).labels) y = to_new.at(y);
  return out;
}

template <typename T>
PipelineResult<T> run_pipeline(const DatasetBundle<T>& data,
                               const TaskSchedule& schedule,
                               BackboneConfig<T> backbone_cfg,
                               SynthesisConfig<T> synth_cfg,
                               TrainConfig<T> train_cfg,
                               LossWeights<T> weights, AblationFlags ablate,
                               const RunWriter* writer = nullptr,
                               std::uint64_t config_fingerprint = 0,
                               bool dump_synth = false) {
  schedule.validate(data.train.num_classes);
  train_cfg.validate();
  synth_cfg.validate();
  weights.validate();

  if (ablate.bn_only) backbone_cfg.use_gn = false;
  if (ablate.no_mean_init) synth_cfg.mean_init = false;
  if (ablate.no_reg) {
    synth_cfg.alpha_tv = T(0);
    synth_cfg.alpha_l2 = T(0);
    synth_cfg.alpha_cn = T(0);
  }
  if (ablate.no_idc) weights.alpha_idc = T(0);
  if (ablate.no_margin) weights.alpha_margin = T(0);

  PipelineResult<T> result;
  TaskSchedule sched2;
  DatasetBundle<T> data2 =
      remap_by_schedule(data, schedule, sched2, result.class_order);
  backbone_cfg.in_channels = data2.train.channels();

  Rng rng_model(train_cfg.seed * 0x9e3779b9ull + 11);
  result.model = Model<T>(backbone_cfg, rng_model, ablate.softmax_ce);
  result.log.config_fingerprint = config_fingerprint;

  MeanImageStore<T> means;
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         t_start)
        .count();
  };

  try {
    for (std::size_t t = 0; t < sched2.num_tasks(); ++t) {
      const double t0 = elapsed();
      means.add_missing(data2.train, sched2.tasks[t]);
      if (t == 0) {
        train_first_task(result.model, data2, sched2, train_cfg, result.log);
      } else {
        incremental_step(result.model, data2, sched2, t, means, synth_cfg,
                         train_cfg, weights, ablate, result.log,
                         dump_synth ? writer : nullptr);
      }
      TaskRow row;
      row.task = int(t);
      row.accuracy =
          evaluate(result.model, data2.test, sched2.classes_through(t));
      row.seconds = elapsed() - t0;
      result.log.tasks.push_back(row);
      result.log.wall_seconds = elapsed();
      if (writer) {
        result.model.save(writer->checkpoint_path(int(t)));
        writer->flush_metrics(result.log);
      }
    }
  } catch (...) {
    result.log.wall_seconds = elapsed();
    if (writer) writer->flush_metrics(result.log);
    throw;
  }
  if (writer) {
    means.save(writer->dir() + "/mean_images.bin");
    writer->flush_metrics(result.log);
  }
  return result;
}

}  // namespace ccsi
