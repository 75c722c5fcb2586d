#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ccsi/backbone.hpp"
#include "ccsi/common.hpp"
#include "ccsi/continual_norm.hpp"
#include "ccsi/dataset.hpp"
#include "ccsi/losses.hpp"
#include "ccsi/tensor.hpp"

namespace ccsi {

template <typename T>
struct SynthesisConfig {
  std::size_t batch_size = 40;
  std::size_t iterations = 2000;
  T learning_rate = T(0.01);
  T alpha_tv = T(2.5e-4);
  T alpha_l2 = T(3e-6);
  T alpha_cn = T(10);
  std::size_t images_per_class = 40;
  std::uint64_t seed = 0;
  bool mean_init = true;        // false = Gaussian start (ablation)
  T init_noise_std = T(0.05);   // start is the noisy mean image
  T adam_beta1 = T(0.9), adam_beta2 = T(0.999), adam_eps = T(1e-8);

  void validate() const {
    if (alpha_tv < T(0) || alpha_l2 < T(0) || alpha_cn < T(0))
      throw ConfigError("synthesis regularizer weights must be nonnegative");
    if (batch_size < 1) throw ConfigError("synthesis batch size must be >= 1");
  }
};

template <typename T>
struct SyntheticBatch {
  Tensor<T> images;  // [M,H,W,C] in [0,1]
  std::vector<int> labels;
  int source_task = -1;
  T final_objective = T(0);
  bool used_noise_fallback = false;
};

// ---------------------------------------------------------------------------
// Image-space regularizers.
// ---------------------------------------------------------------------------

// Sum of squared horizontal and vertical neighbor differences, batch-averaged.
template <typename T>
T r_tv(const Tensor<T>& images, Tensor<T>* grad = nullptr) {
  const std::size_t M = images.dim(0), H = images.dim(1), W = images.dim(2),
                    C = images.dim(3);
  double total = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    const T* img = images.ptr() + m * H * W * C;
    T* g = grad ? grad->ptr() + m * H * W * C : nullptr;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = (y * W + x) * C + c;
          if (x + 1 < W) {
            const double d = double(img[i + C]) - double(img[i]);
            total += d * d;
            if (g) {
              g[i] -= T(2.0 * d / double(M));
              g[i + C] += T(2.0 * d / double(M));
            }
          }
          if (y + 1 < H) {
            const double d = double(img[i + W * C]) - double(img[i]);
            total += d * d;
            if (g) {
              g[i] -= T(2.0 * d / double(M));
              g[i + W * C] += T(2.0 * d / double(M));
            }
          }
        }
  }
  return T(total / double(M));
}

// Mean over the batch of per-image Euclidean norms.
template <typename T>
T r_l2(const Tensor<T>& images, Tensor<T>* grad = nullptr) {
  const std::size_t M = images.dim(0);
  const std::size_t P = images.numel() / std::max<std::size_t>(M, 1);
  double total = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    const T* img = images.ptr() + m * P;
    double sq = 0.0;
    for (std::size_t i = 0; i < P; ++i) sq += double(img[i]) * double(img[i]);
    const double nrm = std::sqrt(sq);
    total += nrm;
    if (grad && nrm > 1e-12) {
      T* g = grad->ptr() + m * P;
      for (std::size_t i = 0; i < P; ++i)
        g[i] += T(double(img[i]) / (nrm * double(M)));
    }
  }
  return T(total / double(M));
}

// Statistics regularizer: Euclidean distance between captured batch moments
// and the snapshot, per layer and per stage, summed.  Optionally emits the
// gradient coefficients for injection at each CN layer.
template <typename T>
T r_cn(const std::vector<CNCapture<T>>& captures, const CNSnapshot<T>& snapshot,
       std::vector<RcnGrad<T>>* grads = nullptr, T scale = T(1)) {
  if (captures.size() != snapshot.layers.size())
    throw StructuralError("capture/snapshot layer count mismatch");
  if (grads) grads->assign(captures.size(), {});

  double total = 0.0;
  for (std::size_t l = 0; l < captures.size(); ++l) {
    const auto& cap = captures[l];
    const auto& snap = snapshot.layers[l];
    auto term = [&](const std::vector<T>& a, const std::vector<T>& b,
                    std::vector<T>* g) {
      if (a.size() != b.size())
        throw StructuralError("moment array size mismatch at layer " +
                              std::to_string(l));
      double sq = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        sq += d * d;
      }
      const double nrm = std::sqrt(sq);
      if (g) {
        g->assign(a.size(), T(0));
        if (nrm > 1e-12)
          for (std::size_t i = 0; i < a.size(); ++i)
            (*g)[i] = scale * T((double(a[i]) - double(b[i])) / nrm);
      }
      return nrm;
    };
    RcnGrad<T>* g = grads ? &(*grads)[l] : nullptr;
    total += term(cap.gn_mean, snap.gn_mean, g ? &g->gn_mean : nullptr);
    total += term(cap.gn_var, snap.gn_var, g ? &g->gn_var : nullptr);
    total += term(cap.bn_mean, snap.bn_mean, g ? &g->bn_mean : nullptr);
    total += term(cap.bn_var, snap.bn_var, g ? &g->bn_var : nullptr);
  }
  return T(total);
}

// ---------------------------------------------------------------------------
// Full inversion objective: classification loss on the frozen head plus the
// three regularizers.  Differentiable w.r.t. pixels only.
// ---------------------------------------------------------------------------
template <typename T>
T synthesis_objective(const Tensor<T>& images, const std::vector<int>& labels,
                      Model<T>& frozen, const CNSnapshot<T>& snapshot,
                      const SynthesisConfig<T>& config,
                      Tensor<T>* dimages = nullptr) {
  const std::size_t H = images.dim(1), W = images.dim(2);
  Tensor<T> bcd = nhwc_to_bcd(images);
  Tensor<T> f = frozen.forward_features(bcd, H, W, Mode::Eval, true);

  Tensor<T> dfeat({f.dim(0), f.dim(1)}, T(0));
  T l_class;
  if (dimages) {
    l_class = cn_ce_loss_grad(f, labels, frozen.bank, dfeat, false);
  } else {
    l_class = cn_ce_loss(f, labels, frozen.bank);
  }

  std::vector<CNCapture<T>> captures;
  for (ContinualNorm<T>* layer : frozen.extractor.cn_layers())
    captures.push_back(layer->captured());

  std::vector<RcnGrad<T>> rcn_grads;
  const T v_cn =
      r_cn(captures, snapshot, dimages ? &rcn_grads : nullptr, config.alpha_cn);

  T v_tv, v_l2;
  if (dimages) {
    Tensor<T> g_tv(images.shape, T(0)), g_l2(images.shape, T(0));
    v_tv = r_tv(images, &g_tv);
    v_l2 = r_l2(images, &g_l2);
    Tensor<T> dx_bcd = frozen.extractor.backward(dfeat, false, &rcn_grads);
    Tensor<T> dx = bcd_to_nhwc(dx_bcd, H, W);
    for (std::size_t i = 0; i < images.numel(); ++i)
      (*dimages)[i] +=
          dx[i] + config.alpha_tv * g_tv[i] + config.alpha_l2 * g_l2[i];
  } else {
    v_tv = r_tv(images);
    v_l2 = r_l2(images);
  }

  const T obj = l_class + config.alpha_tv * v_tv + config.alpha_l2 * v_l2 +
                config.alpha_cn * v_cn;
  if (!std::isfinite(double(obj)))
    throw NumericError("non-finite synthesis objective");
  return obj;
}

// ---------------------------------------------------------------------------
// Pixel-space optimization with adaptive-moment updates.
// ---------------------------------------------------------------------------
template <typename T>
SyntheticBatch<T> synthesize_batch(Model<T>& frozen,
                                   const CNSnapshot<T>& snapshot,
                                   const MeanImageStore<T>& means,
                                   const std::vector<int>& target_labels,
                                   const SynthesisConfig<T>& config,
                                   int source_task, std::uint64_t round_seed) {
  config.validate();
  SyntheticBatch<T> batch;
  batch.labels = target_labels;
  batch.source_task = source_task;

  // geometry from any stored mean image, else from a probe
  std::size_t h = 0, w = 0, c = 0;
  for (int y : target_labels)
    if (means.has(y)) {
      const auto& m = means.get(y);
      h = m.pixels.dim(0);
      w = m.pixels.dim(1);
      c = m.pixels.dim(2);
      break;
    }
  if (h == 0) {
    if (means.by_class.empty())
      throw EmptyClassError("no mean images available to size the canvas");
    const auto& m = means.by_class.begin()->second;
    h = m.pixels.dim(0);
    w = m.pixels.dim(1);
    c = m.pixels.dim(2);
  }

  const std::size_t M = target_labels.size();
  batch.images = Tensor<T>({M, h, w, c});
  Rng rng(round_seed);
  for (std::size_t i = 0; i < M; ++i) {
    T* img = batch.images.ptr() + i * h * w * c;
    const int y = target_labels[i];
    if (config.mean_init && means.has(y)) {
      const auto& m = means.get(y);
      for (std::size_t j = 0; j < h * w * c; ++j) {
        T v = m.pixels[j] + config.init_noise_std * T(rng.normal());
        img[j] = std::min(T(1), std::max(T(0), v));
      }
    } else {
      if (config.mean_init) {
        warn("missing mean image for class " + std::to_string(y) +
             "; falling back to Gaussian initialization");
        batch.used_noise_fallback = true;
      }
      for (std::size_t j = 0; j < h * w * c; ++j) {
        T v = T(0.5) + T(0.1) * T(rng.normal());
        img[j] = std::min(T(1), std::max(T(0), v));
      }
    }
  }

  if (config.iterations == 0) {
    batch.final_objective =
        synthesis_objective(batch.images, batch.labels, frozen, snapshot,
                            config, static_cast<Tensor<T>*>(nullptr));
    return batch;
  }

  Tensor<T> m1(batch.images.shape, T(0)), m2(batch.images.shape, T(0));
  T obj = T(0);
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    Tensor<T> grad(batch.images.shape, T(0));
    try {
      obj = synthesis_objective(batch.images, batch.labels, frozen, snapshot,
                                config, &grad);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at iteration " +
                         std::to_string(it));
    }
    const T b1t = T(1) - T(std::pow(double(config.adam_beta1), double(it)));
    const T b2t = T(1) - T(std::pow(double(config.adam_beta2), double(it)));
    for (std::size_t i = 0; i < grad.numel(); ++i) {
      m1[i] = config.adam_beta1 * m1[i] + (T(1) - config.adam_beta1) * grad[i];
      m2[i] =
          config.adam_beta2 * m2[i] + (T(1) - config.adam_beta2) * grad[i] * grad[i];
      const T mhat = m1[i] / b1t;
      const T vhat = m2[i] / b2t;
      T v = batch.images[i] -
            config.learning_rate * mhat / (T(std::sqrt(double(vhat))) + config.adam_eps);
      batch.images[i] = std::min(T(1), std::max(T(0), v));
    }
  }
  batch.final_objective = obj;
  return batch;
}

// ---------------------------------------------------------------------------
// Replay store: rounds of synthesis with labels cycling uniformly over the
// previous classes until every class holds images_per_class samples.
// ---------------------------------------------------------------------------
template <typename T>
std::vector<SyntheticBatch<T>> build_replay_store(
    Model<T>& frozen, const CNSnapshot<T>& snapshot,
    const MeanImageStore<T>& means, const std::vector<int>& previous_classes,
    const SynthesisConfig<T>& config, int source_task) {
  if (previous_classes.empty())
    throw EmptyClassError("replay store needs at least one previous class");

  std::map<int, std::size_t> counts;
  for (int y : previous_classes) counts[y] = 0;
  auto satisfied = [&]() {
    for (const auto& [y, n] : counts)
      if (n < config.images_per_class) return false;
    return true;
  };

  std::vector<SyntheticBatch<T>> store;
  std::size_t cursor = 0, round = 0;
  while (!satisfied()) {
    std::vector<int> labels(config.batch_size);
    for (std::size_t i = 0; i < config.batch_size; ++i) {
      labels[i] = previous_classes[cursor % previous_classes.size()];
      ++cursor;
    }
    SyntheticBatch<T> batch =
        synthesize_batch(frozen, snapshot, means, labels, config, source_task,
                         config.seed + 0x51u * (round + 1));
    for (int y : labels) ++counts[y];
    store.push_back(std::move(batch));
    ++round;
  }
  return store;
}

}  // namespace ccsi
