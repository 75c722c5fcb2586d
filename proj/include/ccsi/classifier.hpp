#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "ccsi/common.hpp"
#include "ccsi/serialize.hpp"
#include "ccsi/tensor.hpp"

namespace ccsi {

template <typename T>
T softplus(T x) {
  return x > T(30) ? x : T(std::log1p(std::exp(double(x))));
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + T(std::exp(-double(x))));
}

constexpr double kNormEps = 1e-12;

// Unit-normalizes each row of [N,F]; returns per-row norms.
template <typename T>
std::vector<T> normalize_rows(const T* src, std::size_t n, std::size_t f,
                              T* dst) {
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < f; ++j)
      s += double(src[i * f + j]) * double(src[i * f + j]);
    const T nrm = T(std::sqrt(s));
    norms[i] = nrm;
    const T inv = T(1) / (nrm + T(kNormEps));
    for (std::size_t j = 0; j < f; ++j) dst[i * f + j] = src[i * f + j] * inv;
  }
  return norms;
}

// Backward of row normalization: dv = (dvbar - vbar * <vbar, dvbar>) / (|v|+eps)
template <typename T>
void normalize_rows_backward(const T* dvbar, const T* vbar,
                             const std::vector<T>& norms, std::size_t n,
                             std::size_t f, T* dv) {
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < f; ++j)
      dot += double(vbar[i * f + j]) * double(dvbar[i * f + j]);
    const T inv = T(1) / (norms[i] + T(kNormEps));
    for (std::size_t j = 0; j < f; ++j)
      dv[i * f + j] =
          (dvbar[i * f + j] - vbar[i * f + j] * T(dot)) * inv;
  }
}

// ---------------------------------------------------------------------------
// Growable class-embedding bank.  Cosine head by default; the softmax_head
// flag swaps in a plain linear + bias head (ablation).
// ---------------------------------------------------------------------------
template <typename T>
class ClassEmbeddingBank {
 public:
  std::size_t feat_dim = 0;
  std::vector<T> embeddings;  // [K_seen, F]
  T eta_raw = T(0.5413248546129181);  // softplus -> 1.0
  bool softmax_head = false;
  std::vector<T> head_bias;  // [K_seen] when softmax_head

  std::vector<T> d_embeddings;
  T d_eta_raw = T(0);
  std::vector<T> d_head_bias;

  ClassEmbeddingBank() = default;
  explicit ClassEmbeddingBank(std::size_t f, bool linear_head = false)
      : feat_dim(f), softmax_head(linear_head) {}

  std::size_t num_classes() const { return feat_dim ? embeddings.size() / feat_dim : 0; }

  T eta() const { return softplus(eta_raw); }

  void expand(std::size_t n_new, Rng& rng) {
    if (n_new < 1) throw Error("expand needs at least one new class");
    const T std_dev = T(1) / T(std::sqrt(double(feat_dim)));
    for (std::size_t i = 0; i < n_new * feat_dim; ++i)
      embeddings.push_back(T(rng.normal()) * std_dev);
    if (softmax_head) head_bias.resize(num_classes(), T(0));
    zero_grad();
  }

  void zero_grad() {
    d_embeddings.assign(embeddings.size(), T(0));
    d_eta_raw = T(0);
    d_head_bias.assign(head_bias.size(), T(0));
  }

  void save(BinaryWriter& bw) const {
    bw.u32(std::uint32_t(feat_dim));
    bw.u32(std::uint32_t(num_classes()));
    bw.u8(softmax_head ? 1 : 0);
    bw.f64(double(eta_raw));
    for (T v : embeddings) bw.f64(double(v));
    for (T v : head_bias) bw.f64(double(v));
  }

  void load(BinaryReader& br) {
    feat_dim = br.u32();
    const std::size_t k = br.u32();
    softmax_head = br.u8() != 0;
    eta_raw = T(br.f64());
    embeddings.resize(k * feat_dim);
    for (T& v : embeddings) v = T(br.f64());
    head_bias.assign(softmax_head ? k : 0, T(0));
    for (T& v : head_bias) v = T(br.f64());
    zero_grad();
  }
};

// Forward context for the head, kept by the caller for the backward pass.
template <typename T>
struct HeadContext {
  Tensor<T> f;     // [B,F] raw features
  Tensor<T> fbar;  // [B,F]
  Tensor<T> ebar;  // [K,F]
  std::vector<T> f_norm, e_norm;
  Tensor<T> cos;  // [B,K] raw cosines (cosine head only)
  T eta = T(1);
};

template <typename T>
Tensor<T> head_logits(const Tensor<T>& f, const ClassEmbeddingBank<T>& bank,
                      HeadContext<T>* ctx = nullptr) {
  const std::size_t B = f.dim(0), F = f.dim(1), K = bank.num_classes();
  if (F != bank.feat_dim) throw ShapeError("feature dimension mismatch at head");
  Tensor<T> logits({B, K});

  if (bank.softmax_head) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        double s = double(bank.head_bias[k]);
        for (std::size_t j = 0; j < F; ++j)
          s += double(f[b * F + j]) * double(bank.embeddings[k * F + j]);
        logits[b * K + k] = T(s);
      }
    if (ctx) ctx->f = f;
    return logits;
  }

  Tensor<T> fbar({B, F}), ebar({K, F});
  std::vector<T> fn = normalize_rows(f.ptr(), B, F, fbar.ptr());
  std::vector<T> en = normalize_rows(bank.embeddings.data(), K, F, ebar.ptr());
  const T eta = bank.eta();
  Tensor<T> cos({B, K});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < F; ++j)
        s += double(fbar[b * F + j]) * double(ebar[k * F + j]);
      cos[b * K + k] = T(s);
      logits[b * K + k] = eta * T(s);
    }
  if (ctx) {
    ctx->f = f;
    ctx->fbar = std::move(fbar);
    ctx->ebar = std::move(ebar);
    ctx->f_norm = std::move(fn);
    ctx->e_norm = std::move(en);
    ctx->cos = std::move(cos);
    ctx->eta = eta;
  }
  return logits;
}

// Backward through the head.  Returns d(features); accumulates bank gradients
// when param_grads is set.
template <typename T>
Tensor<T> head_backward(const Tensor<T>& dlogits, const HeadContext<T>& ctx,
                        ClassEmbeddingBank<T>& bank, bool param_grads) {
  const std::size_t B = dlogits.dim(0), K = dlogits.dim(1), F = bank.feat_dim;
  Tensor<T> df({B, F}, T(0));

  if (bank.softmax_head) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const T g = dlogits[b * K + k];
        for (std::size_t j = 0; j < F; ++j)
          df[b * F + j] += g * bank.embeddings[k * F + j];
      }
    if (param_grads) {
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
          const T g = dlogits[b * K + k];
          bank.d_head_bias[k] += g;
          for (std::size_t j = 0; j < F; ++j)
            bank.d_embeddings[k * F + j] += g * ctx.f[b * F + j];
        }
    }
    return df;
  }

  // d eta, d cos
  Tensor<T> dfbar({B, F}, T(0));
  Tensor<T> debar({K, F}, T(0));
  double deta = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      const T g = dlogits[b * K + k];
      deta += double(g) * double(ctx.cos[b * K + k]);
      const T gc = g * ctx.eta;
      for (std::size_t j = 0; j < F; ++j) {
        dfbar[b * F + j] += gc * ctx.ebar[k * F + j];
        debar[k * F + j] += gc * ctx.fbar[b * F + j];
      }
    }

  normalize_rows_backward(dfbar.ptr(), ctx.fbar.ptr(), ctx.f_norm, B, F,
                          df.ptr());
  if (param_grads) {
    Tensor<T> de({K, F});
    normalize_rows_backward(debar.ptr(), ctx.ebar.ptr(), ctx.e_norm, K, F,
                            de.ptr());
    for (std::size_t i = 0; i < K * F; ++i) bank.d_embeddings[i] += de[i];
    bank.d_eta_raw += T(deta) * sigmoid(bank.eta_raw);
  }
  return df;
}

// Plain cosine logits, the public query path (eval / pseudo-labeling).
template <typename T>
Tensor<T> cosine_logits(const Tensor<T>& f, const ClassEmbeddingBank<T>& bank) {
  return head_logits(f, bank, static_cast<HeadContext<T>*>(nullptr));
}

template <typename T>
void expand_classifier(ClassEmbeddingBank<T>& bank, std::size_t n_new,
                       Rng& rng) {
  bank.expand(n_new, rng);
}

}  // namespace ccsi
