#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ccsi/classifier.hpp"
#include "ccsi/common.hpp"
#include "ccsi/tensor.hpp"

namespace ccsi {

template <typename T>
struct LossWeights {
  T alpha_dist = T(5);
  T alpha_idc = T(1);
  T alpha_margin = T(1);
  T margin = T(0.5);
  T tau = T(5);

  void validate() const {
    if (alpha_dist < T(0) || alpha_idc < T(0) || alpha_margin < T(0) ||
        margin < T(0))
      throw ConfigError("loss weights must be nonnegative");
    if (tau <= T(0)) throw ConfigError("tau must be positive");
  }
};

template <typename T>
struct LossComponents {
  T cn_ce = T(0), dist = T(0), idc = T(0), margin = T(0);
};

// ---------------------------------------------------------------------------
// Cosine-normalized cross-entropy.
// ---------------------------------------------------------------------------
template <typename T>
T cn_ce_loss(const Tensor<T>& features, const std::vector<int>& labels,
             const ClassEmbeddingBank<T>& bank) {
  HeadContext<T> ctx;
  Tensor<T> logits = head_logits(features, bank, &ctx);
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.ptr() + b * K;
    double mx = double(row[0]);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, double(row[k]));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(double(row[k]) - mx);
    total += std::log(z) + mx - double(row[std::size_t(labels[b])]);
  }
  return T(total / double(B));
}

// Accumulates weight * d(loss)/d(features) into dfeatures and, when
// param_grads is set, the head gradients into the bank.  The returned loss
// value is unweighted.
template <typename T>
T cn_ce_loss_grad(const Tensor<T>& features, const std::vector<int>& labels,
                  ClassEmbeddingBank<T>& bank, Tensor<T>& dfeatures,
                  bool param_grads, T weight = T(1)) {
  HeadContext<T> ctx;
  Tensor<T> logits = head_logits(features, bank, &ctx);
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  Tensor<T> dlogits({B, K});
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = logits.ptr() + b * K;
    double mx = double(row[0]);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, double(row[k]));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(double(row[k]) - mx);
    total += std::log(z) + mx - double(row[std::size_t(labels[b])]);
    for (std::size_t k = 0; k < K; ++k) {
      double p = std::exp(double(row[k]) - mx) / z;
      dlogits[b * K + k] =
          weight * T((p - (int(k) == labels[b] ? 1.0 : 0.0)) / double(B));
    }
  }
  Tensor<T> df = head_backward(dlogits, ctx, bank, param_grads);
  for (std::size_t i = 0; i < df.numel(); ++i) dfeatures[i] += df[i];
  return T(total / double(B));
}

// ---------------------------------------------------------------------------
// Margin loss against the new classes.  Raw cosines, no temperature.
// ---------------------------------------------------------------------------
template <typename T>
T margin_loss_impl(const Tensor<T>& features, const std::vector<int>& true_ids,
                   ClassEmbeddingBank<T>* mutable_bank,
                   const ClassEmbeddingBank<T>& bank,
                   const std::vector<int>& new_class_ids, T m,
                   Tensor<T>* dfeatures, bool param_grads, T weight = T(1)) {
  const std::size_t B = features.dim(0), F = features.dim(1);
  const std::size_t K = bank.num_classes();
  if (new_class_ids.empty()) {
    warn("margin loss with empty negative set; returning 0");
    return T(0);
  }
  Tensor<T> fbar({B, F}), ebar({K, F});
  std::vector<T> fn = normalize_rows(features.ptr(), B, F, fbar.ptr());
  std::vector<T> en = normalize_rows(bank.embeddings.data(), K, F, ebar.ptr());

  Tensor<T> dfbar({B, F}, T(0));
  Tensor<T> debar({K, F}, T(0));
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t t = std::size_t(true_ids[b]);
    double s_true = 0.0;
    for (std::size_t j = 0; j < F; ++j)
      s_true += double(fbar[b * F + j]) * double(ebar[t * F + j]);
    for (int kn : new_class_ids) {
      const std::size_t k = std::size_t(kn);
      double s_k = 0.0;
      for (std::size_t j = 0; j < F; ++j)
        s_k += double(fbar[b * F + j]) * double(ebar[k * F + j]);
      const double h = double(m) - s_true + s_k;
      if (h <= 0.0) continue;
      total += h;
      if (!dfeatures) continue;
      const T g = weight / T(B);
      for (std::size_t j = 0; j < F; ++j) {
        dfbar[b * F + j] += g * (ebar[k * F + j] - ebar[t * F + j]);
        debar[k * F + j] += g * fbar[b * F + j];
        debar[t * F + j] -= g * fbar[b * F + j];
      }
    }
  }
  if (dfeatures) {
    Tensor<T> df({B, F});
    normalize_rows_backward(dfbar.ptr(), fbar.ptr(), fn, B, F, df.ptr());
    for (std::size_t i = 0; i < B * F; ++i) (*dfeatures)[i] += df[i];
    if (param_grads && mutable_bank) {
      Tensor<T> de({K, F});
      normalize_rows_backward(debar.ptr(), ebar.ptr(), en, K, F, de.ptr());
      for (std::size_t i = 0; i < K * F; ++i)
        mutable_bank->d_embeddings[i] += de[i];
    }
  }
  return T(total / double(B));
}

template <typename T>
T margin_loss(const Tensor<T>& features, const std::vector<int>& true_ids,
              const ClassEmbeddingBank<T>& bank,
              const std::vector<int>& new_class_ids, T m) {
  return margin_loss_impl<T>(features, true_ids, nullptr, bank, new_class_ids,
                             m, nullptr, false);
}

template <typename T>
T margin_loss_grad(const Tensor<T>& features, const std::vector<int>& true_ids,
                   ClassEmbeddingBank<T>& bank,
                   const std::vector<int>& new_class_ids, T m,
                   Tensor<T>& dfeatures, bool param_grads, T weight = T(1)) {
  return margin_loss_impl<T>(features, true_ids, &bank, bank, new_class_ids, m,
                             &dfeatures, param_grads, weight);
}

// ---------------------------------------------------------------------------
// Per-class centroids (mean then unit-normalized), with the backward context
// needed to push centroid gradients back to member features.
// ---------------------------------------------------------------------------
template <typename T>
struct CentroidSet {
  std::map<int, std::vector<T>> centroids;  // class -> unit vector [F]
  std::string domain_tag;                   // "source" | "target"
  std::size_t feat_dim = 0;

  bool covers(const std::vector<int>& class_set) const {
    for (int k : class_set)
      if (!centroids.count(k)) return false;
    return true;
  }
};

template <typename T>
struct CentroidContext {
  std::map<int, std::vector<std::size_t>> members;
  std::map<int, std::vector<T>> mean_raw;  // pre-normalization means
  std::map<int, T> norm;
};

template <typename T>
CentroidSet<T> class_centroids(const Tensor<T>& features,
                               const std::vector<int>& labels,
                               const std::vector<int>& covered_classes,
                               const std::string& domain_tag,
                               CentroidContext<T>* ctx = nullptr) {
  const std::size_t N = features.dim(0), F = features.dim(1);
  CentroidSet<T> set;
  set.domain_tag = domain_tag;
  set.feat_dim = F;
  for (int cls : covered_classes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < N; ++i)
      if (labels[i] == cls) members.push_back(i);
    if (members.empty()) {
      warn("centroid class " + std::to_string(cls) + " has no samples; excluded");
      continue;
    }
    std::vector<T> mean(F, T(0));
    for (std::size_t i : members)
      for (std::size_t j = 0; j < F; ++j)
        mean[j] += features[i * F + j] / T(members.size());
    double nsq = 0.0;
    for (T v : mean) nsq += double(v) * double(v);
    const T nrm = T(std::sqrt(nsq));
    if (double(nrm) < 1e-8) {
      warn("centroid class " + std::to_string(cls) +
           " has near-zero mean feature; excluded");
      continue;
    }
    std::vector<T> unit(F);
    for (std::size_t j = 0; j < F; ++j) unit[j] = mean[j] / (nrm + T(kNormEps));
    set.centroids[cls] = std::move(unit);
    if (ctx) {
      ctx->members[cls] = std::move(members);
      ctx->mean_raw[cls] = std::move(mean);
      ctx->norm[cls] = nrm;
    }
  }
  return set;
}

// Chains d(loss)/d(unit centroid) back into member feature gradients.
template <typename T>
void centroid_set_backward(const std::map<int, std::vector<T>>& dcentroids,
                           const CentroidSet<T>& set,
                           const CentroidContext<T>& ctx,
                           Tensor<T>& dfeatures) {
  const std::size_t F = set.feat_dim;
  for (const auto& [cls, dcbar] : dcentroids) {
    auto cit = set.centroids.find(cls);
    if (cit == set.centroids.end()) continue;
    const std::vector<T>& cbar = cit->second;
    const T nrm = ctx.norm.at(cls);
    double dot = 0.0;
    for (std::size_t j = 0; j < F; ++j)
      dot += double(cbar[j]) * double(dcbar[j]);
    const auto& members = ctx.members.at(cls);
    const T inv = T(1) / ((nrm + T(kNormEps)) * T(members.size()));
    for (std::size_t i : members)
      for (std::size_t j = 0; j < F; ++j)
        dfeatures[i * F + j] += (dcbar[j] - cbar[j] * T(dot)) * inv;
  }
}

// ---------------------------------------------------------------------------
// Pseudo-labels: argmax over cosine logits of seen classes.
// ---------------------------------------------------------------------------
template <typename T>
std::vector<int> pseudo_labels(const Tensor<T>& features,
                               const ClassEmbeddingBank<T>& bank) {
  Tensor<T> logits = cosine_logits(features, bank);
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[b * K + k] > logits[b * K + best]) best = k;
    out[b] = int(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Intra-domain contrastive loss over centroid pairs.
// ---------------------------------------------------------------------------
template <typename T>
T idc_loss_impl(const CentroidSet<T>& source, const CentroidSet<T>& target,
                T tau, const std::vector<int>& class_set,
                std::map<int, std::vector<T>>* dsource,
                std::map<int, std::vector<T>>* dtarget, T weight = T(1)) {
  if (class_set.empty()) throw CoverageError("idc class set is empty");
  if (!source.covers(class_set))
    throw CoverageError("source centroids do not cover the class set");
  if (!target.covers(class_set))
    throw CoverageError("target centroids do not cover the class set");
  const std::size_t F = source.feat_dim;

  auto dot = [F](const std::vector<T>& a, const std::vector<T>& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < F; ++j) s += double(a[j]) * double(b[j]);
    return s;
  };
  auto axpy = [F](std::map<int, std::vector<T>>& m, int cls, double a,
                  const std::vector<T>& v) {
    auto& row = m[cls];
    if (row.empty()) row.assign(F, T(0));
    for (std::size_t j = 0; j < F; ++j) row[j] += T(a) * v[j];
  };

  double total = 0.0;
  for (int k : class_set) {
    const auto& cs_k = source.centroids.at(k);
    const auto& ct_k = target.centroids.at(k);
    // entries: index 0 = positive; then (j, S) and (j, T) for j != k
    std::vector<double> z;
    std::vector<std::pair<int, int>> who;  // (class, 0=S/1=T)
    z.push_back(double(tau) * dot(cs_k, ct_k));
    who.push_back({k, 0});
    for (int j : class_set) {
      if (j == k) continue;
      z.push_back(double(tau) * dot(source.centroids.at(j), ct_k));
      who.push_back({j, 0});
      z.push_back(double(tau) * dot(target.centroids.at(j), ct_k));
      who.push_back({j, 1});
    }
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - mx);
    const double log_p0 = z[0] - mx - std::log(denom);
    total -= log_p0;

    if (dsource && dtarget) {
      const double scale = double(weight) / double(class_set.size());
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = std::exp(z[i] - mx) / denom;
        const double dz = scale * (p - (i == 0 ? 1.0 : 0.0));
        const double g = dz * double(tau);
        const auto [cls, dom] = who[i];
        const auto& other =
            dom == 0 ? source.centroids.at(cls) : target.centroids.at(cls);
        // z_i = tau * <other, ct_k>
        axpy(*dtarget, k, g, other);
        if (dom == 0)
          axpy(*dsource, cls, g, ct_k);
        else
          axpy(*dtarget, cls, g, ct_k);
      }
    }
  }
  return T(total / double(class_set.size()));
}

template <typename T>
T idc_loss(const CentroidSet<T>& source, const CentroidSet<T>& target, T tau,
           const std::vector<int>& class_set) {
  return idc_loss_impl<T>(source, target, tau, class_set, nullptr, nullptr);
}

template <typename T>
T idc_loss_grad(const CentroidSet<T>& source, const CentroidSet<T>& target,
                T tau, const std::vector<int>& class_set,
                std::map<int, std::vector<T>>& dsource,
                std::map<int, std::vector<T>>& dtarget, T weight = T(1)) {
  return idc_loss_impl<T>(source, target, tau, class_set, &dsource, &dtarget,
                          weight);
}

// ---------------------------------------------------------------------------
// Feature distillation: 1 - cosine(old, new), per sample.
// ---------------------------------------------------------------------------
template <typename T>
T distillation_loss(const Tensor<T>& old_features,
                    const Tensor<T>& new_features) {
  if (!old_features.same_shape(new_features))
    throw ShapeError("distillation feature shapes differ");
  const std::size_t B = old_features.dim(0), F = old_features.dim(1);
  Tensor<T> obar({B, F}), nbar({B, F});
  normalize_rows(old_features.ptr(), B, F, obar.ptr());
  normalize_rows(new_features.ptr(), B, F, nbar.ptr());
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t j = 0; j < F; ++j)
      s += double(obar[b * F + j]) * double(nbar[b * F + j]);
    total += 1.0 - s;
  }
  return T(total / double(B));
}

// Gradient w.r.t. the new features only (old model is frozen).
template <typename T>
T distillation_loss_grad(const Tensor<T>& old_features,
                         const Tensor<T>& new_features, Tensor<T>& dnew,
                         T weight = T(1)) {
  if (!old_features.same_shape(new_features))
    throw ShapeError("distillation feature shapes differ");
  const std::size_t B = old_features.dim(0), F = old_features.dim(1);
  Tensor<T> obar({B, F}), nbar({B, F});
  normalize_rows(old_features.ptr(), B, F, obar.ptr());
  std::vector<T> nn = normalize_rows(new_features.ptr(), B, F, nbar.ptr());
  Tensor<T> dnbar({B, F});
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (std::size_t j = 0; j < F; ++j) {
      s += double(obar[b * F + j]) * double(nbar[b * F + j]);
      dnbar[b * F + j] = -weight * obar[b * F + j] / T(B);
    }
    total += 1.0 - s;
  }
  Tensor<T> dn({B, F});
  normalize_rows_backward(dnbar.ptr(), nbar.ptr(), nn, B, F, dn.ptr());
  for (std::size_t i = 0; i < B * F; ++i) dnew[i] += dn[i];
  return T(total / double(B));
}

// ---------------------------------------------------------------------------
// Weighted total.
// ---------------------------------------------------------------------------
template <typename T>
T total_loss(const LossComponents<T>& c, const LossWeights<T>& w) {
  auto check = [](T v, const char* name) {
    if (!std::isfinite(double(v)))
      throw NumericError(std::string("non-finite loss component: ") + name);
  };
  check(c.cn_ce, "cn_ce");
  check(c.dist, "dist");
  check(c.idc, "idc");
  check(c.margin, "margin");
  return c.cn_ce + w.alpha_dist * c.dist + w.alpha_idc * c.idc +
         w.alpha_margin * c.margin;
}

}  // namespace ccsi
