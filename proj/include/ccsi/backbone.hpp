#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ccsi/classifier.hpp"
#include "ccsi/common.hpp"
#include "ccsi/continual_norm.hpp"
#include "ccsi/conv.hpp"
#include "ccsi/dataset.hpp"
#include "ccsi/serialize.hpp"
#include "ccsi/tensor.hpp"

namespace ccsi {

template <typename T>
struct BackboneConfig {
  std::size_t in_channels = 3;
  std::array<std::size_t, 3> widths = {32, 64, 128};
  bool use_gn = true;  // false = plain BN everywhere (ablation)

  std::size_t feat_dim() const { return widths[2]; }
};

// ReLU maps NaN and -inf to zero, so finiteness has to be probed on the
// pre-activation tensors or a poisoned batch sails through silently.
template <typename T>
void ensure_finite(const Tensor<T>& t, const std::string& where) {
  if (!all_finite(t.ptr(), t.numel()))
    throw NumericError("non-finite activations at " + where);
}

// ---------------------------------------------------------------------------
// Residual block: conv-CN-relu-conv-CN plus (projected) skip, output relu.
// ---------------------------------------------------------------------------
template <typename T>
struct ResidualBlock {
  Conv2d<T> conv1, conv2;
  ContinualNorm<T> norm1, norm2;
  ReLU<T> relu_mid, relu_out;
  bool has_proj = false;
  Conv2d<T> proj;
  ContinualNorm<T> norm_proj;

  ResidualBlock() = default;
  ResidualBlock(std::size_t in_c, std::size_t out_c, std::size_t stride,
                bool use_gn, Rng& rng)
      : conv1(in_c, out_c, 3, stride, 1, false, rng),
        conv2(out_c, out_c, 3, 1, 1, false, rng),
        norm1(out_c, default_group_count(out_c), use_gn),
        norm2(out_c, default_group_count(out_c), use_gn),
        has_proj(stride != 1 || in_c != out_c) {
    if (has_proj) {
      proj = Conv2d<T>(in_c, out_c, 1, stride, 0, false, rng);
      norm_proj = ContinualNorm<T>(out_c, default_group_count(out_c), use_gn);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, std::size_t h, std::size_t w,
                    std::size_t& ho, std::size_t& wo, Mode mode,
                    bool capture, const std::string& stage) {
    Tensor<T> a = conv1.forward(x, h, w);
    ho = conv1.out_dim(h);
    wo = conv1.out_dim(w);
    Tensor<T> n1 = norm1.forward(a, mode, capture);
    ensure_finite(n1, stage);
    Tensor<T> r = relu_mid.forward(n1);
    Tensor<T> b2 = conv2.forward(r, ho, wo);
    Tensor<T> n2 = norm2.forward(b2, mode, capture);

    Tensor<T> skip;
    if (has_proj) {
      Tensor<T> p = proj.forward(x, h, w);
      skip = norm_proj.forward(p, mode, capture);
    } else {
      skip = x;
    }
    for (std::size_t i = 0; i < n2.numel(); ++i) n2[i] += skip[i];
    ensure_finite(n2, stage);
    return relu_out.forward(n2);
  }

  Tensor<T> backward(const Tensor<T>& gy, bool param_grads,
                     const RcnGrad<T>* rcn1, const RcnGrad<T>* rcn2,
                     const RcnGrad<T>* rcn_proj) {
    Tensor<T> gs = relu_out.backward(gy);
    Tensor<T> gb2 = norm2.backward(gs, rcn2, param_grads);
    Tensor<T> gr = conv2.backward(gb2, param_grads);
    Tensor<T> gn1 = relu_mid.backward(gr);
    Tensor<T> ga = norm1.backward(gn1, rcn1, param_grads);
    Tensor<T> gx = conv1.backward(ga, param_grads);
    if (has_proj) {
      Tensor<T> gp = norm_proj.backward(gs, rcn_proj, param_grads);
      Tensor<T> gpx = proj.backward(gp, param_grads);
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gpx[i];
    } else {
      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gs[i];
    }
    return gx;
  }
};

// ---------------------------------------------------------------------------
// Feature extractor: stem conv + three residual blocks + global pooling.
// ---------------------------------------------------------------------------
template <typename T>
class FeatureExtractor {
 public:
  BackboneConfig<T> config;
  Conv2d<T> stem;
  ContinualNorm<T> stem_norm;
  ReLU<T> stem_relu;
  std::vector<ResidualBlock<T>> blocks;
  GlobalAvgPool<T> pool;

  FeatureExtractor() = default;
  FeatureExtractor(const BackboneConfig<T>& cfg, Rng& rng)
      : config(cfg),
        stem(cfg.in_channels, cfg.widths[0], 3, 1, 1, false, rng),
        stem_norm(cfg.widths[0], default_group_count(cfg.widths[0]),
                  cfg.use_gn) {
    blocks.emplace_back(cfg.widths[0], cfg.widths[0], 1, cfg.use_gn, rng);
    blocks.emplace_back(cfg.widths[0], cfg.widths[1], 2, cfg.use_gn, rng);
    blocks.emplace_back(cfg.widths[1], cfg.widths[2], 2, cfg.use_gn, rng);
  }

  std::size_t feat_dim() const { return config.feat_dim(); }

  std::vector<ContinualNorm<T>*> cn_layers() {
    std::vector<ContinualNorm<T>*> out = {&stem_norm};
    for (auto& b : blocks) {
      out.push_back(&b.norm1);
      out.push_back(&b.norm2);
      if (b.has_proj) out.push_back(&b.norm_proj);
    }
    return out;
  }
  std::vector<const ContinualNorm<T>*> cn_layers() const {
    auto mut = const_cast<FeatureExtractor*>(this)->cn_layers();
    return {mut.begin(), mut.end()};
  }

  // x is [B,C,D] with D = h*w.
  Tensor<T> forward(const Tensor<T>& x, std::size_t h, std::size_t w,
                    Mode mode, bool capture = false) {
    if (h < 8 || w < 8) throw ShapeError("input spatial size must be >= 8x8");
    if (x.dim(1) != config.in_channels)
      throw ShapeError("input channel mismatch");
    Tensor<T> a = stem.forward(x, h, w);
    Tensor<T> n = stem_norm.forward(a, mode, capture);
    ensure_finite(n, "stem");
    Tensor<T> cur = stem_relu.forward(n);
    std::size_t ch = h, cw = w;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      std::size_t ho = 0, wo = 0;
      cur = blocks[i].forward(cur, ch, cw, ho, wo, mode, capture,
                              "block" + std::to_string(i + 1));
      ch = ho;
      cw = wo;
    }
    Tensor<T> f = pool.forward(cur);
    ensure_finite(f, "features");
    return f;
  }

  // gf is [B,F]; rcn (optional) aligns with cn_layers() ordering.
  Tensor<T> backward(const Tensor<T>& gf, bool param_grads,
                     const std::vector<RcnGrad<T>>* rcn = nullptr) {
    std::size_t slot = rcn ? rcn->size() : 0;
    auto take = [&]() -> const RcnGrad<T>* {
      if (!rcn) return nullptr;
      return &(*rcn)[--slot];
    };
    // cn_layers() order is stem, then per block norm1, norm2, [proj];
    // walk backwards.
    Tensor<T> g = pool.backward(gf);
    for (std::size_t i = blocks.size(); i-- > 0;) {
      auto& b = blocks[i];
      const RcnGrad<T>* rproj = b.has_proj ? take() : nullptr;
      const RcnGrad<T>* r2 = take();
      const RcnGrad<T>* r1 = take();
      g = b.backward(g, param_grads, r1, r2, rproj);
    }
    Tensor<T> gn = stem_relu.backward(g);
    Tensor<T> ga = stem_norm.backward(gn, take(), param_grads);
    return stem.backward(ga, param_grads);
  }

  void zero_grad() {
    stem.zero_grad();
    stem_norm.zero_grad();
    for (auto& b : blocks) {
      b.conv1.zero_grad();
      b.conv2.zero_grad();
      b.norm1.zero_grad();
      b.norm2.zero_grad();
      if (b.has_proj) {
        b.proj.zero_grad();
        b.norm_proj.zero_grad();
      }
    }
  }

  // Visits every learnable array as (value pointer, grad pointer, length).
  void for_each_param(
      const std::function<void(T*, T*, std::size_t)>& fn) {
    auto conv = [&](Conv2d<T>& c) {
      fn(c.weight.data(), c.d_weight.data(), c.weight.size());
      if (c.has_bias) fn(c.bias.data(), c.d_bias.data(), c.bias.size());
    };
    auto norm = [&](ContinualNorm<T>& n) {
      fn(n.state.affine_scale.data(), n.d_scale.data(), n.state.C);
      fn(n.state.affine_shift.data(), n.d_shift.data(), n.state.C);
    };
    conv(stem);
    norm(stem_norm);
    for (auto& b : blocks) {
      conv(b.conv1);
      norm(b.norm1);
      conv(b.conv2);
      norm(b.norm2);
      if (b.has_proj) {
        conv(b.proj);
        norm(b.norm_proj);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Full model: extractor + growable head.
// ---------------------------------------------------------------------------
template <typename T>
struct Model {
  FeatureExtractor<T> extractor;
  ClassEmbeddingBank<T> bank;
  bool frozen = false;

  Model() = default;
  Model(const BackboneConfig<T>& cfg, Rng& rng, bool softmax_head = false)
      : extractor(cfg, rng), bank(cfg.feat_dim(), softmax_head) {}

  Tensor<T> forward_features(const Tensor<T>& x_bcd, std::size_t h,
                             std::size_t w, Mode mode, bool capture = false) {
    if (frozen) mode = Mode::Eval;
    return extractor.forward(x_bcd, h, w, mode, capture);
  }

  // Convenience path from [N,H,W,C] image stacks.
  Tensor<T> forward_features_nhwc(const Tensor<T>& images, Mode mode) {
    Tensor<T> bcd = nhwc_to_bcd(images);
    return forward_features(bcd, images.dim(1), images.dim(2), mode);
  }

  void zero_grad() {
    extractor.zero_grad();
    bank.zero_grad();
  }

  void save(const std::string& path) const {
    BinaryWriter bw(path);
    bw.magic("CCSICKPT");
    bw.u32(kVersionMajor);
    bw.u32(std::uint32_t(extractor.config.in_channels));
    for (std::size_t wdt : extractor.config.widths) bw.u32(std::uint32_t(wdt));
    bw.u8(extractor.config.use_gn ? 1 : 0);
    const_cast<FeatureExtractor<T>&>(extractor).for_each_param(
        [&](T* w, T*, std::size_t n) {
          for (std::size_t i = 0; i < n; ++i) bw.f64(double(w[i]));
        });
    // conv geometry is implied by config; norms carry running moments
    for (const ContinualNorm<T>* n : extractor.cn_layers()) n->state.save(bw);
    bank.save(bw);
    bw.close();
  }

  static Model load(const std::string& path) {
    BinaryReader br(path);
    br.expect_magic("CCSICKPT", "model checkpoint");
    if (br.u32() != kVersionMajor) throw LoadError("checkpoint version mismatch");
    BackboneConfig<T> cfg;
    cfg.in_channels = br.u32();
    for (auto& wdt : cfg.widths) wdt = br.u32();
    cfg.use_gn = br.u8() != 0;
    Rng rng(1);  // overwritten immediately
    Model m(cfg, rng);
    m.extractor.for_each_param([&](T* w, T*, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) w[i] = T(br.f64());
    });
    for (ContinualNorm<T>* n : m.extractor.cn_layers()) n->state.load(br);
    m.bank.load(br);
    return m;
  }
};

// Deep frozen copy: parameters fixed, normalization pinned to eval mode.
template <typename T>
Model<T> clone_frozen(const Model<T>& model) {
  Model<T> clone = model;
  clone.frozen = true;
  return clone;
}

template <typename T>
CNSnapshot<T> snapshot_moments(const Model<T>& model) {
  CNSnapshot<T> snap;
  for (const ContinualNorm<T>* layer : model.extractor.cn_layers()) {
    CNSnapshotLayer<T> l;
    l.gn_mean = layer->state.gn_running_mean;
    l.gn_var = layer->state.gn_running_var;
    l.bn_mean = layer->state.bn_running_mean;
    l.bn_var = layer->state.bn_running_var;
    snap.layers.push_back(std::move(l));
  }
  if (snap.layers.empty()) throw StructuralError("model has no CN layers");
  return snap;
}

}  // namespace ccsi
