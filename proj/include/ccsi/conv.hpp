#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <vector>

#include "ccsi/common.hpp"
#include "ccsi/serialize.hpp"
#include "ccsi/tensor.hpp"

namespace ccsi {

namespace detail {
template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic,
                                                   Eigen::Dynamic,
                                                   Eigen::RowMajor>>;
}  // namespace detail

// ---------------------------------------------------------------------------
// 2-D convolution on [B,C,D] activations (D = H*W), im2col + GEMM.
// ---------------------------------------------------------------------------
template <typename T>
class Conv2d {
 public:
  std::size_t in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
  std::vector<T> weight;  // [out_c, in_c*k*k] row-major
  std::vector<T> bias;    // [out_c], optional
  bool has_bias = false;
  std::vector<T> d_weight, d_bias;

  Conv2d() = default;
  Conv2d(std::size_t ic, std::size_t oc, std::size_t kernel, std::size_t s,
         std::size_t p, bool with_bias, Rng& rng)
      : in_c(ic), out_c(oc), k(kernel), stride(s), pad(p), has_bias(with_bias) {
    weight.resize(out_c * in_c * k * k);
    const double std = std::sqrt(2.0 / double(in_c * k * k));
    for (T& w : weight) w = T(std * rng.normal());
    if (has_bias) bias.assign(out_c, T(0));
    zero_grad();
  }

  void zero_grad() {
    d_weight.assign(weight.size(), T(0));
    if (has_bias) d_bias.assign(out_c, T(0));
  }

  std::size_t out_dim(std::size_t in) const {
    return (in + 2 * pad - k) / stride + 1;
  }

  Tensor<T> forward(const Tensor<T>& x, std::size_t h, std::size_t w) {
    const std::size_t B = x.dim(0);
    if (x.dim(1) != in_c) throw ShapeError("conv input channel mismatch");
    h_ = h;
    w_ = w;
    ho_ = out_dim(h);
    wo_ = out_dim(w);
    B_ = B;
    const std::size_t kk = in_c * k * k, dout = ho_ * wo_;

    col_.assign(kk * B * dout, T(0));
    for (std::size_t b = 0; b < B; ++b) im2col(x.ptr() + b * in_c * h * w, b);

    Tensor<T> y({B, out_c, dout});
    // [out_c, kk] x [kk, B*dout]
    detail::ConstMatMap<T> Wm(weight.data(), long(out_c), long(kk));
    detail::ConstMatMap<T> Cm(col_.data(), long(kk), long(B * dout));
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> Y =
        Wm * Cm;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < out_c; ++c) {
        T* yp = y.ptr() + (b * out_c + c) * dout;
        const T bv = has_bias ? bias[c] : T(0);
        for (std::size_t d = 0; d < dout; ++d)
          yp[d] = Y(long(c), long(b * dout + d)) + bv;
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy, bool param_grads) {
    const std::size_t B = B_, kk = in_c * k * k, dout = ho_ * wo_;
    // reorder gy to [out_c, B*dout]
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> Gy(
        long(out_c), long(B * dout));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < out_c; ++c) {
        const T* gp = gy.ptr() + (b * out_c + c) * dout;
        for (std::size_t d = 0; d < dout; ++d)
          Gy(long(c), long(b * dout + d)) = gp[d];
      }

    if (param_grads) {
      detail::ConstMatMap<T> Cm(col_.data(), long(kk), long(B * dout));
      detail::MatMap<T> dW(d_weight.data(), long(out_c), long(kk));
      dW.noalias() += Gy * Cm.transpose();
      if (has_bias)
        for (std::size_t c = 0; c < out_c; ++c)
          d_bias[c] += Gy.row(long(c)).sum();
    }

    detail::ConstMatMap<T> Wm(weight.data(), long(out_c), long(kk));
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dcol =
        Wm.transpose() * Gy;

    Tensor<T> dx({B, in_c, h_ * w_});
    for (std::size_t b = 0; b < B; ++b)
      col2im(dcol, b, dx.ptr() + b * in_c * h_ * w_);
    return dx;
  }

  void save(BinaryWriter& bw) const {
    bw.u32(std::uint32_t(in_c));
    bw.u32(std::uint32_t(out_c));
    bw.u32(std::uint32_t(k));
    bw.u32(std::uint32_t(stride));
    bw.u32(std::uint32_t(pad));
    bw.u8(has_bias ? 1 : 0);
    for (T v : weight) bw.f64(double(v));
    for (T v : bias) bw.f64(double(v));
  }

  void load(BinaryReader& br) {
    in_c = br.u32();
    out_c = br.u32();
    k = br.u32();
    stride = br.u32();
    pad = br.u32();
    has_bias = br.u8() != 0;
    weight.resize(out_c * in_c * k * k);
    for (T& v : weight) v = T(br.f64());
    bias.assign(has_bias ? out_c : 0, T(0));
    for (T& v : bias) v = T(br.f64());
    zero_grad();
  }

 private:
  void im2col(const T* x, std::size_t b) {
    const std::size_t kk = in_c * k * k, dout = ho_ * wo_;
    for (std::size_t c = 0; c < in_c; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t row = (c * k + ky) * k + kx;
          T* dst = col_.data() + row * B_ * dout + b * dout;
          for (std::size_t oy = 0; oy < ho_; ++oy) {
            const long iy = long(oy * stride + ky) - long(pad);
            if (iy < 0 || iy >= long(h_)) continue;
            for (std::size_t ox = 0; ox < wo_; ++ox) {
              const long ix = long(ox * stride + kx) - long(pad);
              if (ix < 0 || ix >= long(w_)) continue;
              dst[oy * wo_ + ox] = x[c * h_ * w_ + std::size_t(iy) * w_ +
                                     std::size_t(ix)];
            }
          }
        }
  }

  template <typename M>
  void col2im(const M& dcol, std::size_t b, T* dx) {
    const std::size_t dout = ho_ * wo_;
    std::fill(dx, dx + in_c * h_ * w_, T(0));
    for (std::size_t c = 0; c < in_c; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t row = (c * k + ky) * k + kx;
          for (std::size_t oy = 0; oy < ho_; ++oy) {
            const long iy = long(oy * stride + ky) - long(pad);
            if (iy < 0 || iy >= long(h_)) continue;
            for (std::size_t ox = 0; ox < wo_; ++ox) {
              const long ix = long(ox * stride + kx) - long(pad);
              if (ix < 0 || ix >= long(w_)) continue;
              dx[c * h_ * w_ + std::size_t(iy) * w_ + std::size_t(ix)] +=
                  dcol(long(row), long(b * dout + oy * wo_ + ox));
            }
          }
        }
  }

  std::size_t h_ = 0, w_ = 0, ho_ = 0, wo_ = 0, B_ = 0;
  std::vector<T> col_;  // [in_c*k*k, B*ho*wo]
};

// ---------------------------------------------------------------------------
// ReLU with stored activation mask.
// ---------------------------------------------------------------------------
template <typename T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    y_ = x;
    for (T& v : y_.data) v = v > T(0) ? v : T(0);
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& gy) const {
    Tensor<T> dx(gy.shape);
    for (std::size_t i = 0; i < gy.numel(); ++i)
      dx[i] = y_[i] > T(0) ? gy[i] : T(0);
    return dx;
  }

 private:
  Tensor<T> y_;
};

// ---------------------------------------------------------------------------
// Global average pooling: [B,C,D] -> [B,C].
// ---------------------------------------------------------------------------
template <typename T>
class GlobalAvgPool {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    B_ = x.dim(0);
    C_ = x.dim(1);
    D_ = x.dim(2);
    Tensor<T> y({B_, C_});
    for (std::size_t b = 0; b < B_; ++b)
      for (std::size_t c = 0; c < C_; ++c) {
        double s = 0.0;
        const T* p = x.ptr() + (b * C_ + c) * D_;
        for (std::size_t d = 0; d < D_; ++d) s += double(p[d]);
        y[b * C_ + c] = T(s / double(D_));
      }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) const {
    Tensor<T> dx({B_, C_, D_});
    for (std::size_t b = 0; b < B_; ++b)
      for (std::size_t c = 0; c < C_; ++c) {
        const T g = gy[b * C_ + c] / T(D_);
        T* p = dx.ptr() + (b * C_ + c) * D_;
        for (std::size_t d = 0; d < D_; ++d) p[d] = g;
      }
    return dx;
  }

 private:
  std::size_t B_ = 0, C_ = 0, D_ = 0;
};

}  // namespace ccsi
