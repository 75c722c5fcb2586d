#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ccsi/ccsi.hpp"

namespace th {

// Captures stderr for the lifetime of the object so tests can assert on
// warning text without polluting the test log.
class CaptureStderr {
 public:
  CaptureStderr() : old_(std::cerr.rdbuf(buffer_.rdbuf())) {}
  ~CaptureStderr() { std::cerr.rdbuf(old_); }
  std::string text() const { return buffer_.str(); }

 private:
  std::ostringstream buffer_;
  std::streambuf* old_;
};

inline double rel_err(double got, double want) {
  const double denom = std::max({std::abs(got), std::abs(want), 1e-8});
  return std::abs(got - want) / denom;
}

// Toy dataset: grayscale images where class k lights up quadrant k (mod 4)
// with intensity band k/4. Linearly separable, trains in a few epochs.
template <typename T>
ccsi::LabeledImageSet<T> quadrant_set(int classes, int per_class,
                                      std::size_t hw, std::uint64_t seed,
                                      std::size_t channels = 1) {
  ccsi::Rng rng(seed);
  ccsi::LabeledImageSet<T> set;
  const std::size_t n = std::size_t(classes) * std::size_t(per_class);
  set.images = ccsi::Tensor<T>({n, hw, hw, channels});
  set.labels.resize(n);
  set.num_classes = classes;
  std::size_t i = 0;
  for (int c = 0; c < classes; ++c) {
    for (int s = 0; s < per_class; ++s, ++i) {
      set.labels[i] = c;
      T* img = set.image_ptr(i);
      const int quad = c % 4;
      const double hi = 0.55 + 0.12 * double(c / 4);
      const std::size_t half = hw / 2;
      for (std::size_t y = 0; y < hw; ++y)
        for (std::size_t x = 0; x < hw; ++x) {
          const bool top = y < half, left = x < half;
          int q = top ? (left ? 0 : 1) : (left ? 2 : 3);
          double v = (q == quad) ? hi : 0.15;
          v += 0.03 * rng.normal();
          for (std::size_t ch = 0; ch < channels; ++ch)
            img[(y * hw + x) * channels + ch] =
                T(std::min(1.0, std::max(0.0, v)));
        }
    }
  }
  return set;
}

template <typename T>
ccsi::DatasetBundle<T> quadrant_bundle(int classes, int train_pc, int val_pc,
                                       int test_pc, std::size_t hw,
                                       std::uint64_t seed) {
  ccsi::DatasetBundle<T> b;
  b.train = quadrant_set<T>(classes, train_pc, hw, seed);
  b.val = quadrant_set<T>(classes, val_pc, hw, seed + 1);
  b.test = quadrant_set<T>(classes, test_pc, hw, seed + 2);
  b.train.split_tag = ccsi::SplitTag::Train;
  b.val.split_tag = ccsi::SplitTag::Val;
  b.test.split_tag = ccsi::SplitTag::Test;
  return b;
}

// Unique scratch directory under the build tree; removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& stem) {
    namespace fs = std::filesystem;
    path_ = fs::temp_directory_path() / ("ccsi_test_" + stem + "_" +
                                         std::to_string(counter()++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string str() const { return path_.string(); }
  std::filesystem::path path() const { return path_; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace th
