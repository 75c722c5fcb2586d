#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ccsi/common.hpp"
#include "ccsi/image_io.hpp"
#include "ccsi/serialize.hpp"
#include "ccsi/tensor.hpp"

namespace ccsi {

enum class SplitTag : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline const char* split_name(SplitTag s) {
  switch (s) {
    case SplitTag::Train: return "train";
    case SplitTag::Val: return "val";
    default: return "test";
  }
}

inline SplitTag split_from_name(const std::string& s) {
  if (s == "train") return SplitTag::Train;
  if (s == "val") return SplitTag::Val;
  if (s == "test") return SplitTag::Test;
  throw SchemaError("unknown split name: " + s);
}

// ---------------------------------------------------------------------------
// LabeledImageSet: images [N,H,W,C] in [0,1], integer labels in {0..K-1}.
// ---------------------------------------------------------------------------
template <typename T = float>
struct LabeledImageSet {
  Tensor<T> images;  // [N, H, W, C]
  std::vector<int> labels;
  SplitTag split_tag = SplitTag::Train;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.shape.size() == 4 ? images.dim(1) : 0; }
  std::size_t width() const { return images.shape.size() == 4 ? images.dim(2) : 0; }
  std::size_t channels() const { return images.shape.size() == 4 ? images.dim(3) : 0; }
  std::size_t pixels_per_image() const { return height() * width() * channels(); }

  const T* image_ptr(std::size_t n) const {
    return images.ptr() + n * pixels_per_image();
  }
  T* image_ptr(std::size_t n) { return images.ptr() + n * pixels_per_image(); }

  void validate() const {
    if (images.shape.size() != 4) throw SchemaError("images must be [N,H,W,C]");
    if (images.dim(0) != labels.size())
      throw SchemaError("images/labels leading dimension mismatch");
    for (int y : labels)
      if (y < 0 || y >= num_classes)
        throw SchemaError("label " + std::to_string(y) +
                          " outside declared range [0," +
                          std::to_string(num_classes) + ")");
  }

  LabeledImageSet subset(const std::vector<std::size_t>& idx) const {
    LabeledImageSet out;
    out.split_tag = split_tag;
    out.num_classes = num_classes;
    out.images = Tensor<T>({idx.size(), height(), width(), channels()});
    out.labels.resize(idx.size());
    const std::size_t ppi = pixels_per_image();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy(image_ptr(idx[i]), image_ptr(idx[i]) + ppi,
                out.images.ptr() + i * ppi);
      out.labels[i] = labels[idx[i]];
    }
    return out;
  }

  // Appends another set with identical image geometry.
  void append(const LabeledImageSet& o) {
    if (size() == 0) {
      *this = o;
      return;
    }
    if (o.pixels_per_image() != pixels_per_image())
      throw ShapeError("append: image geometry mismatch");
    const std::size_t n0 = size();
    images.shape[0] = n0 + o.size();
    images.data.insert(images.data.end(), o.images.data.begin(),
                       o.images.data.end());
    labels.insert(labels.end(), o.labels.begin(), o.labels.end());
    num_classes = std::max(num_classes, o.num_classes);
  }
};

template <typename T = float>
struct DatasetBundle {
  LabeledImageSet<T> train, val, test;
  std::map<std::string, std::string> manifest;

  LabeledImageSet<T>& split(SplitTag s) {
    switch (s) {
      case SplitTag::Train: return train;
      case SplitTag::Val: return val;
      default: return test;
    }
  }
  const LabeledImageSet<T>& split(SplitTag s) const {
    return const_cast<DatasetBundle*>(this)->split(s);
  }
};

// ---------------------------------------------------------------------------
// Padding and intensity scaling.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> pad_and_scale(const std::vector<unsigned char>& u8,
                        std::size_t n, std::size_t h, std::size_t w,
                        std::size_t c, std::size_t pad_to) {
  const std::size_t oh = std::max(h, pad_to), ow = std::max(w, pad_to);
  const std::size_t top = (oh - h) / 2, left = (ow - w) / 2;
  Tensor<T> out({n, oh, ow, c});
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* src = u8.data() + i * h * w * c;
    T* dst = out.ptr() + i * oh * ow * c;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          dst[((y + top) * ow + (x + left)) * c + ch] =
              T(src[(y * w + x) * c + ch]) / T(255);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Packed archive.  Single file carrying all splits:
//   magic "CCSIPACK", version, N, H, W, C, num_classes,
//   manifest (key=value pairs), pixels u8 [N*H*W*C], labels u32 [N],
//   split ids u8 [N].
// ---------------------------------------------------------------------------
constexpr char kPackMagic[9] = "CCSIPACK";

template <typename T = float>
void save_pack(const std::string& path, const DatasetBundle<T>& bundle) {
  std::size_t n = 0, h = 0, w = 0, c = 0;
  int k = 0;
  for (SplitTag s : {SplitTag::Train, SplitTag::Val, SplitTag::Test}) {
    const auto& set = bundle.split(s);
    n += set.size();
    if (set.size()) {
      h = set.height();
      w = set.width();
      c = set.channels();
      k = std::max(k, set.num_classes);
    }
  }
  BinaryWriter bw(path);
  bw.magic(kPackMagic);
  bw.u32(1);
  bw.u32(std::uint32_t(n));
  bw.u32(std::uint32_t(h));
  bw.u32(std::uint32_t(w));
  bw.u32(std::uint32_t(c));
  bw.u32(std::uint32_t(k));
  bw.u32(std::uint32_t(bundle.manifest.size()));
  for (const auto& [key, val] : bundle.manifest) {
    bw.str(key);
    bw.str(val);
  }
  for (SplitTag s : {SplitTag::Train, SplitTag::Val, SplitTag::Test}) {
    const auto& set = bundle.split(s);
    for (std::size_t i = 0; i < set.size() * set.pixels_per_image(); ++i) {
      T v = set.images[i];
      v = std::min(T(1), std::max(T(0), v));
      bw.u8(std::uint8_t(std::lround(double(v) * 255.0)));
    }
  }
  for (SplitTag s : {SplitTag::Train, SplitTag::Val, SplitTag::Test})
    for (int y : bundle.split(s).labels) bw.u32(std::uint32_t(y));
  for (SplitTag s : {SplitTag::Train, SplitTag::Val, SplitTag::Test})
    for (std::size_t i = 0; i < bundle.split(s).size(); ++i)
      bw.u8(std::uint8_t(s));
  bw.close();
}

template <typename T = float>
DatasetBundle<T> load_pack(const std::string& path, std::size_t pad_to) {
  BinaryReader br(path);
  br.expect_magic(kPackMagic, "dataset pack");
  const std::uint32_t version = br.u32();
  if (version != 1) throw LoadError("unsupported pack version");
  const std::size_t n = br.u32(), h = br.u32(), w = br.u32(), c = br.u32();
  const int k = int(br.u32());
  if (c != 1 && c != 3) throw SchemaError("pack channel count must be 1 or 3");

  DatasetBundle<T> bundle;
  const std::uint32_t mcount = br.u32();
  for (std::uint32_t i = 0; i < mcount; ++i) {
    std::string key = br.str();
    bundle.manifest[key] = br.str();
  }

  std::vector<unsigned char> pixels(n * h * w * c);
  if (!pixels.empty()) br.bytes(pixels.data(), pixels.size());
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = int(br.u32());
    if (labels[i] < 0 || labels[i] >= k)
      throw SchemaError("label outside declared range in pack");
  }
  std::vector<std::uint8_t> splits(n);
  for (std::size_t i = 0; i < n; ++i) {
    splits[i] = br.u8();
    if (splits[i] > 2) throw SchemaError("bad split id in pack");
  }

  Tensor<T> all = pad_and_scale<T>(pixels, n, h, w, c, pad_to);
  const std::size_t ppi = all.numel() / std::max<std::size_t>(n, 1);
  const std::size_t oh = std::max(h, pad_to), ow = std::max(w, pad_to);

  for (SplitTag s : {SplitTag::Train, SplitTag::Val, SplitTag::Test}) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (splits[i] == std::uint8_t(s)) ++count;
    auto& set = bundle.split(s);
    set.split_tag = s;
    set.num_classes = k;
    set.images = Tensor<T>({count, oh, ow, c});
    set.labels.reserve(count);
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (splits[i] != std::uint8_t(s)) continue;
      std::copy(all.ptr() + i * ppi, all.ptr() + (i + 1) * ppi,
                set.images.ptr() + j * ppi);
      set.labels.push_back(labels[i]);
      ++j;
    }
    set.validate();
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Directory tree loader: <split>/<class_id>/*.png
// ---------------------------------------------------------------------------
template <typename T = float>
DatasetBundle<T> load_dir_tree(const std::string& root, std::size_t pad_to) {
  namespace fs = std::filesystem;
  DatasetBundle<T> bundle;
  int max_label = -1;

  struct Entry {
    std::string path;
    int label;
  };
  std::map<SplitTag, std::vector<Entry>> entries;

  for (SplitTag s : {SplitTag::Train, SplitTag::Val, SplitTag::Test}) {
    fs::path sp = fs::path(root) / split_name(s);
    if (!fs::exists(sp)) continue;
    for (const auto& cls : fs::directory_iterator(sp)) {
      if (!cls.is_directory()) continue;
      int label = -1;
      try {
        label = std::stoi(cls.path().filename().string());
      } catch (...) {
        throw SchemaError("class directory name is not an integer: " +
                          cls.path().string());
      }
      if (label < 0) throw SchemaError("negative class id in tree");
      max_label = std::max(max_label, label);
      for (const auto& f : fs::directory_iterator(cls.path()))
        if (f.path().extension() == ".png")
          entries[s].push_back({f.path().string(), label});
    }
    std::sort(entries[s].begin(), entries[s].end(),
              [](const Entry& a, const Entry& b) { return a.path < b.path; });
  }
  if (max_label < 0) throw LoadError("no class directories under " + root);

  for (SplitTag s : {SplitTag::Train, SplitTag::Val, SplitTag::Test}) {
    auto& set = bundle.split(s);
    set.split_tag = s;
    set.num_classes = max_label + 1;
    const auto& list = entries[s];
    if (list.empty()) {
      set.images = Tensor<T>({0, pad_to, pad_to, 1});
      continue;
    }
    ImageU8 first = read_png(list[0].path);
    const std::size_t h = first.height, w = first.width, c = first.channels;
    std::vector<unsigned char> raw;
    raw.reserve(list.size() * h * w * c);
    set.labels.reserve(list.size());
    for (const auto& e : list) {
      ImageU8 img = read_png(e.path);
      if (img.height != h || img.width != w || img.channels != c)
        throw SchemaError("inconsistent image geometry in tree: " + e.path);
      raw.insert(raw.end(), img.pixels.begin(), img.pixels.end());
      set.labels.push_back(e.label);
    }
    set.images = pad_and_scale<T>(raw, list.size(), h, w, c, pad_to);
    set.validate();
  }
  return bundle;
}

template <typename T = float>
DatasetBundle<T> load_dataset_bundle(const std::string& path,
                                     std::size_t pad_to) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw LoadError("dataset path missing: " + path);
  if (fs::is_directory(path)) return load_dir_tree<T>(path, pad_to);
  return load_pack<T>(path, pad_to);
}

// Single-split convenience (train by default).
template <typename T = float>
LabeledImageSet<T> load_dataset(const std::string& path, std::size_t pad_to,
                                SplitTag split = SplitTag::Train) {
  return load_dataset_bundle<T>(path, pad_to).split(split);
}

// ---------------------------------------------------------------------------
// Task schedules.
// ---------------------------------------------------------------------------
struct TaskSchedule {
  std::vector<std::vector<int>> tasks;  // disjoint label sets, in task order
  // Per-task sample index sets for each split, filled by bind().
  std::vector<std::vector<std::size_t>> train_idx, val_idx, test_idx;

  std::size_t num_tasks() const { return tasks.size(); }

  std::vector<int> classes_through(std::size_t t) const {
    std::vector<int> out;
    for (std::size_t i = 0; i <= t && i < tasks.size(); ++i)
      out.insert(out.end(), tasks[i].begin(), tasks[i].end());
    return out;
  }

  void validate(int num_classes) const {
    std::vector<char> seen(std::size_t(num_classes), 0);
    for (const auto& task : tasks)
      for (int y : task) {
        if (y < 0 || y >= num_classes)
          throw ScheduleError("task label out of range");
        if (seen[std::size_t(y)]) throw ScheduleError("task label sets overlap");
        seen[std::size_t(y)] = 1;
      }
    for (char s : seen)
      if (!s) throw ScheduleError("task label sets do not cover class range");
  }

  template <typename T>
  static std::vector<std::vector<std::size_t>> indices_for(
      const LabeledImageSet<T>& set, const std::vector<std::vector<int>>& tasks) {
    std::vector<std::vector<std::size_t>> out(tasks.size());
    for (std::size_t t = 0; t < tasks.size(); ++t)
      for (std::size_t i = 0; i < set.size(); ++i)
        if (std::find(tasks[t].begin(), tasks[t].end(), set.labels[i]) !=
            tasks[t].end())
          out[t].push_back(i);
    return out;
  }

  template <typename T>
  void bind(const DatasetBundle<T>& bundle) {
    train_idx = indices_for(bundle.train, tasks);
    val_idx = indices_for(bundle.val, tasks);
    test_idx = indices_for(bundle.test, tasks);
  }
};

inline TaskSchedule build_task_schedule(int num_classes,
                                        const std::vector<int>& classes_per_task,
                                        const std::vector<int>& order = {}) {
  int total = 0;
  for (int n : classes_per_task) {
    if (n <= 0) throw ScheduleError("classes_per_task entries must be positive");
    total += n;
  }
  if (total != num_classes)
    throw ScheduleError("classes_per_task sums to " + std::to_string(total) +
                        ", expected " + std::to_string(num_classes));

  std::vector<int> perm = order;
  if (perm.empty()) {
    perm.resize(std::size_t(num_classes));
    for (int i = 0; i < num_classes; ++i) perm[std::size_t(i)] = i;
  }
  if (int(perm.size()) != num_classes)
    throw ScheduleError("order permutation size mismatch");
  {
    std::vector<char> seen(std::size_t(num_classes), 0);
    for (int y : perm) {
      if (y < 0 || y >= num_classes || seen[std::size_t(y)])
        throw ScheduleError("order is not a permutation of class ids");
      seen[std::size_t(y)] = 1;
    }
  }

  TaskSchedule sched;
  std::size_t cursor = 0;
  for (int n : classes_per_task) {
    std::vector<int> task(perm.begin() + long(cursor),
                          perm.begin() + long(cursor) + n);
    sched.tasks.push_back(std::move(task));
    cursor += std::size_t(n);
  }
  sched.validate(num_classes);
  return sched;
}

// ---------------------------------------------------------------------------
// Per-class mean images.
// ---------------------------------------------------------------------------
template <typename T = float>
struct MeanImage {
  int class_id = -1;
  Tensor<T> pixels;  // [H, W, C]
};

template <typename T>
MeanImage<T> class_mean_image(const LabeledImageSet<T>& set, int class_id) {
  const std::size_t ppi = set.pixels_per_image();
  MeanImage<T> mean;
  mean.class_id = class_id;
  mean.pixels = Tensor<T>({set.height(), set.width(), set.channels()});
  std::size_t count = 0;
  std::vector<double> acc(ppi, 0.0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.labels[i] != class_id) continue;
    const T* p = set.image_ptr(i);
    for (std::size_t j = 0; j < ppi; ++j) acc[j] += double(p[j]);
    ++count;
  }
  if (count == 0)
    throw EmptyClassError("no training samples for class " +
                          std::to_string(class_id));
  for (std::size_t j = 0; j < ppi; ++j)
    mean.pixels[j] = T(acc[j] / double(count));
  return mean;
}

// Mean images are computed once when a class first appears and then persisted
// with the run.
template <typename T = float>
struct MeanImageStore {
  std::map<int, MeanImage<T>> by_class;

  bool has(int class_id) const { return by_class.count(class_id) != 0; }

  const MeanImage<T>& get(int class_id) const {
    auto it = by_class.find(class_id);
    if (it == by_class.end())
      throw EmptyClassError("no stored mean image for class " +
                            std::to_string(class_id));
    return it->second;
  }

  void add_missing(const LabeledImageSet<T>& train, const std::vector<int>& ids) {
    for (int id : ids)
      if (!has(id)) by_class[id] = class_mean_image(train, id);
  }

  void save(const std::string& path) const {
    BinaryWriter bw(path);
    bw.magic("CCSIMEAN");
    bw.u32(1);
    bw.u32(std::uint32_t(by_class.size()));
    for (const auto& [id, m] : by_class) {
      bw.u32(std::uint32_t(id));
      bw.u32(std::uint32_t(m.pixels.dim(0)));
      bw.u32(std::uint32_t(m.pixels.dim(1)));
      bw.u32(std::uint32_t(m.pixels.dim(2)));
      for (T v : m.pixels.data) bw.f64(double(v));
    }
    bw.close();
  }

  static MeanImageStore load(const std::string& path) {
    BinaryReader br(path);
    br.expect_magic("CCSIMEAN", "mean image store");
    if (br.u32() != 1) throw LoadError("unsupported mean store version");
    MeanImageStore store;
    const std::uint32_t count = br.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      MeanImage<T> m;
      m.class_id = int(br.u32());
      std::size_t h = br.u32(), w = br.u32(), c = br.u32();
      m.pixels = Tensor<T>({h, w, c});
      for (auto& v : m.pixels.data) v = T(br.f64());
      store.by_class[m.class_id] = std::move(m);
    }
    return store;
  }
};

// ---------------------------------------------------------------------------
// Stratified splitting.
// ---------------------------------------------------------------------------
template <typename T>
std::array<LabeledImageSet<T>, 3> split_dataset(
    const LabeledImageSet<T>& set, double train_ratio, double val_ratio,
    double test_ratio, std::uint64_t seed) {
  const double sum = train_ratio + val_ratio + test_ratio;
  if (std::abs(sum - 1.0) > 1e-9)
    throw StratifyError("split ratios must sum to 1");

  int nonzero = (train_ratio > 0) + (val_ratio > 0) + (test_ratio > 0);

  std::map<int, std::vector<std::size_t>> per_class;
  for (std::size_t i = 0; i < set.size(); ++i)
    per_class[set.labels[i]].push_back(i);

  Rng rng(seed);
  std::vector<std::size_t> tr, va, te;
  for (auto& [cls, idx] : per_class) {
    if (int(idx.size()) < nonzero)
      throw StratifyError("class " + std::to_string(cls) +
                          " has fewer samples than nonempty splits");
    rng.shuffle(idx.begin(), idx.end());
    // Largest-remainder apportionment keeps exact counts on clean ratios.
    const std::size_t n = idx.size();
    double raw[3] = {train_ratio * double(n), val_ratio * double(n),
                     test_ratio * double(n)};
    std::size_t cnt[3];
    double frac[3];
    std::size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
      cnt[s] = std::size_t(raw[s] + 1e-9);
      frac[s] = raw[s] - double(cnt[s]);
      assigned += cnt[s];
    }
    while (assigned < n) {
      int best = 0;
      for (int s = 1; s < 3; ++s)
        if (frac[s] > frac[best]) best = s;
      ++cnt[best];
      frac[best] = -1;
      ++assigned;
    }
    // Every nonzero-ratio split gets at least one sample.
    const double* ratios[3] = {&train_ratio, &val_ratio, &test_ratio};
    for (int s = 0; s < 3; ++s) {
      if (*ratios[s] > 0 && cnt[s] == 0) {
        int donor = 0;
        for (int d = 1; d < 3; ++d)
          if (cnt[d] > cnt[donor]) donor = d;
        --cnt[donor];
        ++cnt[s];
      }
    }
    std::size_t c0 = cnt[0], c1 = cnt[0] + cnt[1];
    tr.insert(tr.end(), idx.begin(), idx.begin() + long(c0));
    va.insert(va.end(), idx.begin() + long(c0), idx.begin() + long(c1));
    te.insert(te.end(), idx.begin() + long(c1), idx.end());
  }
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  std::sort(te.begin(), te.end());

  std::array<LabeledImageSet<T>, 3> out = {set.subset(tr), set.subset(va),
                                           set.subset(te)};
  out[0].split_tag = SplitTag::Train;
  out[1].split_tag = SplitTag::Val;
  out[2].split_tag = SplitTag::Test;
  return out;
}

// ---------------------------------------------------------------------------
// Batch assembly: gathers NHWC samples into the [B,C,D] activation layout the
// network consumes (D = H*W).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> gather_batch(const LabeledImageSet<T>& set,
                       const std::vector<std::size_t>& idx) {
  const std::size_t h = set.height(), w = set.width(), c = set.channels();
  Tensor<T> out({idx.size(), c, h * w});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const T* src = set.image_ptr(idx[b]);
    T* dst = out.ptr() + b * c * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          dst[ch * h * w + y * w + x] = src[(y * w + x) * c + ch];
  }
  return out;
}

// NHWC images [N,H,W,C] -> [N,C,D] without a labeled set wrapper.
template <typename T>
Tensor<T> nhwc_to_bcd(const Tensor<T>& images) {
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2),
                    c = images.dim(3);
  Tensor<T> out({n, c, h * w});
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = images.ptr() + b * h * w * c;
    T* dst = out.ptr() + b * c * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          dst[ch * h * w + y * w + x] = src[(y * w + x) * c + ch];
  }
  return out;
}

template <typename T>
Tensor<T> bcd_to_nhwc(const Tensor<T>& bcd, std::size_t h, std::size_t w) {
  const std::size_t n = bcd.dim(0), c = bcd.dim(1);
  Tensor<T> out({n, h, w, c});
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = bcd.ptr() + b * c * h * w;
    T* dst = out.ptr() + b * h * w * c;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          dst[(y * w + x) * c + ch] = src[ch * h * w + y * w + x];
  }
  return out;
}

}  // namespace ccsi
