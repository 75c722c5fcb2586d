#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ccsi/common.hpp"
#include "ccsi/losses.hpp"
#include "ccsi/synthesis.hpp"
#include "ccsi/trainer.hpp"

namespace ccsi {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    long long x = std::stoll(v);
    if (x < 0) throw std::out_of_range("negative");
    return std::size_t(x);
  } catch (...) {
    throw ConfigError("config key '" + key + "' needs a nonnegative integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (...) {
    throw ConfigError("config key '" + key + "' needs a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "' needs a boolean, got '" + v + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Layered experiment configuration: defaults, then file keys, then flag
// overrides (flags win).  Unknown keys are rejected.
// ---------------------------------------------------------------------------
struct ExperimentConfig {
  // data
  std::string dataset;  // path to pack/tree, or the built-in "synthcells"
  std::string run_name = "run";
  std::string out_dir = "runs";
  std::string schedule = "2,2,2,2";
  std::string class_order;  // optional permutation, csv
  std::size_t pad_to = 32;
  std::uint64_t seed = 1;
  std::string norm = "cn";  // cn | bn

  // training
  std::size_t epochs = 100;
  std::size_t batch_size = 40;
  double lr = 0.01;
  double lr_final = 1e-4;
  double momentum = 0.9;

  // synthesis
  std::size_t synth_iterations = 2000;
  std::size_t synth_batch_size = 40;
  double synth_lr = 0.01;
  std::size_t images_per_class = 40;
  double alpha_tv = 2.5e-4;
  double alpha_l2 = 3e-6;
  double alpha_cn = 10.0;
  double init_noise_std = 0.05;

  // loss weights
  double alpha_dist = 5.0;
  double alpha_idc = 1.0;
  double alpha_margin = 1.0;
  double margin = 0.5;
  double tau = 5.0;

  // backbone
  std::size_t width1 = 32, width2 = 64, width3 = 128;

  // ablations / baselines
  bool no_synthesis = false;
  bool no_mean_init = false;
  bool no_reg = false;
  bool no_idc = false;
  bool no_margin = false;
  bool softmax_ce = false;
  bool finetune = false;

  bool dump_synth = false;

  // built-in procedural dataset knobs (used when dataset == "synthcells")
  std::size_t synthcells_classes = 8;
  std::size_t synthcells_train = 500;
  std::size_t synthcells_val = 60;
  std::size_t synthcells_test = 120;
  double synthcells_jitter = 1.0;

  void set(const std::string& key, const std::string& value) {
    using detail::to_bool;
    using detail::to_double;
    using detail::to_size;
    if (key == "dataset") dataset = value;
    else if (key == "run_name") run_name = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "schedule") schedule = value;
    else if (key == "class_order") class_order = value;
    else if (key == "pad_to") pad_to = to_size(key, value);
    else if (key == "seed") seed = to_size(key, value);
    else if (key == "norm") norm = value;
    else if (key == "epochs") epochs = to_size(key, value);
    else if (key == "batch_size") batch_size = to_size(key, value);
    else if (key == "lr") lr = to_double(key, value);
    else if (key == "lr_final") lr_final = to_double(key, value);
    else if (key == "momentum") momentum = to_double(key, value);
    else if (key == "synth_iterations") synth_iterations = to_size(key, value);
    else if (key == "synth_batch_size") synth_batch_size = to_size(key, value);
    else if (key == "synth_lr") synth_lr = to_double(key, value);
    else if (key == "images_per_class") images_per_class = to_size(key, value);
    else if (key == "alpha_tv") alpha_tv = to_double(key, value);
    else if (key == "alpha_l2") alpha_l2 = to_double(key, value);
    else if (key == "alpha_cn") alpha_cn = to_double(key, value);
    else if (key == "init_noise_std") init_noise_std = to_double(key, value);
    else if (key == "alpha_dist") alpha_dist = to_double(key, value);
    else if (key == "alpha_idc") alpha_idc = to_double(key, value);
    else if (key == "alpha_margin") alpha_margin = to_double(key, value);
    else if (key == "margin") margin = to_double(key, value);
    else if (key == "tau") tau = to_double(key, value);
    else if (key == "width1") width1 = to_size(key, value);
    else if (key == "width2") width2 = to_size(key, value);
    else if (key == "width3") width3 = to_size(key, value);
    else if (key == "no_synthesis") no_synthesis = to_bool(key, value);
    else if (key == "no_mean_init") no_mean_init = to_bool(key, value);
    else if (key == "no_reg") no_reg = to_bool(key, value);
    else if (key == "no_idc") no_idc = to_bool(key, value);
    else if (key == "no_margin") no_margin = to_bool(key, value);
    else if (key == "softmax_ce") softmax_ce = to_bool(key, value);
    else if (key == "finetune") finetune = to_bool(key, value);
    else if (key == "dump_synth") dump_synth = to_bool(key, value);
    else if (key == "ablate") for (const auto& t : detail::split_csv(value)) set_ablation(t);
    else if (key == "synthcells_classes") synthcells_classes = to_size(key, value);
    else if (key == "synthcells_train") synthcells_train = to_size(key, value);
    else if (key == "synthcells_val") synthcells_val = to_size(key, value);
    else if (key == "synthcells_test") synthcells_test = to_size(key, value);
    else if (key == "synthcells_jitter") synthcells_jitter = to_double(key, value);
    else throw ConfigError("unknown config key: " + key);
  }

  void set_ablation(const std::string& token) {
    if (token == "no_synthesis") no_synthesis = true;
    else if (token == "no_mean_init") no_mean_init = true;
    else if (token == "no_reg") no_reg = true;
    else if (token == "bn") norm = "bn";
    else if (token == "no_idc") no_idc = true;
    else if (token == "no_margin") no_margin = true;
    else if (token == "softmax_ce") softmax_ce = true;
    else if (token == "finetune") finetune = true;
    else throw ConfigError("unknown ablation flag: " + token);
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) +
                          " is not key=value: " + line);
      set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
  }

  void validate() const {
    if (dataset.empty()) throw ConfigError("dataset is required");
    if (norm != "cn" && norm != "bn")
      throw ConfigError("norm must be cn or bn, got '" + norm + "'");
    if (schedule_counts().empty()) throw ConfigError("schedule is empty");
  }

  std::vector<int> schedule_counts() const {
    std::vector<int> out;
    for (const auto& t : detail::split_csv(schedule))
      out.push_back(int(detail::to_size("schedule", t)));
    return out;
  }

  std::vector<int> order_list() const {
    std::vector<int> out;
    for (const auto& t : detail::split_csv(class_order))
      out.push_back(int(detail::to_size("class_order", t)));
    return out;
  }

  template <typename T>
  TrainConfig<T> train_config() const {
    TrainConfig<T> c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.lr = T(lr);
    c.lr_final = T(lr_final);
    c.momentum = T(momentum);
    c.seed = seed;
    return c;
  }

  template <typename T>
  SynthesisConfig<T> synthesis_config() const {
    SynthesisConfig<T> c;
    c.batch_size = synth_batch_size;
    c.iterations = synth_iterations;
    c.learning_rate = T(synth_lr);
    c.alpha_tv = T(alpha_tv);
    c.alpha_l2 = T(alpha_l2);
    c.alpha_cn = T(alpha_cn);
    c.images_per_class = images_per_class;
    c.seed = seed;
    c.init_noise_std = T(init_noise_std);
    return c;
  }

  template <typename T>
  LossWeights<T> loss_weights() const {
    LossWeights<T> w;
    w.alpha_dist = T(alpha_dist);
    w.alpha_idc = T(alpha_idc);
    w.alpha_margin = T(alpha_margin);
    w.margin = T(margin);
    w.tau = T(tau);
    return w;
  }

  template <typename T>
  BackboneConfig<T> backbone_config() const {
    BackboneConfig<T> c;
    c.widths = {width1, width2, width3};
    c.use_gn = (norm == "cn");
    return c;
  }

  AblationFlags ablation_flags() const {
    AblationFlags a;
    a.no_synthesis = no_synthesis;
    a.no_mean_init = no_mean_init;
    a.no_reg = no_reg;
    a.bn_only = (norm == "bn");
    a.no_idc = no_idc;
    a.no_margin = no_margin;
    a.softmax_ce = softmax_ce;
    a.finetune = finetune;
    return a;
  }

  // Canonical text form: every key in a fixed order.  Used both for the run
  // artifact and for the fingerprint, so identical configs hash identically.
  std::string canonical_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "dataset=" << dataset << "\n";
    os << "run_name=" << run_name << "\n";
    os << "out_dir=" << out_dir << "\n";
    os << "schedule=" << schedule << "\n";
    os << "class_order=" << class_order << "\n";
    os << "pad_to=" << pad_to << "\n";
    os << "seed=" << seed << "\n";
    os << "norm=" << norm << "\n";
    os << "epochs=" << epochs << "\n";
    os << "batch_size=" << batch_size << "\n";
    os << "lr=" << lr << "\n";
    os << "lr_final=" << lr_final << "\n";
    os << "momentum=" << momentum << "\n";
    os << "synth_iterations=" << synth_iterations << "\n";
    os << "synth_batch_size=" << synth_batch_size << "\n";
    os << "synth_lr=" << synth_lr << "\n";
    os << "images_per_class=" << images_per_class << "\n";
    os << "alpha_tv=" << alpha_tv << "\n";
    os << "alpha_l2=" << alpha_l2 << "\n";
    os << "alpha_cn=" << alpha_cn << "\n";
    os << "init_noise_std=" << init_noise_std << "\n";
    os << "alpha_dist=" << alpha_dist << "\n";
    os << "alpha_idc=" << alpha_idc << "\n";
    os << "alpha_margin=" << alpha_margin << "\n";
    os << "margin=" << margin << "\n";
    os << "tau=" << tau << "\n";
    os << "width1=" << width1 << "\n";
    os << "width2=" << width2 << "\n";
    os << "width3=" << width3 << "\n";
    os << "no_synthesis=" << no_synthesis << "\n";
    os << "no_mean_init=" << no_mean_init << "\n";
    os << "no_reg=" << no_reg << "\n";
    os << "no_idc=" << no_idc << "\n";
    os << "no_margin=" << no_margin << "\n";
    os << "softmax_ce=" << softmax_ce << "\n";
    os << "finetune=" << finetune << "\n";
    os << "dump_synth=" << dump_synth << "\n";
    os << "synthcells_classes=" << synthcells_classes << "\n";
    os << "synthcells_train=" << synthcells_train << "\n";
    os << "synthcells_val=" << synthcells_val << "\n";
    os << "synthcells_test=" << synthcells_test << "\n";
    os << "synthcells_jitter=" << synthcells_jitter << "\n";
    return os.str();
  }

  std::uint64_t fingerprint() const { return fnv1a(canonical_text()); }
};

}  // namespace ccsi
