// Command-line front end: run experiments, report results, export embeddings,
// and expand config grids for sweeps.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <ccsi/ccsi.hpp>

namespace fs = std::filesystem;
using Scalar = float;

namespace {

ccsi::DatasetBundle<Scalar> load_bundle(const ccsi::ExperimentConfig& cfg) {
  if (cfg.dataset == "synthcells") {
    ccsi::SynthCellsConfig sc;
    sc.classes = int(cfg.synthcells_classes);
    sc.train_per_class = int(cfg.synthcells_train);
    sc.val_per_class = int(cfg.synthcells_val);
    sc.test_per_class = int(cfg.synthcells_test);
    sc.jitter = cfg.synthcells_jitter;
    sc.pad_to = cfg.pad_to;
    sc.seed = cfg.seed;
    return ccsi::make_synthcells<Scalar>(sc);
  }
  return ccsi::load_dataset_bundle<Scalar>(cfg.dataset, cfg.pad_to);
}

std::string resolve_out_root(const ccsi::ExperimentConfig& cfg,
                             bool out_dir_explicit) {
  if (!out_dir_explicit) {
    if (const char* env = std::getenv("CCSI_OUT_ROOT"); env && *env)
      return env;
  }
  return cfg.out_dir;
}

std::string unique_run_dir(const std::string& root, const std::string& name) {
  fs::path dir = fs::path(root) / name;
  if (!fs::exists(dir)) return dir.string();
  for (int i = 2;; ++i) {
    fs::path cand = fs::path(root) / (name + "-" + std::to_string(i));
    if (!fs::exists(cand)) return cand.string();
  }
}

void apply_set_overrides(ccsi::ExperimentConfig& cfg,
                         const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ccsi::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

int cmd_run(const std::string& config_file,
            const std::map<std::string, std::string>& flag_overrides,
            const std::vector<std::string>& sets,
            const std::vector<std::string>& ablate_tokens, bool dump_synth,
            bool out_dir_explicit) {
  ccsi::ExperimentConfig cfg;
  if (!config_file.empty()) cfg.load_file(config_file);
  for (const auto& [k, v] : flag_overrides) cfg.set(k, v);
  apply_set_overrides(cfg, sets);
  for (const auto& t : ablate_tokens) cfg.set_ablation(t);
  if (dump_synth) cfg.dump_synth = true;
  cfg.validate();

  if (cfg.dataset != "synthcells" && !fs::exists(cfg.dataset)) {
    std::cerr << "error: dataset path missing: " << cfg.dataset << "\n";
    return 2;
  }

  ccsi::DatasetBundle<Scalar> bundle = load_bundle(cfg);
  ccsi::TaskSchedule schedule = ccsi::build_task_schedule(
      bundle.train.num_classes, cfg.schedule_counts(), cfg.order_list());

  const std::string run_dir =
      unique_run_dir(resolve_out_root(cfg, out_dir_explicit), cfg.run_name);
  ccsi::RunWriter writer(run_dir);
  writer.write_text("config.txt", cfg.canonical_text());
  std::cout << "run directory: " << run_dir << "\n";

  ccsi::PipelineResult<Scalar> result = ccsi::run_pipeline<Scalar>(
      bundle, schedule, cfg.backbone_config<Scalar>(),
      cfg.synthesis_config<Scalar>(), cfg.train_config<Scalar>(),
      cfg.loss_weights<Scalar>(), cfg.ablation_flags(), &writer,
      cfg.fingerprint(), cfg.dump_synth);

  for (const auto& row : result.log.tasks)
    std::cout << "task " << row.task << ": accuracy "
              << row.accuracy * 100.0 << "% (" << row.seconds << "s)\n";
  std::cout << "total wall time: " << result.log.wall_seconds << "s\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs,
               const std::string& out_dir) {
  std::vector<ccsi::RunSummary> runs = ccsi::write_report(run_dirs, out_dir);
  if (runs.empty()) {
    std::cerr << "error: no readable runs\n";
    return 1;
  }
  std::cout << ccsi::report_table(runs);
  std::cout << "report written to " << out_dir << "\n";
  return 0;
}

int cmd_export(const std::string& checkpoint, const std::string& dataset,
               const std::string& split_name, const std::string& domain,
               const std::string& out_path, std::size_t pad_to,
               std::uint64_t seed) {
  if (!fs::exists(checkpoint)) {
    std::cerr << "error: checkpoint missing: " << checkpoint << "\n";
    return 2;
  }
  ccsi::ExperimentConfig dcfg;
  dcfg.dataset = dataset;
  dcfg.pad_to = pad_to;
  dcfg.seed = seed;
  if (dataset != "synthcells" && !fs::exists(dataset)) {
    std::cerr << "error: dataset path missing: " << dataset << "\n";
    return 2;
  }
  ccsi::Model<Scalar> model = ccsi::Model<Scalar>::load(checkpoint);
  ccsi::DatasetBundle<Scalar> bundle = load_bundle(dcfg);
  const auto& set = bundle.split(ccsi::split_from_name(split_name));
  std::ofstream os(out_path, std::ios::binary);
  if (!os) throw ccsi::ExportError("cannot open output file: " + out_path);
  ccsi::export_embeddings(model, set.images, set.labels, domain, os);
  std::cout << "wrote " << set.size() << " feature rows to " << out_path
            << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_file,
              const std::vector<std::string>& grids,
              const std::string& out_dir) {
  // Grid stub: expands the cross product of key=v1,v2,... axes into config
  // files plus a manifest of run commands.  Does not execute anything.
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& g : grids) {
    const std::size_t eq = g.find('=');
    if (eq == std::string::npos)
      throw ccsi::ConfigError("--grid expects key=v1,v2,..., got '" + g + "'");
    axes.push_back({g.substr(0, eq), ccsi::detail::split_csv(g.substr(eq + 1))});
    if (axes.back().second.empty())
      throw ccsi::ConfigError("--grid axis has no values: " + g);
  }
  fs::create_directories(out_dir);
  std::ofstream manifest(out_dir + "/manifest.txt");

  std::vector<std::size_t> idx(axes.size(), 0);
  std::size_t count = 0;
  while (true) {
    ccsi::ExperimentConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (std::size_t a = 0; a < axes.size(); ++a)
      cfg.set(axes[a].first, axes[a].second[idx[a]]);
    char name[32];
    std::snprintf(name, sizeof name, "sweep_%03zu", count);
    cfg.run_name = name;
    const std::string path = out_dir + "/" + name + ".cfg";
    std::ofstream os(path);
    os << cfg.canonical_text();
    manifest << "ccsi run --config " << path << "\n";
    ++count;

    std::size_t a = 0;
    for (; a < axes.size(); ++a) {
      if (++idx[a] < axes[a].second.size()) break;
      idx[a] = 0;
    }
    if (axes.empty() || a == axes.size()) break;
  }
  std::cout << "expanded " << count << " configs into " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CCSI: class-incremental learning with class-impression synthesis"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "execute an experiment");
  std::string run_config, dataset, run_name, out_dir, schedule, class_order,
      norm;
  std::vector<std::string> sets, ablate_tokens;
  bool dump_synth = false;
  std::map<std::string, std::string> runtime_flags;
  long long seed = -1, epochs = -1, batch_size = -1, synth_iterations = -1,
            images_per_class = -1, pad_to = -1;
  run->add_option("--config", run_config, "config file (key=value lines)");
  run->add_option("--dataset", dataset, "dataset path or 'synthcells'");
  run->add_option("--run-name", run_name, "run directory name");
  run->add_option("--out-dir", out_dir, "output root directory");
  run->add_option("--schedule", schedule, "classes per task, e.g. 2,2,2,2");
  run->add_option("--class-order", class_order, "class permutation");
  run->add_option("--norm", norm, "normalization: cn | bn");
  run->add_option("--seed", seed, "random seed");
  run->add_option("--epochs", epochs, "epochs per task");
  run->add_option("--batch-size", batch_size, "training batch size");
  run->add_option("--synth-iterations", synth_iterations,
                  "synthesis iterations per batch");
  run->add_option("--images-per-class", images_per_class,
                  "replay images per previous class");
  run->add_option("--pad-to", pad_to, "pad input images to this size");
  run->add_option("--ablate", ablate_tokens,
                  "ablation flags: no_synthesis,no_mean_init,no_reg,bn,"
                  "no_idc,no_margin,softmax_ce,finetune")
      ->delimiter(',');
  run->add_option("--set", sets, "extra key=value override (repeatable)");
  run->add_flag("--dump-synth", dump_synth, "save synthetic batches as PNG");

  // report
  auto* report = app.add_subcommand("report", "tabulate and plot runs");
  std::vector<std::string> report_dirs;
  std::string report_out = "report";
  report->add_option("dirs", report_dirs, "run directories")->required();
  report->add_option("--out", report_out, "report output directory");

  // export-embeddings
  auto* exp = app.add_subcommand("export-embeddings",
                                 "write eval-mode features as CSV");
  std::string exp_ckpt, exp_dataset, exp_split = "test",
              exp_domain = "target", exp_out = "embeddings.csv";
  long long exp_pad = 32, exp_seed = 1;
  exp->add_option("--checkpoint", exp_ckpt, "model checkpoint")->required();
  exp->add_option("--dataset", exp_dataset, "dataset path or 'synthcells'")
      ->required();
  exp->add_option("--split", exp_split, "train | val | test");
  exp->add_option("--domain", exp_domain, "domain tag for the rows");
  exp->add_option("--out", exp_out, "output CSV path");
  exp->add_option("--pad-to", exp_pad, "pad input images to this size");
  exp->add_option("--seed", exp_seed, "seed for procedural datasets");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "expand a config grid (stub)");
  std::string sweep_config, sweep_out = "sweep";
  std::vector<std::string> sweep_grids;
  sweep->add_option("--config", sweep_config, "base config file");
  sweep->add_option("--grid", sweep_grids, "axis key=v1,v2,... (repeatable)");
  sweep->add_option("--out", sweep_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      if (!dataset.empty()) runtime_flags["dataset"] = dataset;
      if (!run_name.empty()) runtime_flags["run_name"] = run_name;
      if (!out_dir.empty()) runtime_flags["out_dir"] = out_dir;
      if (!schedule.empty()) runtime_flags["schedule"] = schedule;
      if (!class_order.empty()) runtime_flags["class_order"] = class_order;
      if (!norm.empty()) runtime_flags["norm"] = norm;
      if (seed >= 0) runtime_flags["seed"] = std::to_string(seed);
      if (epochs >= 0) runtime_flags["epochs"] = std::to_string(epochs);
      if (batch_size >= 0)
        runtime_flags["batch_size"] = std::to_string(batch_size);
      if (synth_iterations >= 0)
        runtime_flags["synth_iterations"] = std::to_string(synth_iterations);
      if (images_per_class >= 0)
        runtime_flags["images_per_class"] = std::to_string(images_per_class);
      if (pad_to >= 0) runtime_flags["pad_to"] = std::to_string(pad_to);
      const bool out_dir_explicit =
          !out_dir.empty() ||
          std::any_of(sets.begin(), sets.end(), [](const std::string& s) {
            return s.rfind("out_dir=", 0) == 0;
          });
      return cmd_run(run_config, runtime_flags, sets, ablate_tokens,
                     dump_synth, out_dir_explicit);
    }
    if (report->parsed()) return cmd_report(report_dirs, report_out);
    if (exp->parsed())
      return cmd_export(exp_ckpt, exp_dataset, exp_split, exp_domain, exp_out,
                        std::size_t(exp_pad), std::uint64_t(exp_seed));
    if (sweep->parsed()) return cmd_sweep(sweep_config, sweep_grids, sweep_out);
  } catch (const ccsi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ccsi::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
