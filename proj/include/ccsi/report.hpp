#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ccsi/backbone.hpp"
#include "ccsi/common.hpp"
#include "ccsi/dataset.hpp"
#include "ccsi/trainer.hpp"

namespace ccsi {

struct RunSummary {
  std::string name;
  std::string dir;
  std::vector<TaskRow> tasks;
};

// Reads <dir>/accuracy.csv.  Corrupt or missing metrics yield an empty
// optional-style result (tasks empty) after a warning; callers skip those.
inline RunSummary read_run_summary(const std::string& dir) {
  RunSummary run;
  run.dir = dir;
  run.name = std::filesystem::path(dir).filename().string();
  if (run.name.empty()) run.name = dir;

  std::ifstream is(dir + "/accuracy.csv");
  if (!is) {
    warn("run " + dir + " has no accuracy.csv; skipped");
    return run;
  }
  std::string line;
  if (!std::getline(is, line) || line.rfind("task,accuracy", 0) != 0) {
    warn("run " + dir + " has a corrupt accuracy.csv header; skipped");
    return run;
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    TaskRow row;
    char extra;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf%c", &row.task, &row.accuracy,
                    &row.seconds, &extra) != 3 ||
        row.accuracy < 0.0 || row.accuracy > 1.0) {
      warn("run " + dir + " has a corrupt metrics row; skipped");
      run.tasks.clear();
      return run;
    }
    run.tasks.push_back(row);
  }
  if (run.tasks.empty()) warn("run " + dir + " has no accuracy rows; skipped");
  return run;
}

inline std::string report_table(const std::vector<RunSummary>& runs) {
  std::size_t max_tasks = 0;
  for (const auto& r : runs) max_tasks = std::max(max_tasks, r.tasks.size());
  std::ostringstream os;
  os << "run";
  for (std::size_t t = 0; t < max_tasks; ++t) os << "\ttask" << t;
  os << "\n";
  char buf[32];
  for (const auto& r : runs) {
    os << r.name;
    for (std::size_t t = 0; t < max_tasks; ++t) {
      if (t < r.tasks.size()) {
        std::snprintf(buf, sizeof buf, "\t%.2f", r.tasks[t].accuracy * 100.0);
        os << buf;
      } else {
        os << "\t-";
      }
    }
    os << "\n";
  }
  return os.str();
}

inline std::string report_csv(const std::vector<RunSummary>& runs) {
  std::ostringstream os;
  os << "run,task,accuracy\n";
  for (const auto& r : runs)
    for (const auto& t : r.tasks)
      os << r.name << "," << t.task << "," << t.accuracy << "\n";
  return os.str();
}

// Accuracy-vs-task curves, one polyline per run, with a legend.
inline std::string report_svg(const std::vector<RunSummary>& runs) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  const int W = 720, H = 440, ml = 60, mr = 180, mt = 30, mb = 50;
  const int pw = W - ml - mr, ph = H - mt - mb;
  std::size_t max_tasks = 1;
  for (const auto& r : runs) max_tasks = std::max(max_tasks, r.tasks.size());

  auto px = [&](double t) {
    return ml + (max_tasks > 1 ? t / double(max_tasks - 1) : 0.5) * pw;
  };
  auto py = [&](double acc) { return mt + (1.0 - acc) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
     << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  // axes
  os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw
     << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
     << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
  for (int g = 0; g <= 5; ++g) {
    const double acc = g / 5.0;
    os << "<line x1=\"" << ml << "\" y1=\"" << py(acc) << "\" x2=\"" << ml + pw
       << "\" y2=\"" << py(acc)
       << "\" stroke=\"#dddddd\" stroke-dasharray=\"3,3\"/>\n";
    os << "<text x=\"" << ml - 8 << "\" y=\"" << py(acc) + 4
       << "\" text-anchor=\"end\" font-size=\"12\">" << int(acc * 100)
       << "</text>\n";
  }
  for (std::size_t t = 0; t < max_tasks; ++t)
    os << "<text x=\"" << px(double(t)) << "\" y=\"" << mt + ph + 20
       << "\" text-anchor=\"middle\" font-size=\"12\">task " << t
       << "</text>\n";
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\" font-size=\"13\">tasks seen</text>\n";
  os << "<text x=\"16\" y=\"" << mt + ph / 2
     << "\" font-size=\"13\" transform=\"rotate(-90 16 " << mt + ph / 2
     << ")\" text-anchor=\"middle\">accuracy (%)</text>\n";

  std::size_t ci = 0;
  for (const auto& r : runs) {
    const char* color = kColors[ci % 8];
    std::ostringstream pts;
    for (const auto& t : r.tasks)
      pts << px(double(t.task)) << "," << py(t.accuracy) << " ";
    os << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\""
       << color << "\" stroke-width=\"2\"/>\n";
    for (const auto& t : r.tasks)
      os << "<circle cx=\"" << px(double(t.task)) << "\" cy=\""
         << py(t.accuracy) << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
    const int ly = mt + 10 + int(ci) * 20;
    os << "<line x1=\"" << ml + pw + 12 << "\" y1=\"" << ly << "\" x2=\""
       << ml + pw + 36 << "\" y2=\"" << ly << "\" stroke=\"" << color
       << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << ml + pw + 42 << "\" y=\"" << ly + 4
       << "\" font-size=\"12\">" << r.name << "</text>\n";
    ++ci;
  }
  os << "</svg>\n";
  return os.str();
}

// Writes report.txt, report.csv and curves.svg under out_dir; returns the
// runs that had readable metrics.
inline std::vector<RunSummary> write_report(
    const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  std::vector<RunSummary> runs;
  for (const auto& d : run_dirs) {
    RunSummary r = read_run_summary(d);
    if (!r.tasks.empty()) runs.push_back(std::move(r));
  }
  std::filesystem::create_directories(out_dir);
  auto put = [&](const std::string& name, const std::string& content) {
    std::ofstream os(out_dir + "/" + name, std::ios::binary);
    if (!os) throw Error("cannot write " + out_dir + "/" + name);
    os << content;
  };
  put("report.txt", report_table(runs));
  put("report.csv", report_csv(runs));
  put("curves.svg", report_svg(runs));
  return runs;
}

// ---------------------------------------------------------------------------
// Embedding export: eval-mode features as CSV rows index,label,domain,f0...
// ---------------------------------------------------------------------------
template <typename T>
void export_embeddings(Model<T>& model, const Tensor<T>& images_nhwc,
                       const std::vector<int>& labels,
                       const std::string& domain_tag, std::ostream& os,
                       std::size_t chunk = 64) {
  if (images_nhwc.shape.size() != 4)
    throw ExportError("images must be [N,H,W,C]");
  const std::size_t N = images_nhwc.dim(0), H = images_nhwc.dim(1),
                    W = images_nhwc.dim(2), C = images_nhwc.dim(3);
  if (C != model.extractor.config.in_channels)
    throw ExportError("image channel count " + std::to_string(C) +
                      " does not match checkpoint input channels " +
                      std::to_string(model.extractor.config.in_channels));
  if (labels.size() != N)
    throw ExportError("label count does not match image count");

  const std::size_t F = model.extractor.feat_dim();
  os << "index,label,domain";
  for (std::size_t j = 0; j < F; ++j) os << ",f" << j;
  os << "\n";
  os.precision(8);

  for (std::size_t start = 0; start < N; start += chunk) {
    const std::size_t end = std::min(N, start + chunk);
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < end; ++i) rows.push_back(i);
    Tensor<T> sub({rows.size(), H, W, C});
    const std::size_t ppi = H * W * C;
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy(images_nhwc.ptr() + rows[i] * ppi,
                images_nhwc.ptr() + (rows[i] + 1) * ppi, sub.ptr() + i * ppi);
    Tensor<T> f = model.forward_features_nhwc(sub, Mode::Eval);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      os << rows[i] << "," << labels[rows[i]] << "," << domain_tag;
      for (std::size_t j = 0; j < F; ++j) os << "," << double(f[i * F + j]);
      os << "\n";
    }
  }
  if (!os) throw ExportError("failed writing embedding rows");
}

}  // namespace ccsi
