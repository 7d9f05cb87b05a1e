#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyperat/attacks.hpp"
#include "hyperat/dataset.hpp"
#include "hyperat/trainer.hpp"

namespace hyperat {

struct MetricResult {
  std::string name;    // "clean", "pgd20", "cw20", ...
  double accuracy = 0.0;  // percent
  std::string budget;  // human-readable attack description, empty for clean
};

// One model on one dataset. The average is the arithmetic mean of every
// reported metric, so it only covers the columns that were actually computed.
struct EvalReport {
  std::string model_id;
  std::string dataset_id;
  std::vector<MetricResult> metrics;

  double average_acc() const {
    if (metrics.empty()) throw ConfigError("report has no metrics");
    double s = 0.0;
    for (const auto& m : metrics) s += m.accuracy;
    return s / static_cast<double>(metrics.size());
  }

  const MetricResult* find(std::string_view name) const {
    for (const auto& m : metrics) {
      if (m.name == name) return &m;
    }
    return nullptr;
  }

  nlohmann::json to_json() const {
    nlohmann::json ms = nlohmann::json::array();
    for (const auto& m : metrics) ms.push_back({{"name", m.name}, {"accuracy", m.accuracy}, {"budget", m.budget}});
    return {{"model", model_id}, {"dataset", dataset_id}, {"metrics", ms}, {"average_acc", average_acc()}};
  }
};

inline double average_accuracy(std::span<const double> metrics) {
  if (metrics.empty()) throw ConfigError("cannot average zero metrics");
  return std::accumulate(metrics.begin(), metrics.end(), 0.0) / static_cast<double>(metrics.size());
}

inline std::string describe_budget(const AttackBudget& b, LossKind kind) {
  std::ostringstream os;
  os << loss_kind_name(kind) << " eps=" << b.epsilon << " step=" << b.step_size << " iters=" << b.iterations
     << " restarts=" << b.restarts;
  return os.str();
}

template <DifferentiableClassifier Model>
double evaluate_clean(const Model& model, const Dataset& data, std::size_t batch_size = 256) {
  using T = typename Model::Scalar;
  if (data.size() == 0) throw ConfigError("evaluation split is empty");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto pred = argmax_rows(model.logits(data.batch_images<T>(idx)));
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == data.labels[idx[i]];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

// An example counts as robust only if it is classified correctly both before
// and after the attack.
template <DifferentiableClassifier Model>
double evaluate_robust(const Model& model, const Dataset& data, const AttackBudget& budget, LossKind kind,
                       std::uint64_t seed, std::size_t batch_size = 256) {
  using T = typename Model::Scalar;
  if (data.size() == 0) throw ConfigError("evaluation split is empty");
  budget.validate();
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0, b = 0; start < data.size(); start += batch_size, ++b) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Mat<T> x = data.batch_images<T>(idx);
    const Labels y = data.batch_labels(idx);
    const auto clean_pred = argmax_rows(model.logits(x));
    const auto adv = pgd_attack(model, x, y, budget, kind, mix_seed(seed, b));
    const auto adv_pred = argmax_rows(model.logits(adv.x_adv));
    for (std::size_t i = 0; i < idx.size(); ++i) correct += (clean_pred[i] == y[i]) && (adv_pred[i] == y[i]);
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

// Evaluation protocol: clean accuracy plus PGD-20 (cross-entropy) and CW-20
// (margin loss), both with restarts.
struct EvalProtocol {
  AttackBudget pgd{0.1, 0.02, 20, 2, true};
  AttackBudget cw{0.1, 0.02, 20, 2, true};
  bool run_pgd = true;
  bool run_cw = true;
  std::uint64_t seed = 0;
  bool operator==(const EvalProtocol&) const = default;
};

template <DifferentiableClassifier Model>
EvalReport evaluate_model(const Model& model, const Dataset& data, const EvalProtocol& proto, std::string model_id) {
  EvalReport r;
  r.model_id = std::move(model_id);
  r.dataset_id = data.name;
  r.metrics.push_back({"clean", evaluate_clean(model, data), ""});
  if (proto.run_pgd) {
    r.metrics.push_back({"pgd" + std::to_string(proto.pgd.iterations),
                         evaluate_robust(model, data, proto.pgd, LossKind::CrossEntropy, proto.seed),
                         describe_budget(proto.pgd, LossKind::CrossEntropy)});
  }
  if (proto.run_cw) {
    r.metrics.push_back({"cw" + std::to_string(proto.cw.iterations),
                         evaluate_robust(model, data, proto.cw, LossKind::CwMargin, mix_seed(proto.seed, 99)),
                         describe_budget(proto.cw, LossKind::CwMargin)});
  }
  return r;
}

// Aligned text table with one column per metric (union over reports, first
// appearance order) and the average accuracy.
inline std::string summarize(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ConfigError("nothing to summarize");
  std::vector<std::string> cols;
  for (const auto& r : reports) {
    for (const auto& m : r.metrics) {
      if (std::find(cols.begin(), cols.end(), m.name) == cols.end()) cols.push_back(m.name);
    }
  }
  std::size_t name_w = 5;
  for (const auto& r : reports) name_w = std::max(name_w, r.model_id.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_w)) << "model";
  for (const auto& c : cols) os << "  " << std::right << std::setw(8) << c;
  os << "  " << std::setw(8) << "avg" << "\n";
  os << std::string(name_w + (cols.size() + 1) * 10, '-') << "\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& r : reports) {
    os << std::left << std::setw(static_cast<int>(name_w)) << r.model_id;
    for (const auto& c : cols) {
      const auto* m = r.find(c);
      os << "  " << std::right << std::setw(8);
      if (m) {
        os << m->accuracy;
      } else {
        os << "-";
      }
    }
    os << "  " << std::setw(8) << r.average_acc() << "\n";
  }
  return os.str();
}

inline void write_reports(const std::filesystem::path& stem, const std::vector<EvalReport>& reports) {
  std::ofstream txt(stem.string() + ".txt");
  txt << summarize(reports);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(r.to_json());
  std::ofstream js(stem.string() + ".json");
  js << j.dump(2) << "\n";
  if (!txt || !js) throw IngestionError("cannot write report files at " + stem.string());
}

// Minimal SVG line chart (x: iteration, y: accuracy) plus the CSV it was drawn from.
inline void write_accuracy_plot(const std::filesystem::path& stem, const std::vector<std::string>& series_names,
                                const std::vector<std::vector<double>>& series) {
  std::ofstream csv(stem.string() + ".csv");
  csv << "iteration";
  for (const auto& n : series_names) csv << "," << n;
  csv << "\n";
  std::size_t len = 0;
  for (const auto& s : series) len = std::max(len, s.size());
  for (std::size_t i = 0; i < len; ++i) {
    csv << i;
    for (const auto& s : series) csv << "," << (i < s.size() ? std::to_string(s[i]) : "");
    csv << "\n";
  }

  const double W = 480, H = 320, pad = 40;
  double lo = 100, hi = 0;
  for (const auto& s : series) {
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi <= lo) hi = lo + 1;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  std::ofstream svg(stem.string() + ".svg");
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\"" << H - pad
      << "\" stroke=\"black\"/>\n<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\""
      << H - pad << "\" stroke=\"black\"/>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    svg << "<polyline fill=\"none\" stroke=\"" << colors[k % 5] << "\" points=\"";
    for (std::size_t i = 0; i < series[k].size(); ++i) {
      const double x = pad + (len > 1 ? (W - 2 * pad) * static_cast<double>(i) / static_cast<double>(len - 1) : 0.0);
      const double y = H - pad - (H - 2 * pad) * (series[k][i] - lo) / (hi - lo);
      svg << x << "," << y << " ";
    }
    svg << "\"/>\n<text x=\"" << W - pad - 100 << "\" y=\"" << pad + 14 * static_cast<double>(k) << "\" fill=\""
        << colors[k % 5] << "\" font-size=\"11\">" << series_names[k] << "</text>\n";
  }
  svg << "<text x=\"4\" y=\"" << pad - 8 << "\" font-size=\"11\">" << hi << "%</text>\n";
  svg << "<text x=\"4\" y=\"" << H - pad << "\" font-size=\"11\">" << lo << "%</text>\n";
  svg << "</svg>\n";
}

}  // namespace hyperat
