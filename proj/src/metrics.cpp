#include "sfas/metrics.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace sfas {

namespace {

using nlohmann::json;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path);
}

json seg_to_json(const SegmentationReport& s) {
  json j;
  j["target_accuracy"] = s.target_accuracy;
  j["background_accuracy"] = s.background_accuracy;
  j["accuracy"] = s.accuracy;
  j["iou"] = s.iou;
  j["tp"] = s.tp;
  j["fp"] = s.fp;
  j["fn"] = s.fn;
  j["tn"] = s.tn;
  return j;
}

}  // namespace

ClassificationReport classification_report(const std::vector<int>& predictions,
                                           const std::vector<int>& labels,
                                           const std::vector<std::string>& class_names) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("classification_report: " + std::to_string(predictions.size()) +
                                " predictions vs " + std::to_string(labels.size()) + " labels");
  if (predictions.empty()) throw std::invalid_argument("classification_report: empty input");
  const int C = static_cast<int>(class_names.size());
  if (C < 1) throw std::invalid_argument("classification_report: no class names");

  ClassificationReport r;
  r.class_names = class_names;
  r.per_class_correct.assign(static_cast<size_t>(C), 0);
  r.per_class_total.assign(static_cast<size_t>(C), 0);
  r.confusion = Eigen::MatrixX<int64_t>::Zero(C, C);
  r.n_samples = static_cast<int64_t>(predictions.size());

  int64_t correct = 0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y < 0 || y >= C)
      throw std::invalid_argument("classification_report: label " + std::to_string(y) +
                                  " outside [0," + std::to_string(C) + ")");
    if (p < 0 || p >= C)
      throw std::invalid_argument("classification_report: prediction " + std::to_string(p) +
                                  " outside [0," + std::to_string(C) + ")");
    r.confusion(y, p) += 1;
    r.per_class_total[static_cast<size_t>(y)] += 1;
    if (p == y) {
      r.per_class_correct[static_cast<size_t>(y)] += 1;
      ++correct;
    }
  }
  r.per_class_accuracy.resize(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    const int64_t tot = r.per_class_total[static_cast<size_t>(c)];
    r.per_class_accuracy[static_cast<size_t>(c)] =
        tot > 0 ? static_cast<double>(r.per_class_correct[static_cast<size_t>(c)]) /
                      static_cast<double>(tot)
                : 0.0;
  }
  r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(r.n_samples);
  return r;
}

SegmentationReport segmentation_report(const std::vector<std::vector<uint8_t>>& pred_masks,
                                       const std::vector<std::vector<uint8_t>>& gt_masks) {
  if (pred_masks.size() != gt_masks.size())
    throw std::invalid_argument("segmentation_report: " + std::to_string(pred_masks.size()) +
                                " predictions vs " + std::to_string(gt_masks.size()) +
                                " ground-truth masks");
  if (pred_masks.empty()) throw std::invalid_argument("segmentation_report: empty input");

  SegmentationReport r;
  for (size_t i = 0; i < pred_masks.size(); ++i) {
    const auto& p = pred_masks[i];
    const auto& g = gt_masks[i];
    if (p.size() != g.size())
      throw std::invalid_argument("segmentation_report: mask pair " + std::to_string(i) +
                                  " has sizes " + std::to_string(p.size()) + " vs " +
                                  std::to_string(g.size()));
    for (size_t j = 0; j < p.size(); ++j) {
      if (p[j] > 1 || g[j] > 1)
        throw std::invalid_argument("segmentation_report: non-binary mask value in pair " +
                                    std::to_string(i));
      if (g[j]) {
        if (p[j])
          ++r.tp;
        else
          ++r.fn;
      } else {
        if (p[j])
          ++r.fp;
        else
          ++r.tn;
      }
    }
  }
  const auto ratio = [](uint64_t num, uint64_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  r.target_accuracy = ratio(r.tp, r.tp + r.fn);
  r.background_accuracy = ratio(r.tn, r.tn + r.fp);
  r.accuracy = ratio(r.tp + r.tn, r.tp + r.tn + r.fp + r.fn);
  r.iou = ratio(r.tp, r.tp + r.fp + r.fn);
  return r;
}

std::string metrics_report_json(const MetricsReport& report) {
  json j;
  if (report.classification.has_value()) {
    const auto& c = *report.classification;
    json jc;
    jc["class_names"] = c.class_names;
    jc["per_class_correct"] = c.per_class_correct;
    jc["per_class_total"] = c.per_class_total;
    jc["per_class_accuracy"] = c.per_class_accuracy;
    jc["overall_accuracy"] = c.overall_accuracy;
    jc["n_samples"] = c.n_samples;
    json conf = json::array();
    for (Eigen::Index i = 0; i < c.confusion.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index k = 0; k < c.confusion.cols(); ++k) row.push_back(c.confusion(i, k));
      conf.push_back(row);
    }
    jc["confusion"] = conf;
    j["classification"] = jc;
  }
  if (report.segmentation.has_value()) j["segmentation"] = seg_to_json(*report.segmentation);
  return j.dump(2) + "\n";
}

void write_metrics_report(const MetricsReport& report, const std::string& base_path) {
  write_file(base_path + ".json", metrics_report_json(report));

  std::ostringstream csv;
  csv << "section,name,accuracy,correct,total\n";
  if (report.classification.has_value()) {
    const auto& c = *report.classification;
    for (size_t i = 0; i < c.class_names.size(); ++i) {
      csv << "class," << c.class_names[i] << "," << fmt(c.per_class_accuracy[i]) << ","
          << c.per_class_correct[i] << "," << c.per_class_total[i] << "\n";
    }
    csv << "overall,all," << fmt(c.overall_accuracy) << "," << "" << "," << c.n_samples << "\n";
  }
  if (report.segmentation.has_value()) {
    const auto& s = *report.segmentation;
    csv << "segmentation,target_accuracy," << fmt(s.target_accuracy) << ",,\n";
    csv << "segmentation,background_accuracy," << fmt(s.background_accuracy) << ",,\n";
    csv << "segmentation,accuracy," << fmt(s.accuracy) << ",,\n";
    csv << "segmentation,iou," << fmt(s.iou) << ",,\n";
  }
  write_file(base_path + ".csv", csv.str());
}

void emit_ablation_tables(const std::vector<AblationRow>& rows, const std::string& base_path) {
  std::ostringstream csv;
  csv << "k_labeled,seed,variant,overall_accuracy\n";
  json arr = json::array();
  for (const auto& r : rows) {
    csv << r.k_labeled << "," << r.seed << "," << r.variant << "," << fmt(r.overall_accuracy)
        << "\n";
    json j;
    j["k_labeled"] = r.k_labeled;
    j["seed"] = r.seed;
    j["variant"] = r.variant;
    j["overall_accuracy"] = r.overall_accuracy;
    arr.push_back(j);
  }
  write_file(base_path + ".csv", csv.str());
  write_file(base_path + ".json", arr.dump(2) + "\n");
}

void emit_segmentation_tables(const std::vector<SegMethodRow>& rows,
                              const std::string& base_path) {
  std::ostringstream csv;
  csv << "method,target_accuracy,background_accuracy,accuracy,iou\n";
  json arr = json::array();
  for (const auto& r : rows) {
    csv << r.method << "," << fmt(r.seg.target_accuracy) << "," << fmt(r.seg.background_accuracy)
        << "," << fmt(r.seg.accuracy) << "," << fmt(r.seg.iou) << "\n";
    json j;
    j["method"] = r.method;
    j["metrics"] = seg_to_json(r.seg);
    arr.push_back(j);
  }
  write_file(base_path + ".csv", csv.str());
  write_file(base_path + ".json", arr.dump(2) + "\n");
}

}  // namespace sfas
