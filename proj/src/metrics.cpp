#include "robomal/metrics.hpp"

#include <stdexcept>
#include <string>

namespace robomal {

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  tp += o.tp;
  tn += o.tn;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size())
    throw std::invalid_argument("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                                std::to_string(truth.size()) + " labels");
  if (predicted.empty()) throw std::invalid_argument("confusion: no samples");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int p = predicted[i], t = truth[i];
    if ((p != 0 && p != 1) || (t != 0 && t != 1))
      throw std::invalid_argument("confusion: labels must be 0 or 1 (index " + std::to_string(i) + ")");
    if (p == 1 && t == 1) ++cm.tp;
    else if (p == 0 && t == 0) ++cm.tn;
    else if (p == 1) ++cm.fp;
    else ++cm.fn;
  }
  return cm;
}

std::optional<double>& MetricsReport::at(std::size_t i) {
  return const_cast<std::optional<double>&>(std::as_const(*this).at(i));
}

const std::optional<double>& MetricsReport::at(std::size_t i) const {
  switch (i) {
    case 0: return accuracy;
    case 1: return precision;
    case 2: return recall;
    case 3: return f1;
    case 4: return fpr_paper;
    case 5: return fpr_standard;
    case 6: return fnr;
  }
  throw std::out_of_range("metric index " + std::to_string(i));
}

namespace {

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::invalid_argument("compute_metrics: empty confusion matrix");
  MetricsReport r;
  r.accuracy = ratio(cm.tp + cm.tn, cm.total());
  r.precision = ratio(cm.tp, cm.tp + cm.fp);
  r.recall = ratio(cm.tp, cm.tp + cm.fn);
  // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn); the integer form avoids rounding twice
  if (r.precision && r.recall) r.f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn);
  if (r.f1 && *r.precision + *r.recall == 0.0) r.f1.reset();
  r.fpr_paper = ratio(cm.fp, cm.fp + cm.tp);
  r.fpr_standard = ratio(cm.fp, cm.fp + cm.tn);
  r.fnr = ratio(cm.fn, cm.fn + cm.tp);
  return r;
}

AggregateReport aggregate(std::span<const MetricsReport> folds) {
  AggregateReport out;
  out.folds = folds.size();
  for (std::size_t m = 0; m < MetricsReport::kCount; ++m) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& f : folds) {
      if (const auto& v = f.at(m)) {
        sum += *v;
        ++n;
      }
    }
    out.defined_folds[m] = n;
    if (n > 0) out.mean.at(m) = sum / static_cast<double>(n);
  }
  return out;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t m = 0; m < MetricsReport::kCount; ++m) {
    const std::string key(MetricsReport::kNames[m]);
    if (r.at(m)) j[key] = *r.at(m);
    else j[key] = nullptr;
  }
  return j;
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  for (std::size_t m = 0; m < MetricsReport::kCount; ++m) {
    const std::string key(MetricsReport::kNames[m]);
    if (!j.contains(key)) throw std::runtime_error("report lacks metric '" + key + "'");
    if (!j[key].is_null()) r.at(m) = j[key].get<double>();
  }
  return r;
}

nlohmann::json to_json(const ConfusionMatrix& cm) {
  return {{"tp", cm.tp}, {"tn", cm.tn}, {"fp", cm.fp}, {"fn", cm.fn}};
}

ConfusionMatrix confusion_from_json(const nlohmann::json& j) {
  return {j.at("tp").get<std::size_t>(), j.at("tn").get<std::size_t>(), j.at("fp").get<std::size_t>(),
          j.at("fn").get<std::size_t>()};
}

}  // namespace robomal
