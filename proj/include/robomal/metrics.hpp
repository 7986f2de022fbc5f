#ifndef ROBOMAL_METRICS_HPP
#define ROBOMAL_METRICS_HPP

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace robomal {

/// Positive class is malware (label 1).
struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + tn + fp + fn; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth);

/// The six reported metrics, with FPR in two flavours. A metric whose
/// denominator is zero is left empty rather than NaN.
struct MetricsReport {
  std::optional<double> accuracy;
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> f1;
  std::optional<double> fpr_paper;     // fp / (fp + tp)
  std::optional<double> fpr_standard;  // fp / (fp + tn)
  std::optional<double> fnr;           // fn / (fn + tp)

  static constexpr std::size_t kCount = 7;
  static constexpr std::array<std::string_view, kCount> kNames = {
      "accuracy", "precision", "recall", "f1", "fpr_paper", "fpr_standard", "fnr"};

  std::optional<double>& at(std::size_t i);
  const std::optional<double>& at(std::size_t i) const;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

MetricsReport compute_metrics(const ConfusionMatrix& cm);

struct AggregateReport {
  MetricsReport mean;
  std::array<std::size_t, MetricsReport::kCount> defined_folds{};  // folds contributing to each mean
  std::size_t folds = 0;
};

/// Unweighted mean over folds; a fold with an undefined metric is skipped for
/// that metric only.
AggregateReport aggregate(std::span<const MetricsReport> folds);

/// Metric values keyed by name; undefined values become null.
nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ConfusionMatrix& cm);
ConfusionMatrix confusion_from_json(const nlohmann::json& j);

}  // namespace robomal

#endif  // ROBOMAL_METRICS_HPP
