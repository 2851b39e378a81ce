#pragma once

// Binary-classification metrics over a confusion matrix.

#include "deepterra/dataset.hpp"

#include <cstdint>
#include <span>
#include <utility>

#include "json.hpp"

namespace deepterra::metrics {

struct ConfusionMatrix {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct PredictionPair {
  dataset::LabelName predicted;
  dataset::LabelName actual;
};

// Throws Domain for an empty list or labels outside the set.
ConfusionMatrix confusion(std::span<const PredictionPair> pairs, const dataset::LabelSet& labels);
// Class indices, 1 = positive.
ConfusionMatrix confusion(std::span<const std::pair<std::size_t, std::size_t>> predicted_actual);

// A metric whose denominator is zero is reported as 0 with its flag set.
struct MetricsReport {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, mcc = 0;
  bool precision_undefined = false, recall_undefined = false, f1_undefined = false, mcc_undefined = false;
};

MetricsReport report(const ConfusionMatrix& cm);

nlohmann::ordered_json to_json(const ConfusionMatrix& cm);
nlohmann::ordered_json to_json(const MetricsReport& r);

}  // namespace deepterra::metrics
