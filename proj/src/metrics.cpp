#include "deepterra/metrics.hpp"

#include "deepterra/error.hpp"

#include <algorithm>
#include <cmath>

namespace deepterra::metrics {

namespace {

void tally(ConfusionMatrix& cm, bool predicted_pos, bool actual_pos)
{
  if (predicted_pos)
    ++(actual_pos ? cm.tp : cm.fp);
  else
    ++(actual_pos ? cm.fn : cm.tn);
}

double ratio(std::uint64_t num, std::uint64_t den, bool& undefined)
{
  undefined = den == 0;
  return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionMatrix confusion(std::span<const PredictionPair> pairs, const dataset::LabelSet& labels)
{
  require(!pairs.empty(), ErrorKind::Domain, "confusion matrix needs at least one pair");
  ConfusionMatrix cm;
  for (const auto& p : pairs) tally(cm, labels.index_of(p.predicted) == 1, labels.index_of(p.actual) == 1);
  return cm;
}

ConfusionMatrix confusion(std::span<const std::pair<std::size_t, std::size_t>> predicted_actual)
{
  require(!predicted_actual.empty(), ErrorKind::Domain, "confusion matrix needs at least one pair");
  ConfusionMatrix cm;
  for (const auto& [p, a] : predicted_actual) {
    require(p < 2 && a < 2, ErrorKind::Domain, "class index out of range");
    tally(cm, p == 1, a == 1);
  }
  return cm;
}

MetricsReport report(const ConfusionMatrix& cm)
{
  require(cm.total() > 0, ErrorKind::Domain, "metrics need a nonempty confusion matrix");
  constexpr std::uint64_t kExact = std::uint64_t{1} << 53;
  require(cm.tp <= kExact && cm.fp <= kExact && cm.fn <= kExact && cm.tn <= kExact && cm.total() <= kExact,
          ErrorKind::Domain, "confusion counts exceed 2^53");
  MetricsReport r;
  bool unused = false;
  r.accuracy = ratio(cm.tp + cm.tn, cm.total(), unused);
  r.precision = ratio(cm.tp, cm.tp + cm.fp, r.precision_undefined);
  r.recall = ratio(cm.tp, cm.tp + cm.fn, r.recall_undefined);
  r.f1_undefined = r.precision_undefined || r.recall_undefined || r.precision + r.recall == 0.0;
  r.f1 = r.f1_undefined ? 0.0 : 2.0 * r.precision * r.recall / (r.precision + r.recall);

  const double tp = static_cast<double>(cm.tp), tn = static_cast<double>(cm.tn);
  const double fp = static_cast<double>(cm.fp), fn = static_cast<double>(cm.fn);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  r.mcc_undefined = den == 0.0;
  r.mcc = r.mcc_undefined ? 0.0 : std::clamp((tp * tn - fp * fn) / std::sqrt(den), -1.0, 1.0);
  return r;
}

nlohmann::ordered_json to_json(const ConfusionMatrix& cm)
{
  return {{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}};
}

nlohmann::ordered_json to_json(const MetricsReport& r)
{
  nlohmann::ordered_json j = {{"accuracy", r.accuracy}, {"precision", r.precision}, {"recall", r.recall},
                              {"f1", r.f1},             {"mcc", r.mcc}};
  nlohmann::ordered_json undefined = nlohmann::ordered_json::array();
  if (r.precision_undefined) undefined.push_back("precision");
  if (r.recall_undefined) undefined.push_back("recall");
  if (r.f1_undefined) undefined.push_back("f1");
  if (r.mcc_undefined) undefined.push_back("mcc");
  j["undefined"] = std::move(undefined);
  return j;
}

}  // namespace deepterra::metrics
