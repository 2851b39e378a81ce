#include "doctest.h"

#include "deepterra/error.hpp"
#include "deepterra/metrics.hpp"
#include "deepterra/random.hpp"

#include <cmath>
#include <vector>

using namespace deepterra;
using namespace deepterra::metrics;
using dataset::LabelName;
using dataset::LabelSet;

namespace {

const LabelSet kLabels(LabelName("not_garbage"), LabelName("garbage"));

std::vector<PredictionPair> expand(const ConfusionMatrix& cm)
{
  std::vector<PredictionPair> out;
  auto add = [&](std::uint64_t n, const LabelName& p, const LabelName& a) {
    for (std::uint64_t i = 0; i < n; ++i) out.push_back({p, a});
  };
  add(cm.tp, kLabels.positive, kLabels.positive);
  add(cm.fp, kLabels.positive, kLabels.negative);
  add(cm.fn, kLabels.negative, kLabels.positive);
  add(cm.tn, kLabels.negative, kLabels.negative);
  return out;
}

// Independent per-pair recomputation: counts by scanning, then the textbook
// formulas written out separately.
struct Naive {
  double accuracy, precision, recall, f1, mcc;
};

Naive naive(const std::vector<PredictionPair>& pairs)
{
  double tp = 0, tn = 0, fp = 0, fn = 0, correct = 0;
  for (const auto& p : pairs) {
    const bool pp = p.predicted == kLabels.positive, ap = p.actual == kLabels.positive;
    correct += pp == ap;
    if (pp && ap) tp += 1;
    if (pp && !ap) fp += 1;
    if (!pp && ap) fn += 1;
    if (!pp && !ap) tn += 1;
  }
  Naive n{};
  n.accuracy = correct / static_cast<double>(pairs.size());
  n.precision = tp + fp > 0 ? tp / (tp + fp) : 0;
  n.recall = tp + fn > 0 ? tp / (tp + fn) : 0;
  n.f1 = n.precision + n.recall > 0 ? 2 * n.precision * n.recall / (n.precision + n.recall) : 0;
  const double d = std::sqrt(tp + fp) * std::sqrt(tp + fn) * std::sqrt(tn + fp) * std::sqrt(tn + fn);
  n.mcc = d > 0 ? (tp * tn - fp * fn) / d : 0;
  return n;
}

ConfusionMatrix inverted(const ConfusionMatrix& cm) { return {cm.fn, cm.tn, cm.tp, cm.fp}; }

}  // namespace

TEST_CASE("confusion counts")
{
  std::vector<PredictionPair> pairs;
  for (int i = 0; i < 10; ++i) pairs.push_back({kLabels.positive, kLabels.positive});
  for (int i = 0; i < 10; ++i) pairs.push_back({kLabels.negative, kLabels.negative});
  const auto cm = confusion(pairs, kLabels);
  CHECK(cm == ConfusionMatrix{10, 0, 0, 10});

  for (auto& p : pairs) p.predicted = kLabels.other(p.predicted);
  const auto inv = confusion(pairs, kLabels);
  CHECK(inv.tp == cm.fn);
  CHECK(inv.fn == cm.tp);
  CHECK(inv.tn == cm.fp);
  CHECK(inv.fp == cm.tn);

  CHECK_THROWS_AS(confusion(std::vector<PredictionPair>{}, kLabels), Error);
  const std::vector<PredictionPair> bad = {{LabelName("cat"), kLabels.positive}};
  try {
    confusion(bad, kLabels);
    FAIL("expected domain error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Domain);
  }
}

TEST_CASE("200 records with 3 errors")
{
  std::vector<PredictionPair> pairs;
  for (int i = 0; i < 200; ++i) {
    const auto& actual = i < 100 ? kLabels.positive : kLabels.negative;
    pairs.push_back({i < 3 ? kLabels.other(actual) : actual, actual});
  }
  const auto cm = confusion(pairs, kLabels);
  CHECK(cm.tp + cm.tn == 197);
  CHECK(report(cm).accuracy == 0.985);
}

TEST_CASE("report values")
{
  const auto perfect = report({10, 0, 0, 10});
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.mcc == 1.0);

  const auto r = report({50, 5, 5, 40});
  // (50*40 - 5*5) / sqrt(55*55*45*45)
  CHECK(r.mcc == doctest::Approx(1975.0 / 2475.0).epsilon(1e-15));
  CHECK(r.mcc == doctest::Approx(0.79798).epsilon(1e-5));

  const auto degenerate = report({0, 0, 0, 7});
  CHECK(degenerate.accuracy == 1.0);
  CHECK(degenerate.precision_undefined);
  CHECK(degenerate.recall_undefined);
  CHECK(degenerate.f1_undefined);
  CHECK(degenerate.mcc_undefined);
  CHECK(degenerate.precision == 0.0);
  CHECK(degenerate.mcc == 0.0);
  CHECK_FALSE(std::isnan(degenerate.f1));
  CHECK_THROWS_AS(report({}), Error);

  const auto j = to_json(degenerate);
  CHECK(j["undefined"].size() == 4);
}

TEST_CASE("report matches a per-pair oracle on random matrices")
{
  rng::Stream s(77);
  for (int trial = 0; trial < 50; ++trial) {
    ConfusionMatrix cm{s.below(60), s.below(60), s.below(60), s.below(60)};
    if (cm.total() == 0) cm.tn = 1;
    const auto r = report(cm);
    const auto n = naive(expand(cm));
    CAPTURE(trial);
    CHECK(std::fabs(r.accuracy - n.accuracy) <= 1e-12);
    CHECK(std::fabs(r.precision - n.precision) <= 1e-12);
    CHECK(std::fabs(r.recall - n.recall) <= 1e-12);
    CHECK(std::fabs(r.f1 - n.f1) <= 1e-12);
    CHECK(std::fabs(r.mcc - n.mcc) <= 1e-12);
    CHECK(r.mcc >= -1.0);
    CHECK(r.mcc <= 1.0);

    const auto inv = report(inverted(cm));
    CHECK(std::fabs(inv.mcc + r.mcc) <= 1e-12);
    // Swapping which class is positive maps tp<->tn and fp<->fn.
    CHECK(report({cm.tn, cm.fn, cm.fp, cm.tp}).accuracy == r.accuracy);
  }
}

TEST_CASE("precision and recall depend on the positive class")
{
  const ConfusionMatrix cm{8, 2, 1, 5};
  const ConfusionMatrix swapped{cm.tn, cm.fn, cm.fp, cm.tp};
  CHECK(report(cm).precision != report(swapped).precision);
  CHECK(report(cm).recall != report(swapped).recall);
}
