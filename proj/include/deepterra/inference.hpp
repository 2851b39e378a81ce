#pragma once

// Test and prediction runs over a trained checkpoint.

#include "deepterra/dataset.hpp"
#include "deepterra/explain.hpp"
#include "deepterra/imagery.hpp"
#include "deepterra/metrics.hpp"
#include "deepterra/nn/train.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace deepterra::inference {

enum class RunMode { Test, Predict };

const char* to_string(RunMode m);

struct PredictionRecord {
  std::string filename;
  dataset::LabelName predicted;
  std::optional<dataset::LabelName> actual_or_chosen = {};
  double confidence_pct = 0;                    // 100 * max class probability
  std::optional<double> significance_pct = {};  // nullopt when not computed
  std::optional<geo::GeoPoint> geo = {};
  std::optional<std::string> maps_link = {};    // present iff geo is
  std::optional<geo::GeoBounds> bounds = {};    // patch footprint when known
  std::string source_ref = {};                  // key into the run's source store

  // Label used when filing the record into a dataset.
  const dataset::LabelName& effective_label() const { return actual_or_chosen ? *actual_or_chosen : predicted; }

  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

struct RecordFailure {
  std::string filename;
  std::string reason;

  friend bool operator==(const RecordFailure&, const RecordFailure&) = default;
};

// Original encoded bytes per source_ref.
using SourceStore = std::map<std::string, Bytes>;

struct PredictionRun {
  std::string checkpoint_id;
  RunMode mode = RunMode::Predict;
  dataset::LabelSet labels;
  std::vector<PredictionRecord> records;
  std::string created_at;
  std::string source;
  std::vector<RecordFailure> failures;
  std::shared_ptr<const SourceStore> sources;
};

struct RunInput {
  std::string filename;
  Bytes encoded;
  std::optional<dataset::LabelName> actual;
  std::optional<geo::GeoPoint> geo;
  std::optional<geo::GeoBounds> bounds;
};

struct RunOptions {
  std::string checkpoint_id;
  std::string created_at;  // injected so runs stay reproducible
  std::string source;
  bool compute_significance = true;
  std::optional<explain::OcclusionConfig> occlusion;  // default_occlusion(side) when unset
  double significance_threshold = 0.0;
  std::size_t workers = 1;
  std::function<void(std::size_t done, std::size_t total)> progress;
};

// 20 px windows with a 10 px stride, shrunk proportionally for images
// smaller than 20 px.
explain::OcclusionConfig default_occlusion(std::size_t side);

// Undecodable inputs become failures; a decoded image of the wrong size
// aborts the run with Domain. Test mode requires every input to carry its
// actual label.
PredictionRun run(const nn::Checkpoint& ckpt, std::vector<RunInput> inputs, RunMode mode, const RunOptions& opts = {});
PredictionRun run(const nn::Checkpoint& ckpt, const dataset::LabeledDataset& ds, const RunOptions& opts = {});
PredictionRun run(const nn::Checkpoint& ckpt, const std::vector<dataset::ImageEntry>& unlabeled,
                  const RunOptions& opts = {});
PredictionRun run(const nn::Checkpoint& ckpt, const imagery::PatchSet& patches, const RunOptions& opts = {});

std::vector<RunInput> inputs_from(const imagery::PatchSet& patches);

struct RunSummary {
  std::size_t total = 0;
  std::array<std::size_t, 2> counts{};  // by class index
  std::array<double, 2> pct{};
  std::optional<metrics::ConfusionMatrix> confusion;  // test mode
  std::optional<metrics::MetricsReport> report;
};

RunSummary summarize(const PredictionRun& run);
// Nearest integer percent, e.g. "26%".
std::string display_pct(double pct);

// Keep records strictly above min_pct; records without significance are dropped by the significance filter.
PredictionRun filter_confidence(const PredictionRun& run, double min_pct);
PredictionRun filter_significance(const PredictionRun& run, double min_pct);
// k records uniformly without replacement, in original order.
PredictionRun random_sample(const PredictionRun& run, std::size_t k, std::uint64_t seed);
PredictionRun toggle_label(const PredictionRun& run, std::size_t index);

struct DatasetConversion {
  dataset::LabeledDataset dataset;
  std::vector<RecordFailure> failures;
};

DatasetConversion to_labeled_dataset(const PredictionRun& run);

nlohmann::ordered_json to_json(const PredictionRecord& r);
PredictionRecord record_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const RunSummary& s);

// Directory with run.json and images/<source_ref>.
void save_run(const PredictionRun& run, const std::filesystem::path& dir);
PredictionRun load_run(const std::filesystem::path& dir);

}  // namespace deepterra::inference
