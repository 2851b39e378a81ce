#pragma once

// Training loop, run control, checkpoints and prediction.

#include "deepterra/dataset.hpp"
#include "deepterra/nn/model.hpp"

#include <condition_variable>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace deepterra::nn {

enum class Optimizer { Sgd, Adam };

const char* to_string(Optimizer o);

struct TrainConfig {
  std::size_t max_epochs = 50;
  std::size_t batch_size = 32;
  std::size_t early_stopping_patience = 5;  // 0 disables early stopping
  std::optional<double> dropout_p;          // overrides every dropout layer when set
  Optimizer optimizer = Optimizer::Adam;
  double learning_rate = 1e-3;
  Activation activation = Activation::Relu;
  double val_split = 0.2;
  std::uint64_t seed = 0;
  std::string architecture = "convnet";
  std::string pretrained = "none";

  // Throws Config naming the offending field.
  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
// Missing fields keep their defaults; unknown fields are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double wall_ms = 0;

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

nlohmann::ordered_json to_json(const EpochStats& s);
EpochStats epoch_stats_from_json(const nlohmann::json& j);

enum class RunState { Running, Paused, Stopped, ResetPending };
enum class RunCommand { Pause, Resume, Stop, Reset };

const char* to_string(RunState s);
std::optional<RunCommand> parse_command(const std::string& s);

// Thread-safe mailbox between a controller and the training worker.
// Legal transitions: running <-> paused, any -> stopped, stopped -> reset-pending.
class RunControl {
 public:
  RunState state() const;

  // Applies a command; false (and no change) when the transition is illegal.
  bool send(RunCommand cmd);

  // Worker side: blocks while paused. Returns false once stopped.
  bool checkpoint();

  // Moves a reset-pending control back to running for a fresh run.
  bool rearm();

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  RunState state_ = RunState::Running;
};

struct ProgressSink {
  std::function<void(const EpochStats&)> on_epoch;
  std::function<void(std::size_t epoch, std::size_t batch, std::size_t batches, double loss)> on_batch;
};

enum class StopReason { Completed, EarlyStopped, Stopped };

const char* to_string(StopReason r);

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ModelSpec spec;
  WeightMap weights;
  dataset::LabelSet labels;
  TrainConfig config;
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;  // 1-based, 0 when no epoch completed
  StopReason stop_reason = StopReason::Completed;
  int format_version = kCheckpointFormatVersion;
};

// Architecture menu. Only "convnet" is built in; the other names are known
// but report that they are not available.
const std::vector<std::string>& known_architectures();
bool architecture_available(const std::string& name);
ModelSpec make_architecture(const TrainConfig& cfg, std::size_t input_px);

// Applies cfg.dropout_p to every dropout layer when set.
ModelSpec apply_overrides(ModelSpec spec, const TrainConfig& cfg);

Checkpoint train(const dataset::LabeledDataset& ds, const ModelSpec& spec, const TrainConfig& cfg,
                 RunControl* control = nullptr, const ProgressSink* sink = nullptr);
// Builds the model from cfg.architecture.
Checkpoint train(const dataset::LabeledDataset& ds, const TrainConfig& cfg, RunControl* control = nullptr,
                 const ProgressSink* sink = nullptr);

// Eval-mode class probabilities (negative, positive).
std::pair<double, double> predict_proba(const Checkpoint& ckpt, const RasterImage& img);
std::vector<std::pair<double, double>> predict_proba(const Checkpoint& ckpt,
                                                     std::span<const RasterImage* const> images);

Bytes serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace deepterra::nn
