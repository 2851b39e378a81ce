#include "deepterra/nn/train.hpp"

#include "deepterra/error.hpp"
#include "deepterra/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace deepterra::nn {

using nlohmann::json;
using nlohmann::ordered_json;

const char* to_string(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "adam"; }

void TrainConfig::validate() const
{
  require(max_epochs >= 1, ErrorKind::Config, "max_epochs: must be at least 1");
  require(batch_size >= 1, ErrorKind::Config, "batch_size: must be at least 1");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorKind::Config,
          "learning_rate: must be a finite non-negative number");
  require(val_split > 0.0 && val_split < 1.0, ErrorKind::Config, "val_split: must lie in (0, 1)");
  if (dropout_p) require(*dropout_p >= 0.0 && *dropout_p < 1.0, ErrorKind::Config, "dropout_p: must lie in [0, 1)");
  require(pretrained == "none", ErrorKind::Config,
          "pretrained: only 'none' is supported; pretrained weights are not available in this build");
  require(architecture_available(architecture), ErrorKind::Config,
          "architecture: '" + architecture + "' is not available (only 'convnet' is implemented)");
}

ordered_json to_json(const TrainConfig& cfg)
{
  ordered_json j;
  j["max_epochs"] = cfg.max_epochs;
  j["batch_size"] = cfg.batch_size;
  j["early_stopping_patience"] = cfg.early_stopping_patience;
  j["dropout_p"] = cfg.dropout_p ? ordered_json(*cfg.dropout_p) : ordered_json(nullptr);
  j["optimizer"] = to_string(cfg.optimizer);
  j["learning_rate"] = cfg.learning_rate;
  j["activation"] = to_string(cfg.activation);
  j["val_split"] = cfg.val_split;
  j["seed"] = cfg.seed;
  j["architecture"] = cfg.architecture;
  j["pretrained"] = cfg.pretrained;
  return j;
}

namespace {

template <typename T>
T field(const json& j, const char* name)
{
  try {
    return j.at(name).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Config, std::string(name) + ": has the wrong type");
  }
}

std::size_t count_field(const json& j, const char* name)
{
  const auto& v = j.at(name);
  require(v.is_number_integer() && v.get<std::int64_t>() >= 0, ErrorKind::Config,
          std::string(name) + ": must be a non-negative integer");
  return v.get<std::size_t>();
}

}  // namespace

TrainConfig train_config_from_json(const json& j)
{
  require(j.is_object(), ErrorKind::Config, "train_config: must be an object");
  static const std::vector<std::string> allowed = {
      "max_epochs", "batch_size", "early_stopping_patience", "dropout_p", "optimizer", "learning_rate",
      "activation", "val_split",  "seed",                    "architecture", "pretrained"};
  for (const auto& [key, _] : j.items())
    require(std::find(allowed.begin(), allowed.end(), key) != allowed.end(), ErrorKind::Config,
            key + ": unknown train_config field");
  TrainConfig cfg;
  if (j.contains("max_epochs")) cfg.max_epochs = count_field(j, "max_epochs");
  if (j.contains("batch_size")) cfg.batch_size = count_field(j, "batch_size");
  if (j.contains("early_stopping_patience")) cfg.early_stopping_patience = count_field(j, "early_stopping_patience");
  if (j.contains("dropout_p") && !j.at("dropout_p").is_null()) cfg.dropout_p = field<double>(j, "dropout_p");
  if (j.contains("optimizer")) {
    const auto o = field<std::string>(j, "optimizer");
    if (o == "sgd")
      cfg.optimizer = Optimizer::Sgd;
    else if (o == "adam")
      cfg.optimizer = Optimizer::Adam;
    else
      fail(ErrorKind::Config, "optimizer: must be 'sgd' or 'adam'");
  }
  if (j.contains("learning_rate")) cfg.learning_rate = field<double>(j, "learning_rate");
  if (j.contains("activation")) {
    try {
      cfg.activation = parse_activation(field<std::string>(j, "activation"));
    } catch (const Error&) {
      fail(ErrorKind::Config, "activation: must be relu, sigmoid or tanh");
    }
  }
  if (j.contains("val_split")) cfg.val_split = field<double>(j, "val_split");
  if (j.contains("seed")) {
    require(j.at("seed").is_number_integer(), ErrorKind::Config, "seed: must be an integer");
    cfg.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("architecture")) cfg.architecture = field<std::string>(j, "architecture");
  if (j.contains("pretrained")) cfg.pretrained = field<std::string>(j, "pretrained");
  cfg.validate();
  return cfg;
}

ordered_json to_json(const EpochStats& s)
{
  return {{"epoch", s.epoch},       {"train_loss", s.train_loss}, {"train_accuracy", s.train_accuracy},
          {"val_loss", s.val_loss}, {"val_accuracy", s.val_accuracy}, {"wall_ms", s.wall_ms}};
}

EpochStats epoch_stats_from_json(const json& j)
{
  return {j.at("epoch").get<std::size_t>(),    j.at("train_loss").get<double>(), j.at("train_accuracy").get<double>(),
          j.at("val_loss").get<double>(),      j.at("val_accuracy").get<double>(), j.at("wall_ms").get<double>()};
}

const char* to_string(RunState s)
{
  switch (s) {
    case RunState::Running: return "running";
    case RunState::Paused: return "paused";
    case RunState::Stopped: return "stopped";
    case RunState::ResetPending: return "reset-pending";
  }
  return "running";
}

std::optional<RunCommand> parse_command(const std::string& s)
{
  if (s == "pause") return RunCommand::Pause;
  if (s == "resume") return RunCommand::Resume;
  if (s == "stop") return RunCommand::Stop;
  if (s == "reset") return RunCommand::Reset;
  return std::nullopt;
}

RunState RunControl::state() const
{
  std::lock_guard lock(mu_);
  return state_;
}

bool RunControl::send(RunCommand cmd)
{
  std::lock_guard lock(mu_);
  RunState next = state_;
  switch (cmd) {
    case RunCommand::Pause:
      if (state_ != RunState::Running) return false;
      next = RunState::Paused;
      break;
    case RunCommand::Resume:
      if (state_ != RunState::Paused) return false;
      next = RunState::Running;
      break;
    case RunCommand::Stop:
      if (state_ == RunState::Stopped) return false;
      next = RunState::Stopped;
      break;
    case RunCommand::Reset:
      if (state_ != RunState::Stopped) return false;
      next = RunState::ResetPending;
      break;
  }
  state_ = next;
  cv_.notify_all();
  return true;
}

bool RunControl::checkpoint()
{
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return state_ != RunState::Paused; });
  return state_ == RunState::Running;
}

bool RunControl::rearm()
{
  std::lock_guard lock(mu_);
  if (state_ != RunState::ResetPending) return false;
  state_ = RunState::Running;
  cv_.notify_all();
  return true;
}

const char* to_string(StopReason r)
{
  switch (r) {
    case StopReason::Completed: return "completed";
    case StopReason::EarlyStopped: return "early_stopped";
    case StopReason::Stopped: return "stopped";
  }
  return "completed";
}

const std::vector<std::string>& known_architectures()
{
  static const std::vector<std::string> names = {"resnet50",    "inception_v3", "densenet",   "efficientnet_v2",
                                                 "inception_resnet_v2", "vgg19", "mobilenet_v3", "nasnet",
                                                 "xception",    "convnet"};
  return names;
}

bool architecture_available(const std::string& name) { return name == "convnet"; }

ModelSpec apply_overrides(ModelSpec spec, const TrainConfig& cfg)
{
  if (cfg.dropout_p)
    for (auto& l : spec.layers)
      if (auto* d = std::get_if<Dropout>(&l)) d->p = *cfg.dropout_p;
  spec.layer_shapes();
  return spec;
}

ModelSpec make_architecture(const TrainConfig& cfg, std::size_t input_px)
{
  if (!architecture_available(cfg.architecture)) {
    const auto& k = known_architectures();
    const bool known = std::find(k.begin(), k.end(), cfg.architecture) != k.end();
    fail(ErrorKind::Config, "architecture: '" + cfg.architecture + "' " +
                                (known ? "requires pretrained backbones and is not available in this build"
                                       : "is unknown") +
                                "; use 'convnet'");
  }
  return apply_overrides(default_convnet(input_px, cfg.activation, cfg.dropout_p.value_or(0.5)), cfg);
}

namespace {

struct Sample {
  const RasterImage* image;
  std::size_t label;
};

std::vector<Sample> samples_of(const dataset::LabeledDataset& ds)
{
  std::vector<Sample> out;
  for (std::size_t c = 0; c < 2; ++c)
    for (const auto& e : ds.entries(c)) out.push_back({&e.image, c});
  return out;
}

struct BatchEval {
  double loss_sum = 0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

BatchEval evaluate(const ModelSpec& spec, const WeightMap& w, const std::vector<Sample>& samples, std::size_t batch)
{
  BatchEval r;
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    std::vector<const RasterImage*> imgs;
    std::vector<std::size_t> labels;
    for (std::size_t i = start; i < end; ++i) {
      imgs.push_back(samples[i].image);
      labels.push_back(samples[i].label);
    }
    auto fr = forward(spec, w, images_to_batch(imgs), Mode::Eval, 0);
    const auto loss = cross_entropy(fr.cache.logits(), labels);
    r.loss_sum += loss.loss * static_cast<double>(labels.size());
    r.correct += loss.correct;
    r.count += labels.size();
  }
  return r;
}

class Optimizers {
 public:
  Optimizers(const TrainConfig& cfg, const WeightMap& w) : cfg_(cfg)
  {
    if (cfg.optimizer == Optimizer::Adam)
      for (const auto& [name, t] : w.tensors()) {
        m_.emplace(name, Tensor(t.shape()));
        v_.emplace(name, Tensor(t.shape()));
      }
  }

  void step(WeightMap& w, const Gradients& grads)
  {
    ++t_;
    const double lr = cfg_.learning_rate;
    for (const auto& [name, g] : grads) {
      Tensor& p = w.mutable_at(name);
      if (cfg_.optimizer == Optimizer::Sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
        continue;
      }
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      Tensor& m = m_.at(name);
      Tensor& v = v_.at(name);
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::map<std::string, Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

void check_input(const ModelSpec& spec, const RasterImage& img)
{
  require(img.width() == spec.input_px && img.height() == spec.input_px, ErrorKind::Domain,
          "image is " + std::to_string(img.width()) + "x" + std::to_string(img.height()) + " but the model expects " +
              std::to_string(spec.input_px) + "x" + std::to_string(spec.input_px));
}

}  // namespace

Checkpoint train(const dataset::LabeledDataset& ds, const ModelSpec& model, const TrainConfig& cfg,
                 RunControl* control, const ProgressSink* sink)
{
  cfg.validate();
  const ModelSpec spec = apply_overrides(model, cfg);
  require(spec.input_channels == RasterImage::kChannels, ErrorKind::Domain, "model must take 3-channel input");
  const auto size = ds.image_size();
  require(size.has_value(), ErrorKind::Domain, "cannot train on an empty dataset");
  require(size->first == spec.input_px && size->second == spec.input_px, ErrorKind::Domain,
          "dataset images are " + std::to_string(size->first) + "x" + std::to_string(size->second) +
              " but the model expects " + std::to_string(spec.input_px) + "x" + std::to_string(spec.input_px));

  const auto [train_ds, val_ds] = dataset::split_train_val(ds, 1.0 - cfg.val_split, cfg.seed);
  const auto train_samples = samples_of(train_ds);
  const auto val_samples = samples_of(val_ds);

  Checkpoint ckpt{spec, init_weights(spec, cfg.seed), ds.labels(), cfg, {}, 0, StopReason::Completed};
  WeightMap& weights = ckpt.weights;
  WeightMap best = weights;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t wait = 0;
  Optimizers opt(cfg, weights);

  const std::size_t batches = (train_samples.size() + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train_samples.size());
    std::iota(order.begin(), order.end(), 0);
    rng::Stream stream(rng::mix(cfg.seed, {0xE90C, epoch}));
    rng::shuffle(order, stream);

    BatchEval tr;
    bool stopped = false;
    for (std::size_t b = 0; b < batches; ++b) {
      if (control && !control->checkpoint()) {
        stopped = true;
        break;
      }
      std::vector<const RasterImage*> imgs;
      std::vector<std::size_t> labels;
      for (std::size_t i = b * cfg.batch_size; i < std::min(order.size(), (b + 1) * cfg.batch_size); ++i) {
        imgs.push_back(train_samples[order[i]].image);
        labels.push_back(train_samples[order[i]].label);
      }
      auto fr = forward(spec, weights, images_to_batch(imgs), Mode::Train, rng::mix(cfg.seed, {0xD50, epoch, b}));
      const auto loss = cross_entropy(fr.cache.logits(), labels);
      if (!std::isfinite(loss.loss))
        fail(ErrorKind::Training,
             "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1));
      auto grads = backward(fr.cache, loss.grad_logits);
      opt.step(weights, grads);
      tr.loss_sum += loss.loss * static_cast<double>(labels.size());
      tr.correct += loss.correct;
      tr.count += labels.size();
      if (sink && sink->on_batch) sink->on_batch(epoch, b + 1, batches, loss.loss);
    }
    if (stopped) {
      ckpt.stop_reason = StopReason::Stopped;
      break;
    }

    const auto val = evaluate(spec, weights, val_samples, cfg.batch_size);
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = tr.loss_sum / static_cast<double>(tr.count);
    stats.train_accuracy = static_cast<double>(tr.correct) / static_cast<double>(tr.count);
    stats.val_loss = val.loss_sum / static_cast<double>(val.count);
    stats.val_accuracy = static_cast<double>(val.correct) / static_cast<double>(val.count);
    if (!std::isfinite(stats.val_loss))
      fail(ErrorKind::Training, "non-finite validation loss at epoch " + std::to_string(epoch));
    stats.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ckpt.history.push_back(stats);
    if (sink && sink->on_epoch) sink->on_epoch(stats);

    if (stats.val_loss < best_loss) {
      best_loss = stats.val_loss;
      best = weights;
      ckpt.best_epoch = epoch;
      wait = 0;
    } else if (++wait >= cfg.early_stopping_patience && cfg.early_stopping_patience > 0) {
      ckpt.stop_reason = StopReason::EarlyStopped;
      break;
    }
  }
  if (cfg.early_stopping_patience > 0 && ckpt.best_epoch > 0) weights = best;
  return ckpt;
}

Checkpoint train(const dataset::LabeledDataset& ds, const TrainConfig& cfg, RunControl* control,
                 const ProgressSink* sink)
{
  cfg.validate();
  const auto size = ds.image_size();
  require(size.has_value(), ErrorKind::Domain, "cannot train on an empty dataset");
  return train(ds, make_architecture(cfg, size->first), cfg, control, sink);
}

std::vector<std::pair<double, double>> predict_proba(const Checkpoint& ckpt, std::span<const RasterImage* const> images)
{
  std::vector<std::pair<double, double>> out;
  out.reserve(images.size());
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const auto part = images.subspan(start, std::min(chunk, images.size() - start));
    for (const auto* img : part) check_input(ckpt.spec, *img);
    const auto fr = forward(ckpt.spec, ckpt.weights, images_to_batch(part), Mode::Eval, 0);
    for (std::size_t i = 0; i < part.size(); ++i)
      out.emplace_back(fr.probabilities[i * 2], fr.probabilities[i * 2 + 1]);
  }
  return out;
}

std::pair<double, double> predict_proba(const Checkpoint& ckpt, const RasterImage& img)
{
  const RasterImage* p = &img;
  return predict_proba(ckpt, std::span(&p, 1)).front();
}

}  // namespace deepterra::nn
