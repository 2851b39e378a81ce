#pragma once

// HTTP API and job orchestration over an on-disk workspace:
//
//   <workspace>/datasets/<id>/{dataset.json, images/}
//   <workspace>/checkpoints/<id>.dtck
//   <workspace>/runs/<id>/{run.json, images/, heatmaps/}
//   <workspace>/jobs.json
//   <workspace>/cache/   (URL import downloads)

#include "deepterra/dataset.hpp"
#include "deepterra/inference.hpp"
#include "deepterra/nn/train.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace deepterra::service {

struct ServiceConfig {
  std::filesystem::path workspace = "workspace";
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::size_t max_upload_mb = 512;
  double tile_rate_limit = 0.0;  // requests per second for fetch jobs, 0 = unlimited
  std::size_t predict_workers = 1;
  std::size_t queue_depth = 16;  // pending jobs per kind

};

// Overrides fields from WORKSPACE_DIR, BIND_ADDR (host:port), MAX_UPLOAD_MB
// and TILE_RATE_LIMIT when set; throws Config on malformed values.
ServiceConfig config_from_env(ServiceConfig base = {});

std::pair<std::string, int> parse_bind_addr(const std::string& addr);

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Conflict : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Busy : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredEntry {
  std::string filename;
  std::optional<dataset::LabelName> label;
  std::optional<geo::GeoPoint> geo;
  std::optional<geo::GeoBounds> bounds;
};

struct StoredImage {
  StoredEntry entry;
  Bytes bytes;
};

struct StoredDataset {
  std::string id;
  std::string name;
  std::string origin;
  dataset::LabelSet labels;
  std::vector<StoredEntry> entries;

  std::size_t labeled_count() const;
};

nlohmann::ordered_json to_json(const StoredEntry& e);
nlohmann::ordered_json to_json(const StoredDataset& d, bool with_entries);

// Workspace index. Writers serialize on one lock; image and checkpoint
// files never change after creation.
class Workspace {
 public:
  explicit Workspace(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  std::string add_dataset(const std::string& name, const dataset::LabelSet& labels, std::vector<StoredImage> images,
                          const std::string& origin);
  std::string add_labeled(const dataset::LabeledDataset& ds, const std::string& name, const std::string& origin);
  StoredDataset dataset(const std::string& id) const;
  std::vector<StoredDataset> datasets() const;
  StoredEntry set_label(const std::string& id, const std::string& filename, std::optional<dataset::LabelName> label);
  Bytes image(const std::string& id, const std::string& filename) const;
  // Labeled entries only.
  dataset::LabeledDataset labeled(const std::string& id) const;
  std::vector<inference::RunInput> run_inputs(const std::string& id) const;

  std::string add_checkpoint(const nn::Checkpoint& ckpt);
  std::shared_ptr<const nn::Checkpoint> checkpoint(const std::string& id) const;
  std::filesystem::path checkpoint_path(const std::string& id) const;
  std::vector<std::string> checkpoints() const;

  std::string add_run(const inference::PredictionRun& run);
  std::shared_ptr<const inference::PredictionRun> run(const std::string& id) const;
  void replace_run(const std::string& id, const inference::PredictionRun& run);
  std::vector<std::string> runs() const;
  std::filesystem::path run_dir(const std::string& id) const;

  void save_jobs(const nlohmann::ordered_json& jobs) const;
  nlohmann::json load_jobs() const;

 private:
  std::string next_id(const std::string& prefix);
  StoredDataset read_dataset(const std::string& id) const;
  void write_dataset_json(const StoredDataset& d) const;

  std::filesystem::path root_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::size_t> counters_;
  mutable std::map<std::string, std::shared_ptr<const nn::Checkpoint>> checkpoint_cache_;
  mutable std::map<std::string, std::shared_ptr<const inference::PredictionRun>> run_cache_;
};

class Server {
 public:
  explicit Server(ServiceConfig cfg);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  int start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();

  Workspace& workspace();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace deepterra::service
