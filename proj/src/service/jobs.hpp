#pragma once

#include "deepterra/nn/train.hpp"
#include "deepterra/service.hpp"

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

namespace deepterra::service {

enum class JobKind { Augment, Train, Predict, Fetch, Import };
enum class JobState { Queued, Running, Paused, Stopped, Done, Failed };

const char* to_string(JobKind k);
const char* to_string(JobState s);
std::string utc_now();

struct JobEvent {
  std::size_t seq = 0;
  std::string type;
  nlohmann::ordered_json data;
};

class JobManager;

// Handed to a job body while it runs.
class JobContext {
 public:
  JobContext(JobManager& jm, std::string id, std::size_t attempt, nn::RunControl* control)
      : jm_(jm), id_(std::move(id)), attempt_(attempt), control_(control)
  {
  }

  const std::string& id() const { return id_; }
  std::size_t attempt() const { return attempt_; }
  nn::RunControl* control() const { return control_; }

  void emit(const std::string& type, nlohmann::ordered_json data);
  void progress(double fraction, nlohmann::ordered_json latest = nullptr);
  // Throws once a stop was requested.
  void check_cancelled() const;

 private:
  JobManager& jm_;
  std::string id_;
  std::size_t attempt_;
  nn::RunControl* control_;
};

class JobCancelled : public std::runtime_error {
 public:
  JobCancelled() : std::runtime_error("job stopped") {}
};

using JobBody = std::function<nlohmann::ordered_json(JobContext&)>;

class JobManager {
 public:
  JobManager(Workspace& ws, std::size_t queue_depth);
  ~JobManager();
  JobManager(const JobManager&) = delete;
  JobManager& operator=(const JobManager&) = delete;

  std::string submit(JobKind kind, nlohmann::ordered_json params, JobBody body);

  nlohmann::ordered_json describe(const std::string& id) const;
  nlohmann::ordered_json list() const;

  // Throws NotFound or Conflict; returns the updated description.
  nlohmann::ordered_json control(const std::string& id, const std::string& command);

  struct EventBatch {
    std::vector<JobEvent> events;
    bool finished = false;  // terminal state and nothing left after these events
  };
  EventBatch events_since(const std::string& id, std::size_t from, std::chrono::milliseconds wait) const;

  // Blocks until the job is terminal or the timeout passes; returns its state.
  JobState wait(const std::string& id, std::chrono::milliseconds timeout) const;

  void shutdown();

 private:
  friend class JobContext;

  struct Job {
    std::string id;
    JobKind kind = JobKind::Train;
    JobState state = JobState::Queued;
    nlohmann::ordered_json params;
    JobBody body;
    std::size_t attempt = 1;
    double progress = 0.0;
    nlohmann::ordered_json latest;
    nlohmann::ordered_json result;
    std::string error;
    std::string created_at;
    std::string updated_at;
    std::vector<JobEvent> events;
    std::shared_ptr<nn::RunControl> control;
    bool stop_requested = false;
  };

  struct Lane {
    std::deque<std::string> queue;
    std::thread worker;
  };

  Job& find(const std::string& id);
  const Job& find(const std::string& id) const;
  void push_event(Job& job, const std::string& type, nlohmann::ordered_json data);
  void set_state(Job& job, JobState s);
  nlohmann::ordered_json describe_locked(const Job& job, bool with_events) const;
  void persist_locked() const;
  void enqueue_locked(Job& job);
  void work(JobKind kind);
  void load();

  Workspace& ws_;
  std::size_t queue_depth_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::map<std::string, std::unique_ptr<Job>> jobs_;
  std::map<JobKind, Lane> lanes_;
  std::size_t counter_ = 0;
  bool shutting_down_ = false;
};

}  // namespace deepterra::service
