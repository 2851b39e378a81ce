#include "jobs.hpp"

#include "deepterra/error.hpp"

#include <algorithm>
#include <cstdio>
#include <ctime>

namespace deepterra::service {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr JobKind kKinds[] = {JobKind::Augment, JobKind::Train, JobKind::Predict, JobKind::Fetch, JobKind::Import};

bool terminal(JobState s) { return s == JobState::Stopped || s == JobState::Done || s == JobState::Failed; }

template <class Enum, std::size_t N>
Enum parse_enum(const std::string& s, const Enum (&values)[N])
{
  for (Enum v : values)
    if (s == to_string(v)) return v;
  fail(ErrorKind::Structure, "unknown value '" + s + "' in jobs.json");
}

}  // namespace

const char* to_string(JobKind k)
{
  switch (k) {
    case JobKind::Augment: return "augment";
    case JobKind::Train: return "train";
    case JobKind::Predict: return "predict";
    case JobKind::Fetch: return "fetch";
    case JobKind::Import: return "import";
  }
  return "train";
}

const char* to_string(JobState s)
{
  switch (s) {
    case JobState::Queued: return "queued";
    case JobState::Running: return "running";
    case JobState::Paused: return "paused";
    case JobState::Stopped: return "stopped";
    case JobState::Done: return "done";
    case JobState::Failed: return "failed";
  }
  return "failed";
}

std::string utc_now()
{
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void JobContext::emit(const std::string& type, ordered_json data)
{
  std::lock_guard lock(jm_.mu_);
  jm_.push_event(jm_.find(id_), type, std::move(data));
  jm_.persist_locked();
}

void JobContext::progress(double fraction, ordered_json latest)
{
  std::lock_guard lock(jm_.mu_);
  auto& job = jm_.find(id_);
  job.progress = std::clamp(fraction, 0.0, 1.0);
  if (!latest.is_null()) job.latest = std::move(latest);
  jm_.cv_.notify_all();
}

void JobContext::check_cancelled() const
{
  std::lock_guard lock(jm_.mu_);
  if (jm_.find(id_).stop_requested) throw JobCancelled();
}

JobManager::JobManager(Workspace& ws, std::size_t queue_depth) : ws_(ws), queue_depth_(queue_depth)
{
  load();
  for (JobKind k : kKinds) lanes_[k].worker = std::thread([this, k] { work(k); });
}

JobManager::~JobManager() { shutdown(); }

void JobManager::shutdown()
{
  {
    std::lock_guard lock(mu_);
    if (shutting_down_) return;
    shutting_down_ = true;
    for (auto& [id, job] : jobs_) {
      if (job->state == JobState::Queued) {
        job->stop_requested = true;
        set_state(*job, JobState::Stopped);
      } else if (job->state == JobState::Running || job->state == JobState::Paused) {
        job->stop_requested = true;
        if (job->control) job->control->send(nn::RunCommand::Stop);
      }
    }
    persist_locked();
    cv_.notify_all();
  }
  for (auto& [k, lane] : lanes_)
    if (lane.worker.joinable()) lane.worker.join();
}

JobManager::Job& JobManager::find(const std::string& id)
{
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw NotFound("no such job: " + id);
  return *it->second;
}

const JobManager::Job& JobManager::find(const std::string& id) const
{
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw NotFound("no such job: " + id);
  return *it->second;
}

void JobManager::push_event(Job& job, const std::string& type, ordered_json data)
{
  job.events.push_back({job.events.size(), type, std::move(data)});
  job.updated_at = utc_now();
  cv_.notify_all();
}

void JobManager::set_state(Job& job, JobState s)
{
  job.state = s;
  push_event(job, "state", {{"state", to_string(s)}, {"attempt", job.attempt}});
}

ordered_json JobManager::describe_locked(const Job& job, bool with_events) const
{
  ordered_json j;
  j["id"] = job.id;
  j["kind"] = to_string(job.kind);
  j["state"] = to_string(job.state);
  j["attempt"] = job.attempt;
  j["progress"] = {{"fraction", job.progress}, {"latest", job.latest}};
  j["params"] = job.params;
  j["result"] = job.result;
  j["error"] = job.error.empty() ? ordered_json(nullptr) : ordered_json(job.error);
  j["created_at"] = job.created_at;
  j["updated_at"] = job.updated_at;
  j["event_count"] = job.events.size();
  if (with_events) {
    ordered_json evs = ordered_json::array();
    for (const auto& e : job.events) evs.push_back({{"seq", e.seq}, {"type", e.type}, {"data", e.data}});
    j["events"] = std::move(evs);
  }
  return j;
}

void JobManager::persist_locked() const
{
  ordered_json all = ordered_json::array();
  for (const auto& [id, job] : jobs_) all.push_back(describe_locked(*job, true));
  ws_.save_jobs(all);
}

void JobManager::load()
{
  const json all = ws_.load_jobs();
  try {
    for (const auto& j : all) {
      auto job = std::make_unique<Job>();
      job->id = j.at("id").get<std::string>();
      job->kind = parse_enum(j.at("kind").get<std::string>(), kKinds);
      job->state = parse_enum(j.at("state").get<std::string>(),
                              {JobState::Queued, JobState::Running, JobState::Paused, JobState::Stopped,
                               JobState::Done, JobState::Failed});
      job->attempt = j.value("attempt", std::size_t{1});
      job->progress = j.at("progress").value("fraction", 0.0);
      job->latest = j.at("progress").value("latest", ordered_json(nullptr));
      job->params = j.value("params", ordered_json::object());
      job->result = j.value("result", ordered_json(nullptr));
      if (j.contains("error") && j.at("error").is_string()) job->error = j.at("error").get<std::string>();
      job->created_at = j.value("created_at", std::string());
      job->updated_at = j.value("updated_at", std::string());
      for (const auto& e : j.value("events", json::array()))
        job->events.push_back({e.at("seq").get<std::size_t>(), e.at("type").get<std::string>(), e.at("data")});
      if (!terminal(job->state)) {
        job->error = "interrupted by service restart";
        set_state(*job, JobState::Failed);
        push_event(*job, "failed", {{"error", job->error}});
      }
      unsigned long n = 0;
      if (std::sscanf(job->id.c_str(), "job-%lu", &n) == 1) counter_ = std::max<std::size_t>(counter_, n);
      jobs_.emplace(job->id, std::move(job));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Structure, std::string("corrupt jobs.json: ") + e.what());
  }
}

void JobManager::enqueue_locked(Job& job)
{
  auto& lane = lanes_[job.kind];
  if (lane.queue.size() >= queue_depth_)
    throw Busy(std::string("the ") + to_string(job.kind) + " queue is full");
  lane.queue.push_back(job.id);
  cv_.notify_all();
}

std::string JobManager::submit(JobKind kind, ordered_json params, JobBody body)
{
  std::lock_guard lock(mu_);
  if (shutting_down_) throw Busy("service is shutting down");
  char buf[32];
  std::snprintf(buf, sizeof buf, "job-%06zu", counter_ + 1);
  auto job = std::make_unique<Job>();
  job->id = buf;
  job->kind = kind;
  job->params = std::move(params);
  job->body = std::move(body);
  job->created_at = job->updated_at = utc_now();
  if (kind == JobKind::Train) job->control = std::make_shared<nn::RunControl>();
  enqueue_locked(*job);
  ++counter_;
  Job& ref = *job;
  jobs_.emplace(ref.id, std::move(job));
  set_state(ref, JobState::Queued);
  persist_locked();
  return buf;
}

ordered_json JobManager::describe(const std::string& id) const
{
  std::lock_guard lock(mu_);
  return describe_locked(find(id), false);
}

ordered_json JobManager::list() const
{
  std::lock_guard lock(mu_);
  ordered_json out = ordered_json::array();
  for (const auto& [id, job] : jobs_) out.push_back(describe_locked(*job, false));
  return out;
}

ordered_json JobManager::control(const std::string& id, const std::string& command)
{
  const auto cmd = nn::parse_command(command);
  if (!cmd) throw Conflict("unknown command '" + command + "'");
  std::lock_guard lock(mu_);
  Job& job = find(id);
  auto illegal = [&] {
    return Conflict(std::string("cannot ") + command + " a " + to_string(job.kind) + " job that is " +
                    to_string(job.state));
  };
  switch (job.state) {
    case JobState::Queued:
      if (*cmd != nn::RunCommand::Stop) throw illegal();
      job.stop_requested = true;
      if (job.control) job.control->send(nn::RunCommand::Stop);
      std::erase(lanes_[job.kind].queue, job.id);
      set_state(job, JobState::Stopped);
      break;
    case JobState::Running:
    case JobState::Paused:
      if (*cmd == nn::RunCommand::Stop) {
        job.stop_requested = true;
        if (job.control) job.control->send(nn::RunCommand::Stop);
        break;
      }
      if (!job.control || *cmd == nn::RunCommand::Reset || !job.control->send(*cmd)) throw illegal();
      set_state(job, *cmd == nn::RunCommand::Pause ? JobState::Paused : JobState::Running);
      break;
    case JobState::Stopped:
      if (*cmd != nn::RunCommand::Reset || !job.control || !job.body) throw illegal();
      if (shutting_down_) throw Busy("service is shutting down");
      enqueue_locked(job);
      job.control->send(nn::RunCommand::Reset);
      job.control->rearm();
      job.stop_requested = false;
      ++job.attempt;
      job.progress = 0.0;
      job.latest = nullptr;
      job.result = nullptr;
      job.error.clear();
      push_event(job, "reset", {{"attempt", job.attempt}});
      set_state(job, JobState::Queued);
      break;
    case JobState::Done:
    case JobState::Failed: throw illegal();
  }
  persist_locked();
  return describe_locked(job, false);
}

JobManager::EventBatch JobManager::events_since(const std::string& id, std::size_t from,
                                                std::chrono::milliseconds wait) const
{
  std::unique_lock lock(mu_);
  const Job& job = find(id);
  cv_.wait_for(lock, wait, [&] { return job.events.size() > from || terminal(job.state) || shutting_down_; });
  EventBatch out;
  for (std::size_t i = from; i < job.events.size(); ++i) out.events.push_back(job.events[i]);
  out.finished = terminal(job.state) || shutting_down_;
  return out;
}

JobState JobManager::wait(const std::string& id, std::chrono::milliseconds timeout) const
{
  std::unique_lock lock(mu_);
  const Job& job = find(id);
  cv_.wait_for(lock, timeout, [&] { return terminal(job.state); });
  return job.state;
}

void JobManager::work(JobKind kind)
{
  std::unique_lock lock(mu_);
  auto& lane = lanes_[kind];
  for (;;) {
    cv_.wait(lock, [&] { return shutting_down_ || !lane.queue.empty(); });
    if (shutting_down_) return;
    Job& job = find(lane.queue.front());
    lane.queue.pop_front();
    if (job.state != JobState::Queued) continue;
    set_state(job, JobState::Running);
    persist_locked();
    JobContext ctx(*this, job.id, job.attempt, job.control.get());
    JobBody body = job.body;
    lock.unlock();

    ordered_json result;
    std::string error;
    bool cancelled = false;
    try {
      result = body(ctx);
    } catch (const JobCancelled&) {
      cancelled = true;
    } catch (const std::exception& e) {
      error = e.what();
    }

    lock.lock();
    const bool stopped = cancelled || job.stop_requested ||
                         (job.control && job.control->state() == nn::RunState::Stopped);
    if (!error.empty()) {
      job.error = error;
      set_state(job, JobState::Failed);
      push_event(job, "failed", {{"error", error}});
    } else if (stopped) {
      job.result = result;
      set_state(job, JobState::Stopped);
      push_event(job, "stopped", {{"result", result}});
    } else {
      job.result = result;
      job.progress = 1.0;
      set_state(job, JobState::Done);
      push_event(job, "done", {{"result", result}});
    }
    persist_locked();
  }
}

}  // namespace deepterra::service
