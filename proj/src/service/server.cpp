#include "deepterra/service.hpp"

#include "jobs.hpp"

#include "deepterra/augment.hpp"
#include "deepterra/error.hpp"
#include "deepterra/explain.hpp"
#include "deepterra/export.hpp"
#include "deepterra/hash.hpp"
#include "deepterra/imagery.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <set>
#include <thread>

#include "httplib.h"

namespace deepterra::service {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

class BadRequest : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CachedResponse {
  int status = 0;
  std::string body;
  std::string content_type;
  std::string location;
};

struct RouteDoc {
  const char* method;
  const char* path;
  const char* summary;
};

constexpr RouteDoc kRoutes[] = {
    {"get", "/health", "Liveness probe"},
    {"get", "/openapi.json", "This document"},
    {"get", "/datasets", "List datasets"},
    {"post", "/datasets", "Import a dataset from an uploaded tgz (201), a server folder (201) or a URL (202 job)"},
    {"post", "/datasets/split", "Split an uploaded image into patches, optionally geo-tagged from a north-east corner"},
    {"get", "/datasets/{id}", "Dataset metadata and entries"},
    {"get", "/datasets/{id}/patches", "Patch list with labels"},
    {"get", "/datasets/{id}/patches/{filename}", "Patch image bytes"},
    {"post", "/datasets/{id}/labels", "Set or clear one patch label: {filename, label | null}"},
    {"get", "/datasets/{id}/export.tgz", "Labeled images as a class-directory archive"},
    {"get", "/jobs", "List jobs"},
    {"get", "/jobs/{id}", "Job state, progress and result"},
    {"get", "/jobs/{id}/events", "Server-sent event stream of job events (from=<seq> or Last-Event-ID resumes)"},
    {"post", "/jobs/{id}/control", "Run control: {command: pause | resume | stop | reset}"},
    {"post", "/jobs/train", "Train a model: {dataset_id, config, model?}"},
    {"post", "/jobs/predict", "Test or predict run: {checkpoint_id, dataset_id, mode?, significance?, occlusion?}"},
    {"post", "/jobs/augment", "Augment a dataset: {dataset_id, spec, name?}"},
    {"post", "/jobs/fetch", "Fetch an area from a tile source: {source, area, name?, labels?}"},
    {"get", "/checkpoints", "List checkpoints"},
    {"get", "/checkpoints/{id}", "Checkpoint metadata"},
    {"get", "/checkpoints/{id}/download", "Checkpoint file"},
    {"get", "/runs", "List prediction runs"},
    {"get", "/runs/{id}", "Run records and summary"},
    {"post", "/runs/{id}/filters", "Derive a new run: {confidence?, significance?, sample?: {k, seed}}"},
    {"post", "/runs/{id}/records/{index}/toggle", "Flip the chosen class, or set it with {label}"},
    {"get", "/runs/{id}/records/{index}/image", "Source image of a record"},
    {"get", "/runs/{id}/records/{index}/heatmap.png", "Occlusion heatmap overlay (kind=saliency for grayscale)"},
    {"get", "/runs/{id}/export.csv", "CSV export"},
    {"get", "/runs/{id}/export.json", "JSON export"},
    {"get", "/runs/{id}/export.html", "Interactive map export (positive_only=true to restrict)"},
    {"post", "/runs/{id}/to-dataset", "File the run's records into a new labeled dataset"},
};

ordered_json openapi_document()
{
  ordered_json paths = ordered_json::object();
  for (const auto& r : kRoutes) {
    ordered_json op;
    op["summary"] = r.summary;
    op["responses"] = {{"200", {{"description", "OK"}}}};
    std::string path = r.path;
    ordered_json params = ordered_json::array();
    for (std::size_t open = path.find('{'); open != std::string::npos; open = path.find('{', open + 1)) {
      const auto close = path.find('}', open);
      params.push_back({{"name", path.substr(open + 1, close - open - 1)},
                        {"in", "path"},
                        {"required", true},
                        {"schema", {{"type", "string"}}}});
    }
    if (!params.empty()) op["parameters"] = std::move(params);
    paths[path][r.method] = std::move(op);
  }
  ordered_json doc;
  doc["openapi"] = "3.0.3";
  doc["info"] = {{"title", "deepterra service"}, {"version", "1.0.0"}};
  doc["paths"] = std::move(paths);
  return doc;
}

int status_for(ErrorKind k)
{
  switch (k) {
    case ErrorKind::Fetch: return 502;
    case ErrorKind::Cap: return 413;
    case ErrorKind::Io: return 500;
    default: return 422;
  }
}

void send_json(httplib::Response& res, int status, const ordered_json& body)
{
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message)
{
  send_json(res, status, {{"error", {{"kind", kind}, {"message", message}}}});
}

// GET responses carry a content hash ETag and honor If-None-Match.
void send_tagged(const httplib::Request& req, httplib::Response& res, std::string body, const std::string& type)
{
  const std::string etag = "\"" + sha256_hex(body).substr(0, 32) + "\"";
  res.set_header("ETag", etag);
  if (req.get_header_value("If-None-Match") == etag) {
    res.status = 304;
    return;
  }
  res.status = 200;
  res.set_content(std::move(body), type);
}

void send_tagged_json(const httplib::Request& req, httplib::Response& res, const ordered_json& body)
{
  send_tagged(req, res, body.dump(), "application/json");
}

std::string as_string(const Bytes& b) { return std::string(b.begin(), b.end()); }

Bytes as_bytes(const std::string& s) { return Bytes(s.begin(), s.end()); }

std::string image_type(const std::string& filename)
{
  std::string ext = fs::path(filename).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  return "application/octet-stream";
}

json parse_body(const httplib::Request& req)
{
  if (req.body.empty()) return json::object();
  try {
    json j = json::parse(req.body);
    if (!j.is_object()) throw BadRequest("request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw BadRequest(std::string("malformed JSON body: ") + e.what());
  }
}

std::string required_string(const json& j, const char* field)
{
  if (!j.contains(field) || !j.at(field).is_string())
    fail(ErrorKind::Config, std::string("field '") + field + "' must be a string");
  return j.at(field).get<std::string>();
}

std::optional<std::string> optional_string(const json& j, const char* field)
{
  if (!j.contains(field) || j.at(field).is_null()) return std::nullopt;
  if (!j.at(field).is_string()) fail(ErrorKind::Config, std::string("field '") + field + "' must be a string");
  return j.at(field).get<std::string>();
}

double query_double(const httplib::Request& req, const char* name, double fallback)
{
  if (!req.has_param(name)) return fallback;
  const std::string v = req.get_param_value(name);
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0') fail(ErrorKind::Config, std::string("query parameter '") + name + "' must be a number");
  return d;
}

std::size_t query_size(const httplib::Request& req, const char* name, std::size_t fallback)
{
  const double d = query_double(req, name, static_cast<double>(fallback));
  if (d < 0 || d != std::floor(d)) fail(ErrorKind::Config, std::string("query parameter '") + name + "' must be a non-negative integer");
  return static_cast<std::size_t>(d);
}

bool query_flag(const httplib::Request& req, const char* name)
{
  if (!req.has_param(name)) return false;
  const std::string v = req.get_param_value(name);
  return v.empty() || v == "1" || v == "true" || v == "yes";
}

dataset::LabelSet label_set_from(const json& j, const char* neg_default, const char* pos_default)
{
  std::string neg = neg_default, pos = pos_default;
  if (j.contains("labels") && j.at("labels").is_object()) {
    neg = j.at("labels").value("negative", neg);
    pos = j.at("labels").value("positive", pos);
  }
  return dataset::LabelSet(dataset::LabelName(neg), dataset::LabelName(pos));
}

// Request payload: multipart "file" field or the raw body.
std::string uploaded_bytes(const httplib::Request& req)
{
  if (req.is_multipart_form_data()) {
    if (!req.has_file("file")) throw BadRequest("multipart upload lacks a 'file' field");
    return req.get_file_value("file").content;
  }
  return req.body;
}

std::size_t parse_index(const std::string& s, std::size_t size)
{
  std::size_t used = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || v >= size) throw NotFound("no record " + s);
  return v;
}

}  // namespace

struct Server::Impl {
  ServiceConfig cfg;
  Workspace ws;
  JobManager jobs;
  httplib::Server http;
  std::thread listener;
  std::mutex run_mu;    // read-modify-write of stored runs
  std::mutex heat_mu;
  std::mutex idem_mu;
  std::map<std::string, CachedResponse> idem_done;
  std::set<std::string> idem_in_flight;

  explicit Impl(ServiceConfig c) : cfg(std::move(c)), ws(cfg.workspace), jobs(ws, cfg.queue_depth) { routes(); }

  static std::string idem_key(const httplib::Request& req)
  {
    const std::string key = req.get_header_value("Idempotency-Key");
    return key.empty() ? std::string() : req.method + " " + req.path + " " + key;
  }

  void routes();
  void dataset_routes();
  void job_routes();
  void run_routes();

  std::string import_labeled(const dataset::LabeledDataset& ds, const std::string& name, const std::string& origin)
  {
    return ws.add_labeled(ds, name, origin);
  }

  ordered_json run_json(const std::string& id, const inference::PredictionRun& run) const
  {
    ordered_json j;
    j["id"] = id;
    j["checkpoint_id"] = run.checkpoint_id;
    j["mode"] = inference::to_string(run.mode);
    j["labels"] = {{"negative", run.labels.negative.str()}, {"positive", run.labels.positive.str()}};
    j["created_at"] = run.created_at;
    j["source"] = run.source;
    ordered_json records = ordered_json::array();
    for (std::size_t i = 0; i < run.records.size(); ++i) {
      auto r = inference::to_json(run.records[i]);
      r["index"] = i;
      records.push_back(std::move(r));
    }
    j["records"] = std::move(records);
    ordered_json failures = ordered_json::array();
    for (const auto& f : run.failures) failures.push_back({{"filename", f.filename}, {"reason", f.reason}});
    j["failures"] = std::move(failures);
    j["summary"] = inference::to_json(inference::summarize(run));
    return j;
  }

  ordered_json train_body(JobContext& ctx, const std::string& dataset_id, const nn::TrainConfig& cfg,
                          const std::optional<nn::ModelSpec>& model);
  ordered_json predict_body(JobContext& ctx, const json& params);
};

void Server::Impl::routes()
{
  http.set_payload_max_length(cfg.max_upload_mb << 20);

  http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const BadRequest& e) {
      send_error(res, 400, "BadRequest", e.what());
    } catch (const NotFound& e) {
      send_error(res, 404, "NotFound", e.what());
    } catch (const Conflict& e) {
      send_error(res, 409, "Conflict", e.what());
    } catch (const Busy& e) {
      send_error(res, 503, "Busy", e.what());
    } catch (const Error& e) {
      send_error(res, status_for(e.kind()), to_string(e.kind()), e.what());
    } catch (const json::exception& e) {
      send_error(res, 422, "Config", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "Internal", e.what());
    }
  });

  http.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    if (req.method != "POST") return httplib::Server::HandlerResponse::Unhandled;
    const std::string key = idem_key(req);
    if (key.empty()) return httplib::Server::HandlerResponse::Unhandled;
    std::lock_guard lock(idem_mu);
    if (auto it = idem_done.find(key); it != idem_done.end()) {
      res.status = it->second.status;
      res.set_content(it->second.body, it->second.content_type);
      if (!it->second.location.empty()) res.set_header("Location", it->second.location);
      res.set_header("Idempotent-Replay", "true");
      return httplib::Server::HandlerResponse::Handled;
    }
    if (!idem_in_flight.insert(key).second) {
      send_error(res, 409, "Conflict", "a request with this Idempotency-Key is in progress");
      return httplib::Server::HandlerResponse::Handled;
    }
    return httplib::Server::HandlerResponse::Unhandled;
  });

  http.set_post_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    if (req.method != "POST" || res.has_header("Idempotent-Replay")) return;
    const std::string key = idem_key(req);
    if (key.empty()) return;
    std::lock_guard lock(idem_mu);
    if (!idem_in_flight.erase(key)) return;
    if (res.status < 500)
      idem_done[key] = {res.status, res.body, res.get_header_value("Content-Type"), res.get_header_value("Location")};
  });

  http.Get("/health", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, {{"status", "ok"}}); });
  http.Get("/openapi.json", [](const httplib::Request& req, httplib::Response& res) {
    send_tagged_json(req, res, openapi_document());
  });

  dataset_routes();
  job_routes();
  run_routes();
}

void Server::Impl::dataset_routes()
{
  http.Get("/datasets", [this](const httplib::Request& req, httplib::Response& res) {
    ordered_json out = ordered_json::array();
    for (const auto& d : ws.datasets()) out.push_back(to_json(d, false));
    send_tagged_json(req, res, out);
  });

  http.Post("/datasets", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string type = req.get_header_value("Content-Type");
    if (type.rfind("application/json", 0) == 0) {
      const json body = parse_body(req);
      dataset::ImportOptions opts;
      if (auto p = optional_string(body, "positive_label")) opts.positive_label = dataset::LabelName(*p);
      const std::string name = optional_string(body, "name").value_or("");
      if (auto folder = optional_string(body, "folder")) {
        std::vector<std::string> warnings;
        std::string id;
        if (dataset::looks_labeled(*folder)) {
          id = import_labeled(dataset::import_folder(*folder, opts, &warnings), name.empty() ? *folder : name,
                              "folder:" + *folder);
        } else {
          std::vector<StoredImage> images;
          for (auto& e : dataset::import_unlabeled_folder(*folder, &warnings))
            images.push_back({{e.filename, std::nullopt, e.geo, std::nullopt}, std::move(e.encoded)});
          require(!images.empty(), ErrorKind::Structure, "folder " + *folder + " holds no images");
          id = ws.add_dataset(name.empty() ? *folder : name, label_set_from(body, "negative", "positive"),
                              std::move(images), "folder:" + *folder);
        }
        res.set_header("Location", "/datasets/" + id);
        send_json(res, 201, {{"id", id}, {"warnings", warnings}, {"dataset", to_json(ws.dataset(id), false)}});
        return;
      }
      if (auto url = optional_string(body, "url")) {
        const std::string cache = (ws.root() / "cache").string();
        const std::size_t cap = cfg.max_upload_mb << 20;
        const std::string job = jobs.submit(JobKind::Import, {{"url", *url}, {"name", name}},
                                            [this, url = *url, name, opts, cache, cap](JobContext&) {
                                              dataset::UrlImportOptions u;
                                              u.cache_dir = cache;
                                              u.max_bytes = cap;
                                              u.import = opts;
                                              std::vector<std::string> warnings;
                                              const auto ds = dataset::import_url(url, u, &warnings);
                                              const std::string id =
                                                  import_labeled(ds, name.empty() ? url : name, "url:" + url);
                                              return ordered_json{{"dataset_id", id}, {"warnings", warnings}};
                                            });
        res.set_header("Location", "/jobs/" + job);
        send_json(res, 202, {{"job_id", job}});
        return;
      }
      fail(ErrorKind::Config, "JSON import needs a 'folder' or 'url' field");
    }
    dataset::ImportOptions opts;
    if (req.has_param("positive_label")) opts.positive_label = dataset::LabelName(req.get_param_value("positive_label"));
    const std::string payload = uploaded_bytes(req);
    std::vector<std::string> warnings;
    const auto ds = dataset::import_archive_bytes(as_bytes(payload), opts, &warnings);
    const std::string name = req.has_param("name") ? req.get_param_value("name") : std::string("upload");
    const std::string id = import_labeled(ds, name, "upload");
    res.set_header("Location", "/datasets/" + id);
    send_json(res, 201, {{"id", id}, {"warnings", warnings}, {"dataset", to_json(ws.dataset(id), false)}});
  });

  http.Post("/datasets/split", [this](const httplib::Request& req, httplib::Response& res) {
    const RasterImage img = decode_image(as_bytes(uploaded_bytes(req)));
    const std::size_t patch_px = query_size(req, "patch_px", 200);
    const std::string name = req.has_param("name") ? req.get_param_value("name") : std::string("split");
    auto ps = imagery::split_image(img, patch_px, name);
    if (req.has_param("lat") || req.has_param("lon")) {
      const std::size_t n = img.width() / patch_px;
      require(img.height() / patch_px == n, ErrorKind::Domain, "geo-tagging needs a square patch grid");
      geo::AreaSpec area{geo::GeoPoint(query_double(req, "lat", 0), query_double(req, "lon", 0)),
                         query_double(req, "side_m", 1000.0), query_size(req, "n", n), patch_px};
      area.validate();
      ps = imagery::attach_geo(std::move(ps), geo::GeoPatchGrid(area));
    }
    json labels = json::object();
    if (req.has_param("negative")) labels["negative"] = req.get_param_value("negative");
    if (req.has_param("positive")) labels["positive"] = req.get_param_value("positive");
    std::vector<StoredImage> images;
    for (auto& in : inference::inputs_from(ps))
      images.push_back({{in.filename, std::nullopt, in.geo, in.bounds}, std::move(in.encoded)});
    const std::size_t count = images.size();
    const std::string id =
        ws.add_dataset(name, label_set_from({{"labels", labels}}, "negative", "positive"), std::move(images), "split");
    res.set_header("Location", "/datasets/" + id);
    send_json(res, 201, {{"id", id}, {"patches", count}, {"notice", std::to_string(count) + " patches"}});
  });

  http.Get(R"(/datasets/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    send_tagged_json(req, res, to_json(ws.dataset(req.matches[1]), true));
  });

  http.Get(R"(/datasets/([^/]+)/patches)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto d = ws.dataset(req.matches[1]);
    ordered_json out = ordered_json::array();
    for (const auto& e : d.entries) {
      auto j = to_json(e);
      j["url"] = "/datasets/" + d.id + "/patches/" + httplib::detail::encode_url(e.filename);
      out.push_back(std::move(j));
    }
    send_tagged_json(req, res, out);
  });

  http.Get(R"(/datasets/([^/]+)/patches/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string filename = req.matches[2];
    send_tagged(req, res, as_string(ws.image(req.matches[1], filename)), image_type(filename));
  });

  http.Post(R"(/datasets/([^/]+)/labels)", [this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    const std::string filename = required_string(body, "filename");
    if (!body.contains("label")) fail(ErrorKind::Config, "field 'label' is required (null clears)");
    std::optional<dataset::LabelName> label;
    if (!body.at("label").is_null()) label = dataset::LabelName(required_string(body, "label"));
    send_json(res, 200, to_json(ws.set_label(req.matches[1], filename, label)));
  });

  http.Get(R"(/datasets/([^/]+)/export\.tgz)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto ds = ws.labeled(req.matches[1]);
    send_tagged(req, res, as_string(archive::write_tgz(dataset::to_tree(ds))), "application/gzip");
  });

  http.Get("/checkpoints", [this](const httplib::Request& req, httplib::Response& res) {
    ordered_json out = ordered_json::array();
    for (const auto& id : ws.checkpoints()) {
      const auto ck = ws.checkpoint(id);
      out.push_back({{"id", id},
                     {"architecture", ck->config.architecture},
                     {"labels", {{"negative", ck->labels.negative.str()}, {"positive", ck->labels.positive.str()}}},
                     {"best_epoch", ck->best_epoch},
                     {"epochs", ck->history.size()},
                     {"stop_reason", nn::to_string(ck->stop_reason)}});
    }
    send_tagged_json(req, res, out);
  });

  http.Get(R"(/checkpoints/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto ck = ws.checkpoint(id);
    ordered_json history = ordered_json::array();
    for (const auto& h : ck->history) history.push_back(nn::to_json(h));
    send_tagged_json(req, res,
                     {{"id", id},
                      {"format_version", ck->format_version},
                      {"labels", {{"negative", ck->labels.negative.str()}, {"positive", ck->labels.positive.str()}}},
                      {"model", nn::to_json(ck->spec)},
                      {"config", nn::to_json(ck->config)},
                      {"history", std::move(history)},
                      {"best_epoch", ck->best_epoch},
                      {"stop_reason", nn::to_string(ck->stop_reason)}});
  });

  http.Get(R"(/checkpoints/([^/]+)/download)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    res.set_header("Content-Disposition", "attachment; filename=\"" + id + ".dtck\"");
    send_tagged(req, res, as_string(read_file(ws.checkpoint_path(id))), "application/octet-stream");
  });
}

ordered_json Server::Impl::train_body(JobContext& ctx, const std::string& dataset_id, const nn::TrainConfig& cfg,
                                      const std::optional<nn::ModelSpec>& model)
{
  const auto ds = ws.labeled(dataset_id);
  const auto size = ds.image_size();
  require(size.has_value(), ErrorKind::Structure, "dataset " + dataset_id + " has no labeled images");
  const nn::ModelSpec spec = model ? *model : nn::make_architecture(cfg, size->first);
  const double epochs = static_cast<double>(cfg.max_epochs);
  nn::ProgressSink sink;
  sink.on_epoch = [&](const nn::EpochStats& s) {
    auto j = nn::to_json(s);
    j["attempt"] = ctx.attempt();
    ctx.progress(static_cast<double>(s.epoch) / epochs, j);
    ctx.emit("epoch", std::move(j));
  };
  sink.on_batch = [&](std::size_t epoch, std::size_t batch, std::size_t batches, double) {
    ctx.progress((static_cast<double>(epoch - 1) + static_cast<double>(batch) / static_cast<double>(batches)) / epochs);
  };
  const nn::Checkpoint ckpt = nn::train(ds, spec, cfg, ctx.control(), &sink);
  const std::string ck_id = ws.add_checkpoint(ckpt);

  ordered_json result{{"checkpoint_id", ck_id},
                      {"best_epoch", ckpt.best_epoch},
                      {"epochs", ckpt.history.size()},
                      {"stop_reason", nn::to_string(ckpt.stop_reason)}};
  if (!ckpt.history.empty()) {
    const auto val = dataset::split_train_val(ds, 1.0 - cfg.val_split, cfg.seed).second;
    inference::RunOptions opts;
    opts.checkpoint_id = ck_id;
    opts.compute_significance = false;
    const auto summary = inference::summarize(inference::run(ckpt, val, opts));
    result["validation"] = inference::to_json(summary);
  }
  return result;
}

ordered_json Server::Impl::predict_body(JobContext& ctx, const json& params)
{
  const std::string ck_id = required_string(params, "checkpoint_id");
  const std::string ds_id = required_string(params, "dataset_id");
  const auto ck = ws.checkpoint(ck_id);
  auto inputs = ws.run_inputs(ds_id);
  const bool all_labeled = !inputs.empty() && std::all_of(inputs.begin(), inputs.end(), [](const auto& in) {
    return in.actual.has_value();
  });
  const std::string mode_name = params.value("mode", all_labeled ? "test" : "predict");
  if (mode_name != "test" && mode_name != "predict")
    fail(ErrorKind::Config, "field 'mode' must be \"test\" or \"predict\"");
  const auto mode = mode_name == "test" ? inference::RunMode::Test : inference::RunMode::Predict;
  if (mode == inference::RunMode::Predict)
    for (auto& in : inputs) in.actual.reset();
  else {
    const auto d = ws.dataset(ds_id);
    require(d.labels == ck->labels, ErrorKind::Domain, "dataset labels do not match the checkpoint's labels");
  }

  inference::RunOptions opts;
  opts.checkpoint_id = ck_id;
  opts.created_at = utc_now();
  opts.source = "dataset:" + ds_id;
  opts.compute_significance = params.value("significance", true);
  opts.workers = cfg.predict_workers;
  if (params.contains("occlusion")) {
    const auto& o = params.at("occlusion");
    explain::OcclusionConfig oc;
    oc.window_px = o.value("window_px", oc.window_px);
    oc.stride_px = o.value("stride_px", oc.stride_px);
    const std::string base = o.value("baseline", std::string(explain::to_string(oc.baseline)));
    if (base == explain::to_string(explain::Baseline::Gray))
      oc.baseline = explain::Baseline::Gray;
    else if (base != explain::to_string(explain::Baseline::MeanColor))
      fail(ErrorKind::Config, "field 'occlusion.baseline' is unknown: " + base);
    opts.occlusion = oc;
  }
  opts.progress = [&](std::size_t done, std::size_t total) {
    ctx.check_cancelled();
    ctx.progress(total ? static_cast<double>(done) / static_cast<double>(total) : 1.0,
                 {{"done", done}, {"total", total}});
  };
  const auto run = inference::run(*ck, std::move(inputs), mode, opts);
  const std::string run_id = ws.add_run(run);
  return {{"run_id", run_id}, {"records", run.records.size()}, {"failures", run.failures.size()}};
}

void Server::Impl::job_routes()
{
  http.Get("/jobs", [this](const httplib::Request&, httplib::Response& res) { send_json(res, 200, jobs.list()); });

  http.Get(R"(/jobs/(job-\d+))", [this](const httplib::Request& req, httplib::Response& res) {
    send_json(res, 200, jobs.describe(req.matches[1]));
  });

  http.Get(R"(/jobs/(job-\d+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    jobs.describe(id);
    std::size_t from = query_size(req, "from", 0);
    if (req.has_header("Last-Event-ID")) {
      try {
        from = std::stoul(req.get_header_value("Last-Event-ID")) + 1;
      } catch (const std::exception&) {
        throw BadRequest("malformed Last-Event-ID");
      }
    }
    auto next = std::make_shared<std::size_t>(from);
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [this, id, next](std::size_t, httplib::DataSink& sink) {
      const auto batch = jobs.events_since(id, *next, std::chrono::milliseconds(1000));
      std::string chunk;
      for (const auto& e : batch.events) {
        chunk += "id: " + std::to_string(e.seq) + "\nevent: " + e.type + "\ndata: " + e.data.dump() + "\n\n";
        *next = e.seq + 1;
      }
      if (chunk.empty() && !batch.finished) chunk = ": keep-alive\n\n";
      if (!chunk.empty() && !sink.write(chunk.data(), chunk.size())) return false;
      if (batch.finished) sink.done();
      return true;
    });
  });

  http.Post(R"(/jobs/(job-\d+)/control)", [this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    send_json(res, 200, jobs.control(req.matches[1], required_string(body, "command")));
  });

  auto accepted = [](httplib::Response& res, const std::string& job) {
    res.set_header("Location", "/jobs/" + job);
    send_json(res, 202, {{"job_id", job}});
  };

  http.Post("/jobs/train", [this, accepted](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    const std::string ds_id = required_string(body, "dataset_id");
    const auto cfg = nn::train_config_from_json(body.value("config", json::object()));
    cfg.validate();
    std::optional<nn::ModelSpec> model;
    if (body.contains("model") && !body.at("model").is_null()) model = nn::model_from_json(body.at("model"));
    const auto d = ws.dataset(ds_id);
    for (std::size_t c = 0; c < 2; ++c) {
      const auto& label = d.labels.at(c);
      const auto n = std::count_if(d.entries.begin(), d.entries.end(), [&](const auto& e) { return e.label == label; });
      require(n >= 2, ErrorKind::Structure,
              "class '" + label.str() + "' needs at least 2 labeled images for a train/validation split");
    }
    ordered_json params{{"dataset_id", ds_id}, {"config", nn::to_json(cfg)}};
    if (model) params["model"] = nn::to_json(*model);
    accepted(res, jobs.submit(JobKind::Train, std::move(params), [this, ds_id, cfg, model](JobContext& ctx) {
      return train_body(ctx, ds_id, cfg, model);
    }));
  });

  http.Post("/jobs/predict", [this, accepted](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    ws.checkpoint(required_string(body, "checkpoint_id"));
    ws.dataset(required_string(body, "dataset_id"));
    accepted(res, jobs.submit(JobKind::Predict, body, [this, body](JobContext& ctx) { return predict_body(ctx, body); }));
  });

  http.Post("/jobs/augment", [this, accepted](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    const std::string ds_id = required_string(body, "dataset_id");
    const auto spec = augment::spec_from_json(body.value("spec", json::object()));
    spec.validate();
    const std::string name = optional_string(body, "name").value_or(ds_id + " augmented");
    ws.dataset(ds_id);
    accepted(res, jobs.submit(JobKind::Augment, {{"dataset_id", ds_id}, {"spec", augment::to_json(spec)}},
                              [this, ds_id, spec, name](JobContext&) {
                                const auto out = augment::augment_dataset(ws.labeled(ds_id), spec);
                                const std::string id = import_labeled(out, name, "augment:" + ds_id);
                                return ordered_json{{"dataset_id", id}, {"size", out.size()}};
                              }));
  });

  http.Post("/jobs/fetch", [this, accepted](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    json source_json = body.value("source", json::object());
    if (source_json.is_object() && !source_json.contains("rate_limit_rps") && cfg.tile_rate_limit > 0)
      source_json["rate_limit_rps"] = cfg.tile_rate_limit;
    const auto source = imagery::tile_source_from_json(source_json);
    source.validate();
    const auto area = imagery::area_from_json(body.value("area", json::object()));
    area.validate();
    const auto labels = label_set_from(body, "negative", "positive");
    const std::string name = optional_string(body, "name").value_or("fetch");
    accepted(res, jobs.submit(JobKind::Fetch, body, [this, source, area, labels, name](JobContext&) {
      const auto ps = imagery::fetch_area(source, area);
      std::vector<StoredImage> images;
      for (auto& in : inference::inputs_from(ps))
        images.push_back({{in.filename, std::nullopt, in.geo, in.bounds}, std::move(in.encoded)});
      ordered_json failures = ordered_json::array();
      for (const auto& f : ps.failures) failures.push_back({{"row", f.row}, {"col", f.col}, {"reason", f.reason}});
      const std::size_t n = images.size();
      const std::string id = ws.add_dataset(name, labels, std::move(images), "fetch");
      return ordered_json{{"dataset_id", id}, {"patches", n}, {"failures", std::move(failures)}};
    }));
  });
}

void Server::Impl::run_routes()
{
  http.Get("/runs", [this](const httplib::Request&, httplib::Response& res) {
    ordered_json out = ordered_json::array();
    for (const auto& id : ws.runs()) {
      const auto r = ws.run(id);
      out.push_back({{"id", id},
                     {"checkpoint_id", r->checkpoint_id},
                     {"mode", inference::to_string(r->mode)},
                     {"records", r->records.size()},
                     {"created_at", r->created_at},
                     {"source", r->source}});
    }
    send_json(res, 200, out);
  });

  http.Get(R"(/runs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    send_tagged_json(req, res, run_json(id, *ws.run(id)));
  });

  http.Post(R"(/runs/([^/]+)/filters)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const json body = parse_body(req);
    inference::PredictionRun run = *ws.run(id);
    std::vector<std::string> applied;
    auto number = [&](const char* field) {
      if (!body.at(field).is_number()) fail(ErrorKind::Config, std::string("field '") + field + "' must be a number");
      return body.at(field).get<double>();
    };
    if (body.contains("confidence") && !body.at("confidence").is_null()) {
      run = inference::filter_confidence(run, number("confidence"));
      applied.push_back("confidence>" + body.at("confidence").dump());
    }
    if (body.contains("significance") && !body.at("significance").is_null()) {
      run = inference::filter_significance(run, number("significance"));
      applied.push_back("significance>" + body.at("significance").dump());
    }
    if (body.contains("sample") && !body.at("sample").is_null()) {
      const auto& s = body.at("sample");
      if (!s.is_object() || !s.contains("k") || !s.at("k").is_number_unsigned())
        fail(ErrorKind::Config, "field 'sample.k' must be a non-negative integer");
      const auto seed = s.value("seed", std::uint64_t{0});
      run = inference::random_sample(run, s.at("k").get<std::size_t>(), seed);
      applied.push_back("sample(" + s.at("k").dump() + ", seed " + std::to_string(seed) + ")");
    }
    if (applied.empty()) fail(ErrorKind::Config, "give at least one of 'confidence', 'significance', 'sample'");
    std::string source = "run:" + id;
    for (const auto& a : applied) source += " | " + a;
    run.source = source;
    const std::string new_id = ws.add_run(run);
    res.set_header("Location", "/runs/" + new_id);
    send_json(res, 201, {{"run_id", new_id}, {"records", run.records.size()}, {"filters", applied}});
  });

  http.Post(R"(/runs/([^/]+)/records/(\d+)/toggle)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const json body = parse_body(req);
    std::lock_guard lock(run_mu);
    inference::PredictionRun run = *ws.run(id);
    const std::size_t i = parse_index(req.matches[2], run.records.size());
    if (body.contains("label") && !body.at("label").is_null()) {
      const dataset::LabelName label(required_string(body, "label"));
      run.labels.index_of(label);
      run.records[i].actual_or_chosen = label;
    } else {
      run = inference::toggle_label(run, i);
    }
    ws.replace_run(id, run);
    auto j = inference::to_json(run.records[i]);
    j["index"] = i;
    send_json(res, 200, j);
  });

  http.Get(R"(/runs/([^/]+)/records/(\d+)/image)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto run = ws.run(req.matches[1]);
    const auto& r = run->records.at(parse_index(req.matches[2], run->records.size()));
    const auto it = run->sources ? run->sources->find(r.source_ref) : inference::SourceStore::const_iterator{};
    if (!run->sources || it == run->sources->end()) throw NotFound("no stored image for record " + r.filename);
    send_tagged(req, res, as_string(it->second), image_type(r.source_ref));
  });

  http.Get(R"(/runs/([^/]+)/records/(\d+)/heatmap\.png)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto run = ws.run(id);
    const std::size_t i = parse_index(req.matches[2], run->records.size());
    const auto& r = run->records[i];
    const bool saliency = req.has_param("kind") && req.get_param_value("kind") == "saliency";
    if (req.has_param("kind") && !saliency && req.get_param_value("kind") != "overlay")
      fail(ErrorKind::Config, "query parameter 'kind' must be overlay or saliency");
    const double alpha = query_double(req, "alpha", 0.5);
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::Config, "query parameter 'alpha' must be within [0, 1]");
    char name[64];
    std::snprintf(name, sizeof name, "%zu-%s-%.3f.png", i, saliency ? "saliency" : "overlay", alpha);
    const fs::path cached = ws.run_dir(id) / "heatmaps" / name;
    {
      std::lock_guard lock(heat_mu);
      if (fs::exists(cached)) return send_tagged(req, res, as_string(read_file(cached)), "image/png");
    }
    const auto it = run->sources ? run->sources->find(r.source_ref) : inference::SourceStore::const_iterator{};
    if (!run->sources || it == run->sources->end()) throw NotFound("no stored image for record " + r.filename);
    const auto ck = ws.checkpoint(run->checkpoint_id);
    const RasterImage img = decode_image(it->second);
    const auto map = explain::occlusion_heatmap(*ck, img, inference::default_occlusion(std::min(img.width(), img.height())),
                                                cfg.predict_workers);
    const Bytes png = saliency ? explain::saliency_png(map) : encode_png(explain::render_overlay(img, map, alpha));
    {
      std::lock_guard lock(heat_mu);
      write_file(cached, png);
    }
    res.set_header("X-Significance-Pct", std::to_string(explain::significance(map)));
    send_tagged(req, res, as_string(png), "image/png");
  });

  http.Get(R"(/runs/([^/]+)/export\.(csv|json|html))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1], format = req.matches[2];
    const auto run = ws.run(id);
    res.set_header("Content-Disposition", "attachment; filename=\"" + id + "." + format + "\"");
    if (format == "csv") return send_tagged(req, res, exporting::to_csv(*run), "text/csv");
    if (format == "json") return send_tagged(req, res, exporting::to_json_text(*run), "application/json");
    send_tagged(req, res, exporting::to_html_map(*run, query_flag(req, "positive_only")), "text/html");
  });

  http.Post(R"(/runs/([^/]+)/to-dataset)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const json body = parse_body(req);
    const auto conv = inference::to_labeled_dataset(*ws.run(id));
    const std::string ds_id = import_labeled(conv.dataset, optional_string(body, "name").value_or("from " + id), "run:" + id);
    ordered_json failures = ordered_json::array();
    for (const auto& f : conv.failures) failures.push_back({{"filename", f.filename}, {"reason", f.reason}});
    res.set_header("Location", "/datasets/" + ds_id);
    send_json(res, 201, {{"dataset_id", ds_id}, {"size", conv.dataset.size()}, {"failures", std::move(failures)}});
  });
}

Server::Server(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}

Server::~Server() { stop(); }

int Server::start()
{
  auto& http = impl_->http;
  int port = impl_->cfg.port;
  if (port == 0) {
    port = http.bind_to_any_port(impl_->cfg.host);
  } else if (!http.bind_to_port(impl_->cfg.host, port)) {
    port = -1;
  }
  require(port > 0, ErrorKind::Io, "cannot bind " + impl_->cfg.host + ":" + std::to_string(impl_->cfg.port));
  impl_->listener = std::thread([&http] { http.listen_after_bind(); });
  http.wait_until_ready();
  return port;
}

void Server::run()
{
  require(impl_->http.listen(impl_->cfg.host, impl_->cfg.port), ErrorKind::Io,
          "cannot bind " + impl_->cfg.host + ":" + std::to_string(impl_->cfg.port));
}

void Server::stop()
{
  if (!impl_) return;
  impl_->jobs.shutdown();
  impl_->http.stop();
  if (impl_->listener.joinable()) impl_->listener.join();
}

Workspace& Server::workspace() { return impl_->ws; }

}  // namespace deepterra::service
