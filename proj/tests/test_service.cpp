#include "doctest.h"

#include "runs_support.hpp"

#include "deepterra/archive.hpp"
#include "deepterra/error.hpp"
#include "deepterra/export.hpp"
#include "deepterra/service.hpp"

#include <chrono>
#include <thread>

#include "httplib.h"
#include "json.hpp"

using namespace deepterra;
using nlohmann::json;
using testsupport::TempDir;

namespace {

struct SseEvent {
  std::size_t id = 0;
  std::string type;
  json data;
};

std::vector<SseEvent> parse_sse(const std::string& text)
{
  std::vector<SseEvent> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find("\n\n", pos);
    if (end == std::string::npos) end = text.size();
    const std::string block = text.substr(pos, end - pos);
    pos = end + 2;
    SseEvent ev;
    bool any = false;
    std::size_t line_start = 0;
    while (line_start < block.size()) {
      auto nl = block.find('\n', line_start);
      if (nl == std::string::npos) nl = block.size();
      const std::string line = block.substr(line_start, nl - line_start);
      line_start = nl + 1;
      if (line.rfind("id: ", 0) == 0) ev.id = std::stoul(line.substr(4)), any = true;
      if (line.rfind("event: ", 0) == 0) ev.type = line.substr(7);
      if (line.rfind("data: ", 0) == 0) ev.data = json::parse(line.substr(6));
    }
    if (any) out.push_back(std::move(ev));
  }
  return out;
}

std::string tgz_of(const dataset::LabeledDataset& ds)
{
  const Bytes b = archive::write_tgz(dataset::to_tree(ds));
  return std::string(b.begin(), b.end());
}

std::string png_text(const RasterImage& img)
{
  const Bytes b = encode_png(img);
  return std::string(b.begin(), b.end());
}

class Service {
 public:
  explicit Service(const std::filesystem::path& ws)
  {
    service::ServiceConfig cfg;
    cfg.workspace = ws;
    cfg.port = 0;
    server_ = std::make_unique<service::Server>(cfg);
    port_ = server_->start();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(120, 0);
  }

  httplib::Client& cli() { return *client_; }

  json get_json(const std::string& path)
  {
    auto res = cli().Get(path);
    REQUIRE(res);
    INFO(path << " -> " << res->body);
    REQUIRE(res->status == 200);
    return json::parse(res->body);
  }

  httplib::Result post_json(const std::string& path, const json& body, httplib::Headers headers = {})
  {
    return cli().Post(path, headers, body.dump(), "application/json");
  }

  std::string upload(const dataset::LabeledDataset& ds)
  {
    auto res = cli().Post("/datasets?name=test", tgz_of(ds), "application/gzip");
    REQUIRE(res);
    INFO(res->body);
    REQUIRE(res->status == 201);
    return json::parse(res->body).at("id").get<std::string>();
  }

  std::string submit(const std::string& path, const json& body)
  {
    auto res = post_json(path, body);
    REQUIRE(res);
    INFO(res->body);
    REQUIRE(res->status == 202);
    return json::parse(res->body).at("job_id").get<std::string>();
  }

  json wait_job(const std::string& id, std::chrono::seconds timeout = std::chrono::seconds(120))
  {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      json j = get_json("/jobs/" + id);
      const std::string s = j.at("state");
      if (s == "done" || s == "failed" || s == "stopped") return j;
      REQUIRE(std::chrono::steady_clock::now() < deadline);
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }

  void wait_state(const std::string& id, const std::string& state)
  {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(60);
    while (get_json("/jobs/" + id).at("state") != state) {
      REQUIRE(std::chrono::steady_clock::now() < deadline);
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }

  std::vector<SseEvent> events(const std::string& id, std::size_t from = 0)
  {
    std::string text;
    auto res = cli().Get("/jobs/" + id + "/events?from=" + std::to_string(from), [&](const char* d, std::size_t n) {
      text.append(d, n);
      return true;
    });
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Content-Type") == "text/event-stream");
    return parse_sse(text);
  }

  std::vector<std::size_t> epochs(const std::string& id, std::size_t attempt)
  {
    std::vector<std::size_t> out;
    for (const auto& e : events(id))
      if (e.type == "epoch" && e.data.at("attempt") == attempt) out.push_back(e.data.at("epoch"));
    return out;
  }

  std::string control(const std::string& id, const std::string& cmd, int expected = 200)
  {
    auto res = post_json("/jobs/" + id + "/control", {{"command", cmd}});
    REQUIRE(res);
    INFO(res->body);
    CHECK(res->status == expected);
    return res->body;
  }

 private:
  std::unique_ptr<service::Server> server_;
  int port_ = 0;
  std::unique_ptr<httplib::Client> client_;
};

json small_model_json(std::size_t px) { return json::parse(nn::to_json(testsupport::small_model_spec(px)).dump()); }

json fast_config(std::size_t epochs)
{
  return {{"max_epochs", epochs}, {"batch_size", 8}, {"learning_rate", 0.01}, {"early_stopping_patience", 0},
          {"seed", 5}};
}

bool is_png(const std::string& body) { return body.size() > 8 && body.compare(1, 3, "PNG") == 0; }

}  // namespace

TEST_CASE("health, openapi and ETag revalidation")
{
  TempDir tmp("svc");
  Service svc(tmp.path());
  CHECK(svc.get_json("/health").at("status") == "ok");

  auto res = svc.cli().Get("/openapi.json");
  REQUIRE(res);
  const json doc = json::parse(res->body);
  CHECK(doc.at("openapi") == "3.0.3");
  for (const char* p : {"/datasets", "/jobs/train", "/jobs/{id}/events", "/jobs/{id}/control", "/jobs/predict",
                        "/runs/{id}/filters", "/runs/{id}/records/{index}/toggle",
                        "/runs/{id}/records/{index}/heatmap.png", "/runs/{id}/export.csv", "/runs/{id}/to-dataset"})
    CHECK_MESSAGE(doc.at("paths").contains(p), p);

  const std::string etag = res->get_header_value("ETag");
  REQUIRE_FALSE(etag.empty());
  auto again = svc.cli().Get("/openapi.json");
  CHECK(again->body == res->body);
  CHECK(again->get_header_value("ETag") == etag);
  auto revalidated = svc.cli().Get("/openapi.json", {{"If-None-Match", etag}});
  CHECK(revalidated->status == 304);
  CHECK(revalidated->body.empty());

  CHECK(svc.cli().Get("/datasets/ds-999999")->status == 404);
  CHECK(svc.cli().Get("/jobs/job-000042")->status == 404);
}

TEST_CASE("dataset upload, folder import and labeling")
{
  TempDir tmp("svc");
  TempDir folder("svcf");
  testsupport::write_small_folder(folder.path());
  const auto small = dataset::import_folder(folder.path());
  Service svc(tmp.path());

  SUBCASE("5-image tgz upload gives 201 and an id")
  {
    const std::string id = svc.upload(small);
    const json d = svc.get_json("/datasets/" + id);
    CHECK(d.at("size") == 5);
    CHECK(d.at("labels").at("positive") == "garbage");
    CHECK(d.at("counts").at("garbage") == 3);
    CHECK(d.at("counts").at("not_garbage") == 2);
    CHECK(svc.get_json("/datasets").size() == 1);
  }
  SUBCASE("bad archive gives 422")
  {
    auto res = svc.cli().Post("/datasets", std::string("definitely not gzip"), "application/gzip");
    REQUIRE(res);
    CHECK(res->status == 422);
    CHECK(json::parse(res->body).at("error").at("kind") == to_string(ErrorKind::Archive));
  }
  SUBCASE("malformed JSON body gives 400")
  {
    auto res = svc.cli().Post("/datasets", std::string("{nope"), "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
  }
  SUBCASE("folder import")
  {
    auto res = svc.post_json("/datasets", {{"folder", folder.path().string()}});
    REQUIRE(res);
    CHECK(res->status == 201);
    CHECK(json::parse(res->body).at("dataset").at("size") == 5);
  }
  SUBCASE("labels persist, last write wins, unknown filenames are 404")
  {
    const std::string id = svc.upload(small);
    const std::string path = "/datasets/" + id + "/labels";
    CHECK(svc.post_json(path, {{"filename", "g0.png"}, {"label", "not_garbage"}})->status == 200);
    CHECK(svc.post_json(path, {{"filename", "g0.png"}, {"label", "garbage"}})->status == 200);
    CHECK(svc.post_json(path, {{"filename", "g1.png"}, {"label", nullptr}})->status == 200);
    CHECK(svc.post_json(path, {{"filename", "missing.png"}, {"label", "garbage"}})->status == 404);
    CHECK(svc.post_json(path, {{"filename", "g0.png"}, {"label", "pool"}})->status == 422);
    CHECK(svc.post_json(path, {{"filename", "g0.png"}, {"label", "Bad Label"}})->status == 422);

    const json patches = svc.get_json("/datasets/" + id + "/patches");
    std::map<std::string, json> by_name;
    for (const auto& p : patches) by_name[p.at("filename")] = p.at("label");
    CHECK(by_name.at("g0.png") == "garbage");
    CHECK(by_name.at("g1.png").is_null());
    CHECK(by_name.at("n0.png") == "not_garbage");

    auto img = svc.cli().Get("/datasets/" + id + "/patches/g0.png");
    REQUIRE(img);
    CHECK(img->status == 200);
    CHECK(img->get_header_value("Content-Type") == "image/png");
    CHECK(is_png(img->body));

    auto tgz = svc.cli().Get("/datasets/" + id + "/export.tgz");
    REQUIRE(tgz);
    CHECK(tgz->status == 200);
    const auto exported = dataset::import_archive_bytes(Bytes(tgz->body.begin(), tgz->body.end()));
    CHECK(exported.size() == 4);
  }
}

TEST_CASE("labels survive a service restart")
{
  TempDir tmp("svc");
  TempDir folder("svcf");
  testsupport::write_small_folder(folder.path());
  std::string id;
  {
    Service svc(tmp.path());
    id = svc.upload(dataset::import_folder(folder.path()));
    CHECK(svc.post_json("/datasets/" + id + "/labels", {{"filename", "n1.png"}, {"label", "garbage"}})->status == 200);
  }
  Service svc(tmp.path());
  for (const auto& p : svc.get_json("/datasets/" + id + "/patches"))
    if (p.at("filename") == "n1.png") CHECK(p.at("label") == "garbage");
  CHECK(svc.upload(dataset::import_folder(folder.path())) != id);
}

TEST_CASE("url import returns 202 and a job that yields a dataset id")
{
  TempDir tmp("svc");
  TempDir folder("svcf");
  testsupport::write_small_folder(folder.path());
  const std::string archive = tgz_of(dataset::import_folder(folder.path()));

  httplib::Server origin;
  origin.Get("/data.tgz", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(archive, "application/gzip");
  });
  const int port = origin.bind_to_any_port("127.0.0.1");
  std::thread t([&] { origin.listen_after_bind(); });
  origin.wait_until_ready();

  {
    Service svc(tmp.path());
    const std::string job =
        svc.submit("/datasets", {{"url", "http://127.0.0.1:" + std::to_string(port) + "/data.tgz"}});
    const json done = svc.wait_job(job);
    REQUIRE(done.at("state") == "done");
    const std::string id = done.at("result").at("dataset_id");
    CHECK(svc.get_json("/datasets/" + id).at("size") == 5);
  }
  origin.stop();
  t.join();
}

TEST_CASE("training job streams epochs and ends with done and a checkpoint id")
{
  TempDir tmp("svc");
  Service svc(tmp.path());
  const std::string ds = svc.upload(testsupport::blob_dataset(20, 16, 77));

  const std::string job = svc.submit(
      "/jobs/train", {{"dataset_id", ds}, {"config", {{"max_epochs", 6}, {"batch_size", 8}, {"seed", 3}}}});
  const auto events = svc.events(job);
  REQUIRE_FALSE(events.empty());
  for (std::size_t i = 0; i < events.size(); ++i) CHECK(events[i].id == i);

  const auto& last = events.back();
  CHECK(last.type == "done");
  const std::string ck = last.data.at("result").at("checkpoint_id");
  CHECK(ck.rfind("ck-", 0) == 0);

  std::vector<std::size_t> epochs;
  for (const auto& e : events)
    if (e.type == "epoch") {
      epochs.push_back(e.data.at("epoch"));
      CHECK(e.data.at("train_loss").get<double>() >= 0.0);
      CHECK(e.data.at("val_accuracy").get<double>() >= 0.0);
      CHECK(e.data.at("val_accuracy").get<double>() <= 1.0);
    }
  REQUIRE_FALSE(epochs.empty());
  for (std::size_t i = 0; i < epochs.size(); ++i) CHECK(epochs[i] == i + 1);

  std::vector<std::string> states;
  for (const auto& e : events)
    if (e.type == "state") states.push_back(e.data.at("state"));
  CHECK(states == std::vector<std::string>{"queued", "running", "done"});

  const json result = svc.get_json("/jobs/" + job).at("result");
  CHECK(result.at("validation").at("confusion").is_object());
  CHECK(result.at("validation").at("metrics").contains("mcc"));
  const json meta = svc.get_json("/checkpoints/" + ck);
  CHECK(meta.at("history").size() == epochs.size());
  CHECK(svc.get_json("/checkpoints").size() == 1);
  auto file = svc.cli().Get("/checkpoints/" + ck + "/download");
  REQUIRE(file);
  CHECK(file->body.rfind("DTCK", 0) == 0);

  svc.control(job, "pause", 409);
  svc.control(job, "reset", 409);
  svc.control(job, "bogus", 409);
}

TEST_CASE("invalid train configuration is rejected with the field name")
{
  TempDir tmp("svc");
  Service svc(tmp.path());
  const std::string ds = svc.upload(testsupport::blob_dataset(4, 8, 1));
  auto res = svc.post_json("/jobs/train", {{"dataset_id", ds}, {"config", {{"batch_size", 0}}}});
  REQUIRE(res);
  CHECK(res->status == 422);
  CHECK(res->body.find("batch_size") != std::string::npos);
  res = svc.post_json("/jobs/train", {{"dataset_id", ds}, {"config", {{"epochs_typo", 3}}}});
  CHECK(res->status == 422);
  CHECK(res->body.find("epochs_typo") != std::string::npos);
  res = svc.post_json("/jobs/train", {{"dataset_id", "ds-424242"}, {"config", json::object()}});
  CHECK(res->status == 404);
}

TEST_CASE("pause and resume keep the epoch sequence contiguous; stop and reset rerun")
{
  TempDir tmp("svc");
  Service svc(tmp.path());
  const std::string ds = svc.upload(testsupport::blob_dataset(40, 8, 9));
  const json body{{"dataset_id", ds}, {"model", small_model_json(8)}, {"config", fast_config(60)}};

  SUBCASE("pause then resume")
  {
    const std::string job = svc.submit("/jobs/train", body);
    svc.wait_state(job, "running");
    svc.control(job, "pause");
    CHECK(svc.get_json("/jobs/" + job).at("state") == "paused");
    const double before = svc.get_json("/jobs/" + job).at("progress").at("fraction");
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
    const double during = svc.get_json("/jobs/" + job).at("progress").at("fraction");
    CHECK(during - before < 0.05);
    svc.control(job, "pause", 409);
    svc.control(job, "resume");
    const json done = svc.wait_job(job);
    CHECK(done.at("state") == "done");
    const auto epochs = svc.epochs(job, 1);
    REQUIRE(epochs.size() == 60);
    for (std::size_t i = 0; i < epochs.size(); ++i) CHECK(epochs[i] == i + 1);
  }
  SUBCASE("stop, then reset reruns from epoch 1")
  {
    const std::string job = svc.submit("/jobs/train", body);
    svc.wait_state(job, "running");
    svc.control(job, "stop");
    json stopped = svc.wait_job(job);
    CHECK(stopped.at("state") == "stopped");
    CHECK(stopped.at("result").at("stop_reason") == "stopped");
    svc.control(job, "resume", 409);
    svc.control(job, "reset");
    const json done = svc.wait_job(job);
    CHECK(done.at("state") == "done");
    CHECK(done.at("attempt") == 2);
    const auto epochs = svc.epochs(job, 2);
    REQUIRE(epochs.size() == 60);
    for (std::size_t i = 0; i < epochs.size(); ++i) CHECK(epochs[i] == i + 1);
    svc.control(job, "reset", 409);

    std::vector<std::string> states;
    for (const auto& e : svc.events(job))
      if (e.type == "state") states.push_back(e.data.at("state"));
    CHECK(states == std::vector<std::string>{"queued", "running", "stopped", "queued", "running", "done"});
  }
}

TEST_CASE("prediction flow: records, filters, toggles, heatmaps, exports")
{
  TempDir tmp("svc");
  Service svc(tmp.path());
  const std::string ds = svc.upload(testsupport::blob_dataset(10, 8, 21));
  const json trained = svc.wait_job(
      svc.submit("/jobs/train", {{"dataset_id", ds}, {"model", small_model_json(8)}, {"config", fast_config(15)}}));
  REQUIRE(trained.at("state") == "done");
  const std::string ck = trained.at("result").at("checkpoint_id");

  CHECK(svc.post_json("/jobs/predict", {{"checkpoint_id", "ck-777777"}, {"dataset_id", ds}})->status == 404);
  const json predicted = svc.wait_job(svc.submit("/jobs/predict", {{"checkpoint_id", ck}, {"dataset_id", ds}}));
  INFO(predicted.dump());
  REQUIRE(predicted.at("state") == "done");
  const std::string run_id = predicted.at("result").at("run_id");

  const json run = svc.get_json("/runs/" + run_id);
  CHECK(run.at("mode") == "test");
  REQUIRE(run.at("records").size() == 20);
  for (const auto& r : run.at("records")) {
    CHECK(r.at("confidence_pct").get<double>() >= 50.0);
    CHECK(r.at("confidence_pct").get<double>() <= 100.0);
    CHECK(r.at("significance_pct").is_number());
  }
  CHECK(run.at("summary").at("total") == 20);
  CHECK(run.at("summary").contains("confusion"));

  SUBCASE("confidence filter is strict and creates a new run")
  {
    const double threshold = run.at("records").at(0).at("confidence_pct");
    auto res = svc.post_json("/runs/" + run_id + "/filters", {{"confidence", threshold}});
    REQUIRE(res);
    CHECK(res->status == 201);
    const json filtered = svc.get_json("/runs/" + json::parse(res->body).at("run_id").get<std::string>());
    std::size_t expected = 0;
    for (const auto& r : run.at("records")) expected += r.at("confidence_pct").get<double>() > threshold;
    CHECK(filtered.at("records").size() == expected);
    for (const auto& r : filtered.at("records")) CHECK(r.at("confidence_pct").get<double>() > threshold);
    CHECK(svc.get_json("/runs/" + run_id).at("records").size() == 20);
  }
  SUBCASE("sampling is reproducible per seed")
  {
    auto a = svc.post_json("/runs/" + run_id + "/filters", {{"sample", {{"k", 5}, {"seed", 11}}}});
    auto b = svc.post_json("/runs/" + run_id + "/filters", {{"sample", {{"k", 5}, {"seed", 11}}}});
    const json ra = svc.get_json("/runs/" + json::parse(a->body).at("run_id").get<std::string>());
    const json rb = svc.get_json("/runs/" + json::parse(b->body).at("run_id").get<std::string>());
    CHECK(ra.at("records").size() == 5);
    auto names = [](const json& r) {
      std::vector<std::string> out;
      for (const auto& x : r.at("records")) out.push_back(x.at("filename"));
      return out;
    };
    CHECK(names(ra) == names(rb));
    CHECK(svc.post_json("/runs/" + run_id + "/filters", json::object())->status == 422);
  }
  SUBCASE("toggle flips the chosen class, once per idempotency key")
  {
    const std::string original = run.at("records").at(3).at("actual_or_chosen");
    const std::string path = "/runs/" + run_id + "/records/3/toggle";
    auto first = svc.cli().Post(path, {{"Idempotency-Key", "k-1"}}, "", "application/json");
    auto replay = svc.cli().Post(path, {{"Idempotency-Key", "k-1"}}, "", "application/json");
    REQUIRE(first);
    REQUIRE(replay);
    CHECK(first->status == 200);
    CHECK(replay->body == first->body);
    const std::string flipped = svc.get_json("/runs/" + run_id).at("records").at(3).at("actual_or_chosen");
    CHECK(flipped != original);
    CHECK(svc.cli().Post(path, {{"Idempotency-Key", "k-2"}}, "", "application/json")->status == 200);
    CHECK(svc.get_json("/runs/" + run_id).at("records").at(3).at("actual_or_chosen") == original);
    CHECK(svc.post_json(path, {{"label", "blob"}})->status == 200);
    CHECK(svc.post_json(path, {{"label", "blob"}})->status == 200);
    CHECK(svc.get_json("/runs/" + run_id).at("records").at(3).at("actual_or_chosen") == "blob");
    CHECK(svc.cli().Post("/runs/" + run_id + "/records/20/toggle", "", "application/json")->status == 404);
  }
  SUBCASE("heatmap and source image")
  {
    auto heat = svc.cli().Get("/runs/" + run_id + "/records/0/heatmap.png");
    REQUIRE(heat);
    CHECK(heat->status == 200);
    CHECK(is_png(heat->body));
    const RasterImage overlay = decode_image(Bytes(heat->body.begin(), heat->body.end()));
    CHECK(overlay.width() == 8);
    auto cached = svc.cli().Get("/runs/" + run_id + "/records/0/heatmap.png");
    CHECK(cached->body == heat->body);
    auto sal = svc.cli().Get("/runs/" + run_id + "/records/0/heatmap.png?kind=saliency");
    CHECK(sal->status == 200);
    CHECK(is_png(sal->body));
    auto img = svc.cli().Get("/runs/" + run_id + "/records/0/image");
    CHECK(img->status == 200);
    CHECK(is_png(img->body));
  }
  SUBCASE("exports")
  {
    auto csv = svc.cli().Get("/runs/" + run_id + "/export.csv");
    REQUIRE(csv);
    CHECK(csv->status == 200);
    CHECK(csv->body.substr(0, csv->body.find("\r\n")) == exporting::kCsvHeader);
    CHECK(exporting::parse_csv(csv->body).size() == 20);
    auto js = svc.cli().Get("/runs/" + run_id + "/export.json");
    CHECK(exporting::parse_json(js->body).records.size() == 20);
    auto html = svc.cli().Get("/runs/" + run_id + "/export.html");
    CHECK(html->status == 422);
  }
  SUBCASE("to-dataset files every record")
  {
    auto res = svc.post_json("/runs/" + run_id + "/to-dataset", {{"name", "reviewed"}});
    REQUIRE(res);
    CHECK(res->status == 201);
    const json made = json::parse(res->body);
    CHECK(made.at("size") == 20);
    CHECK(svc.get_json("/datasets/" + made.at("dataset_id").get<std::string>()).at("size") == 20);
  }
}

TEST_CASE("geo-tagged split, prediction and map export")
{
  TempDir tmp("svc");
  Service svc(tmp.path());

  auto empty = svc.cli().Post("/datasets/split?patch_px=200", png_text(testsupport::noise_image(199, 199, 1)),
                              "image/png");
  REQUIRE(empty);
  CHECK(empty->status == 201);
  CHECK(json::parse(empty->body).at("notice") == "0 patches");

  auto res = svc.cli().Post("/datasets/split?patch_px=8&lat=34.95&lon=33.05&side_m=16&negative=not_blob&positive=blob",
                            png_text(testsupport::noise_image(16, 16, 2)), "image/png");
  REQUIRE(res);
  INFO(res->body);
  REQUIRE(res->status == 201);
  const std::string split_id = json::parse(res->body).at("id");
  const json d = svc.get_json("/datasets/" + split_id);
  REQUIRE(d.at("size") == 4);
  for (const auto& e : d.at("entries")) {
    CHECK(e.at("lat").is_number());
    CHECK(e.at("bounds").is_object());
    CHECK(e.at("label").is_null());
  }

  const std::string ds = svc.upload(testsupport::blob_dataset(6, 8, 4));
  const json trained = svc.wait_job(
      svc.submit("/jobs/train", {{"dataset_id", ds}, {"model", small_model_json(8)}, {"config", fast_config(3)}}));
  REQUIRE(trained.at("state") == "done");
  const json predicted = svc.wait_job(svc.submit(
      "/jobs/predict",
      {{"checkpoint_id", trained.at("result").at("checkpoint_id")}, {"dataset_id", split_id}, {"significance", false}}));
  REQUIRE(predicted.at("state") == "done");
  const std::string run_id = predicted.at("result").at("run_id");
  const json run = svc.get_json("/runs/" + run_id);
  CHECK(run.at("mode") == "predict");
  REQUIRE(run.at("records").size() == 4);
  for (const auto& r : run.at("records")) CHECK(r.at("maps_link").get<std::string>().rfind("https://www.google.com/maps?q=", 0) == 0);

  auto html = svc.cli().Get("/runs/" + run_id + "/export.html");
  REQUIRE(html);
  CHECK(html->status == 200);
  CHECK(exporting::extract_html_data(html->body).at("features").size() == 4);
}

TEST_CASE("jobs persist across restarts")
{
  TempDir tmp("svc");
  std::string job;
  {
    Service svc(tmp.path());
    const std::string ds = svc.upload(testsupport::blob_dataset(4, 8, 3));
    job = svc.submit("/jobs/train", {{"dataset_id", ds}, {"model", small_model_json(8)}, {"config", fast_config(2)}});
    CHECK(svc.wait_job(job).at("state") == "done");
  }
  CHECK(std::filesystem::exists(tmp.path() / "jobs.json"));
  Service svc(tmp.path());
  const json j = svc.get_json("/jobs/" + job);
  CHECK(j.at("state") == "done");
  CHECK(j.at("result").at("checkpoint_id").is_string());
  CHECK(svc.events(job).back().type == "done");
  svc.control(job, "stop", 409);
}

TEST_CASE("configuration from the environment")
{
  CHECK(service::parse_bind_addr("0.0.0.0:9000") == std::pair<std::string, int>{"0.0.0.0", 9000});
  CHECK(service::parse_bind_addr(":8081").second == 8081);
  CHECK_THROWS_AS(service::parse_bind_addr("localhost"), deepterra::Error);
  CHECK_THROWS_AS(service::parse_bind_addr("h:99999"), deepterra::Error);
  ::setenv("MAX_UPLOAD_MB", "7", 1);
  ::setenv("TILE_RATE_LIMIT", "2.5", 1);
  ::setenv("BIND_ADDR", "127.0.0.1:7070", 1);
  const auto cfg = service::config_from_env();
  CHECK(cfg.max_upload_mb == 7);
  CHECK(cfg.tile_rate_limit == 2.5);
  CHECK(cfg.port == 7070);
  ::setenv("MAX_UPLOAD_MB", "lots", 1);
  CHECK_THROWS_AS(service::config_from_env(), deepterra::Error);
  ::unsetenv("MAX_UPLOAD_MB");
  ::unsetenv("TILE_RATE_LIMIT");
  ::unsetenv("BIND_ADDR");
}
