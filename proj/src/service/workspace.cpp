#include "deepterra/error.hpp"
#include "deepterra/service.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <mutex>

namespace deepterra::service {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::pair<std::string, int> parse_bind_addr(const std::string& addr)
{
  const auto colon = addr.rfind(':');
  require(colon != std::string::npos && colon + 1 < addr.size(), ErrorKind::Config,
          "BIND_ADDR: expected host:port, got '" + addr + "'");
  const std::string host = addr.substr(0, colon), port_text = addr.substr(colon + 1);
  int port = -1;
  try {
    std::size_t used = 0;
    port = std::stoi(port_text, &used);
    if (used != port_text.size()) port = -1;
  } catch (const std::exception&) {
  }
  require(port >= 0 && port <= 65535, ErrorKind::Config, "BIND_ADDR: invalid port '" + port_text + "'");
  return {host.empty() ? "0.0.0.0" : host, port};
}

ServiceConfig config_from_env(ServiceConfig cfg)
{
  if (const char* v = std::getenv("WORKSPACE_DIR"); v && *v) cfg.workspace = v;
  if (const char* v = std::getenv("BIND_ADDR"); v && *v) std::tie(cfg.host, cfg.port) = parse_bind_addr(v);
  if (const char* v = std::getenv("MAX_UPLOAD_MB"); v && *v) {
    char* end = nullptr;
    const long long mb = std::strtoll(v, &end, 10);
    require(*end == '\0' && mb > 0, ErrorKind::Config, "MAX_UPLOAD_MB: must be a positive integer");
    cfg.max_upload_mb = static_cast<std::size_t>(mb);
  }
  if (const char* v = std::getenv("TILE_RATE_LIMIT"); v && *v) {
    char* end = nullptr;
    const double rps = std::strtod(v, &end);
    require(*end == '\0' && rps >= 0.0, ErrorKind::Config, "TILE_RATE_LIMIT: must be a non-negative number");
    cfg.tile_rate_limit = rps;
  }
  return cfg;
}

std::size_t StoredDataset::labeled_count() const
{
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.label.has_value(); }));
}

ordered_json to_json(const StoredEntry& e)
{
  ordered_json j;
  j["filename"] = e.filename;
  j["label"] = e.label ? ordered_json(e.label->str()) : ordered_json(nullptr);
  j["lat"] = e.geo ? ordered_json(e.geo->lat()) : ordered_json(nullptr);
  j["lon"] = e.geo ? ordered_json(e.geo->lon()) : ordered_json(nullptr);
  if (e.bounds)
    j["bounds"] = {{"north", e.bounds->north}, {"south", e.bounds->south}, {"east", e.bounds->east}, {"west", e.bounds->west}};
  else
    j["bounds"] = nullptr;
  return j;
}

ordered_json to_json(const StoredDataset& d, bool with_entries)
{
  ordered_json j;
  j["id"] = d.id;
  j["name"] = d.name;
  j["origin"] = d.origin;
  j["labels"] = {{"negative", d.labels.negative.str()}, {"positive", d.labels.positive.str()}};
  std::size_t counts[2] = {0, 0};
  for (const auto& e : d.entries)
    if (e.label) ++counts[d.labels.index_of(*e.label)];
  j["size"] = d.entries.size();
  j["counts"] = {{d.labels.negative.str(), counts[0]}, {d.labels.positive.str(), counts[1]}, {"unlabeled", d.entries.size() - counts[0] - counts[1]}};
  if (with_entries) {
    ordered_json entries = ordered_json::array();
    for (const auto& e : d.entries) entries.push_back(to_json(e));
    j["entries"] = std::move(entries);
  }
  return j;
}

namespace {

StoredEntry entry_from_json(const json& j)
{
  StoredEntry e{j.at("filename").get<std::string>(), std::nullopt, std::nullopt, std::nullopt};
  if (j.contains("label") && !j.at("label").is_null()) e.label = dataset::LabelName(j.at("label").get<std::string>());
  if (j.contains("lat") && !j.at("lat").is_null()) e.geo = geo::GeoPoint(j.at("lat").get<double>(), j.at("lon").get<double>());
  if (j.contains("bounds") && !j.at("bounds").is_null()) {
    const auto& b = j.at("bounds");
    e.bounds = geo::GeoBounds{b.at("north").get<double>(), b.at("south").get<double>(), b.at("east").get<double>(),
                              b.at("west").get<double>()};
  }
  return e;
}

bool safe_name(const std::string& s)
{
  return !s.empty() && s.size() < 256 && s.find('/') == std::string::npos && s.find('\\') == std::string::npos &&
         s != "." && s != ".." && s.find('\0') == std::string::npos;
}

void require_id(const std::string& id)
{
  if (!safe_name(id)) throw NotFound("no such resource: " + id);
}

void write_text(const fs::path& p, const std::string& text)
{
  const fs::path tmp = p.string() + ".tmp";
  write_file(tmp, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  fs::rename(tmp, p);
}

json read_json(const fs::path& p)
{
  const Bytes raw = read_file(p);
  try {
    return json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    fail(ErrorKind::Structure, "corrupt workspace file " + p.string() + ": " + e.what());
  }
}

}  // namespace

Workspace::Workspace(fs::path root) : root_(std::move(root))
{
  for (const char* sub : {"datasets", "checkpoints", "runs", "cache"}) fs::create_directories(root_ / sub);
  auto scan = [&](const fs::path& dir, const std::string& prefix) {
    std::size_t max = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
      const std::string stem = e.path().stem().string();
      if (stem.rfind(prefix + "-", 0) == 0) {
        try {
          max = std::max<std::size_t>(max, std::stoul(stem.substr(prefix.size() + 1)));
        } catch (const std::exception&) {
        }
      }
    }
    counters_[prefix] = max;
  };
  scan(root_ / "datasets", "ds");
  scan(root_ / "checkpoints", "ck");
  scan(root_ / "runs", "run");
}

std::string Workspace::next_id(const std::string& prefix)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06zu", prefix.c_str(), ++counters_[prefix]);
  return buf;
}

void Workspace::write_dataset_json(const StoredDataset& d) const
{
  write_text(root_ / "datasets" / d.id / "dataset.json", to_json(d, true).dump(2) + "\n");
}

StoredDataset Workspace::read_dataset(const std::string& id) const
{
  require_id(id);
  const fs::path p = root_ / "datasets" / id / "dataset.json";
  if (!fs::exists(p)) throw NotFound("no such dataset: " + id);
  const json j = read_json(p);
  try {
    StoredDataset d{j.at("id").get<std::string>(), j.value("name", std::string()), j.value("origin", std::string()),
                    dataset::LabelSet(dataset::LabelName(j.at("labels").at("negative").get<std::string>()),
                                      dataset::LabelName(j.at("labels").at("positive").get<std::string>())),
                    {}};
    for (const auto& e : j.at("entries")) d.entries.push_back(entry_from_json(e));
    return d;
  } catch (const json::exception& e) {
    fail(ErrorKind::Structure, "corrupt dataset.json for " + id + ": " + e.what());
  }
}

std::string Workspace::add_dataset(const std::string& name, const dataset::LabelSet& labels,
                                   std::vector<StoredImage> images, const std::string& origin)
{
  std::vector<std::string> seen;
  for (const auto& img : images) {
    require(safe_name(img.entry.filename), ErrorKind::Naming, "unsafe image filename '" + img.entry.filename + "'");
    if (img.entry.label) labels.index_of(*img.entry.label);
    seen.push_back(img.entry.filename);
  }
  std::sort(seen.begin(), seen.end());
  require(std::adjacent_find(seen.begin(), seen.end()) == seen.end(), ErrorKind::Naming, "duplicate image filenames");

  std::unique_lock lock(mu_);
  const std::string id = next_id("ds");
  const fs::path dir = root_ / "datasets" / id;
  StoredDataset d{id, name, origin, labels, {}};
  for (auto& img : images) {
    write_file(dir / "images" / img.entry.filename, img.bytes);
    d.entries.push_back(std::move(img.entry));
  }
  fs::create_directories(dir);
  write_dataset_json(d);
  return id;
}

std::string Workspace::add_labeled(const dataset::LabeledDataset& ds, const std::string& name, const std::string& origin)
{
  std::vector<StoredImage> images;
  for (std::size_t c = 0; c < 2; ++c)
    for (const auto& e : ds.entries(c)) images.push_back({{e.filename, ds.labels().at(c), e.geo, std::nullopt}, e.encoded});
  std::sort(images.begin(), images.end(),
            [](const StoredImage& a, const StoredImage& b) { return a.entry.filename < b.entry.filename; });
  return add_dataset(name, ds.labels(), std::move(images), origin);
}

StoredDataset Workspace::dataset(const std::string& id) const
{
  std::shared_lock lock(mu_);
  return read_dataset(id);
}

std::vector<StoredDataset> Workspace::datasets() const
{
  std::shared_lock lock(mu_);
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(root_ / "datasets"))
    if (fs::exists(e.path() / "dataset.json")) ids.push_back(e.path().filename().string());
  std::sort(ids.begin(), ids.end());
  std::vector<StoredDataset> out;
  for (const auto& id : ids) out.push_back(read_dataset(id));
  return out;
}

StoredEntry Workspace::set_label(const std::string& id, const std::string& filename,
                                 std::optional<dataset::LabelName> label)
{
  std::unique_lock lock(mu_);
  StoredDataset d = read_dataset(id);
  auto it = std::find_if(d.entries.begin(), d.entries.end(), [&](const auto& e) { return e.filename == filename; });
  if (it == d.entries.end()) throw NotFound("no image " + filename + " in dataset " + id);
  if (label) d.labels.index_of(*label);
  it->label = std::move(label);
  write_dataset_json(d);
  return *it;
}

Bytes Workspace::image(const std::string& id, const std::string& filename) const
{
  require_id(id);
  if (!safe_name(filename)) throw NotFound("no such image: " + filename);
  const fs::path p = root_ / "datasets" / id / "images" / filename;
  if (!fs::exists(p)) throw NotFound("no image " + filename + " in dataset " + id);
  return read_file(p);
}

dataset::LabeledDataset Workspace::labeled(const std::string& id) const
{
  const StoredDataset d = dataset(id);
  std::vector<dataset::ImageEntry> classes[2];
  for (const auto& e : d.entries)
    if (e.label) classes[d.labels.index_of(*e.label)].push_back(dataset::make_entry(e.filename, image(id, e.filename), e.geo));
  const bool any_geo = std::any_of(d.entries.begin(), d.entries.end(), [](const auto& e) { return e.geo.has_value(); });
  return dataset::LabeledDataset(d.labels, std::move(classes[0]), std::move(classes[1]), any_geo);
}

std::vector<inference::RunInput> Workspace::run_inputs(const std::string& id) const
{
  const StoredDataset d = dataset(id);
  std::vector<inference::RunInput> out;
  for (const auto& e : d.entries) out.push_back({e.filename, image(id, e.filename), e.label, e.geo, e.bounds});
  return out;
}

std::string Workspace::add_checkpoint(const nn::Checkpoint& ckpt)
{
  std::unique_lock lock(mu_);
  const std::string id = next_id("ck");
  nn::save_checkpoint(ckpt, root_ / "checkpoints" / (id + ".dtck"));
  checkpoint_cache_[id] = std::make_shared<const nn::Checkpoint>(ckpt);
  return id;
}

std::filesystem::path Workspace::checkpoint_path(const std::string& id) const
{
  require_id(id);
  const fs::path p = root_ / "checkpoints" / (id + ".dtck");
  if (!fs::exists(p)) throw NotFound("no such checkpoint: " + id);
  return p;
}

std::shared_ptr<const nn::Checkpoint> Workspace::checkpoint(const std::string& id) const
{
  {
    std::shared_lock lock(mu_);
    if (auto it = checkpoint_cache_.find(id); it != checkpoint_cache_.end()) return it->second;
  }
  auto ck = std::make_shared<const nn::Checkpoint>(nn::load_checkpoint(checkpoint_path(id)));
  std::unique_lock lock(mu_);
  return checkpoint_cache_.emplace(id, std::move(ck)).first->second;
}

std::vector<std::string> Workspace::checkpoints() const
{
  std::shared_lock lock(mu_);
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(root_ / "checkpoints"))
    if (e.path().extension() == ".dtck") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::filesystem::path Workspace::run_dir(const std::string& id) const
{
  require_id(id);
  return root_ / "runs" / id;
}

std::string Workspace::add_run(const inference::PredictionRun& run)
{
  std::unique_lock lock(mu_);
  const std::string id = next_id("run");
  inference::save_run(run, run_dir(id));
  run_cache_[id] = std::make_shared<const inference::PredictionRun>(run);
  return id;
}

std::shared_ptr<const inference::PredictionRun> Workspace::run(const std::string& id) const
{
  {
    std::shared_lock lock(mu_);
    if (auto it = run_cache_.find(id); it != run_cache_.end()) return it->second;
  }
  if (!fs::exists(run_dir(id) / "run.json")) throw NotFound("no such run: " + id);
  auto r = std::make_shared<const inference::PredictionRun>(inference::load_run(run_dir(id)));
  std::unique_lock lock(mu_);
  return run_cache_.emplace(id, std::move(r)).first->second;
}

void Workspace::replace_run(const std::string& id, const inference::PredictionRun& run)
{
  std::unique_lock lock(mu_);
  if (!fs::exists(run_dir(id) / "run.json")) throw NotFound("no such run: " + id);
  inference::save_run(run, run_dir(id));
  run_cache_[id] = std::make_shared<const inference::PredictionRun>(run);
}

std::vector<std::string> Workspace::runs() const
{
  std::shared_lock lock(mu_);
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(root_ / "runs"))
    if (fs::exists(e.path() / "run.json")) ids.push_back(e.path().filename().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

void Workspace::save_jobs(const ordered_json& jobs) const
{
  std::unique_lock lock(mu_);
  write_text(root_ / "jobs.json", jobs.dump(2) + "\n");
}

json Workspace::load_jobs() const
{
  std::shared_lock lock(mu_);
  const fs::path p = root_ / "jobs.json";
  if (!fs::exists(p)) return json::array();
  return read_json(p);
}

}  // namespace deepterra::service
