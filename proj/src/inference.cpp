#include "deepterra/inference.hpp"

#include "deepterra/error.hpp"
#include "deepterra/export.hpp"
#include "deepterra/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

namespace deepterra::inference {

using nlohmann::json;
using nlohmann::ordered_json;

const char* to_string(RunMode m) { return m == RunMode::Test ? "test" : "predict"; }

explain::OcclusionConfig default_occlusion(std::size_t side)
{
  explain::OcclusionConfig cfg;
  if (side < cfg.window_px) {
    cfg.window_px = std::max<std::size_t>(1, side / 4);
    cfg.stride_px = std::max<std::size_t>(1, cfg.window_px / 2);
  }
  return cfg;
}

namespace {

struct Outcome {
  std::optional<PredictionRecord> record;
  std::optional<RecordFailure> failure;
};

template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn)
{
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < n;) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!error) error = std::current_exception();
          }
        }
      });
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace

PredictionRun run(const nn::Checkpoint& ckpt, std::vector<RunInput> inputs, RunMode mode, const RunOptions& opts)
{
  require(!inputs.empty(), ErrorKind::Domain, "prediction run needs at least one input");
  const std::size_t side = ckpt.spec.input_px;
  const auto occlusion = opts.occlusion.value_or(default_occlusion(side));
  if (opts.compute_significance) occlusion.validate(side, side);

  auto store = std::make_shared<SourceStore>();
  for (const auto& in : inputs) {
    require(!store->count(in.filename), ErrorKind::Domain, "duplicate input filename " + in.filename);
    if (mode == RunMode::Test)
      require(in.actual.has_value(), ErrorKind::Domain, "test run input " + in.filename + " has no label");
    if (in.actual) ckpt.labels.index_of(*in.actual);
    (*store)[in.filename] = in.encoded;
  }

  // Decode up front so a size mismatch aborts before any model work.
  std::vector<std::optional<RasterImage>> images(inputs.size());
  std::vector<Outcome> outcomes(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    try {
      images[i] = decode_image(inputs[i].encoded);
    } catch (const Error& e) {
      outcomes[i].failure = RecordFailure{inputs[i].filename, e.what()};
      continue;
    }
    require(images[i]->width() == side && images[i]->height() == side, ErrorKind::Domain,
            inputs[i].filename + " is " + std::to_string(images[i]->width()) + "x" +
                std::to_string(images[i]->height()) + " but the model expects " + std::to_string(side) + "x" +
                std::to_string(side));
  }

  std::atomic<std::size_t> done{0};
  std::mutex progress_mu;
  parallel_for(inputs.size(), opts.workers, [&](std::size_t i) {
    if (images[i]) {
      const auto& in = inputs[i];
      const auto p = nn::predict_proba(ckpt, *images[i]);
      const std::size_t cls = p.second > p.first ? 1 : 0;
      PredictionRecord r{in.filename,
                         ckpt.labels.at(cls),
                         in.actual,
                         100.0 * std::max(p.first, p.second),
                         std::nullopt,
                         in.geo,
                         in.geo ? std::optional(exporting::maps_link(*in.geo)) : std::nullopt,
                         in.bounds,
                         in.filename};
      if (opts.compute_significance)
        r.significance_pct =
            explain::significance(explain::occlusion_heatmap(ckpt, *images[i], occlusion), opts.significance_threshold);
      outcomes[i].record = std::move(r);
    }
    const std::size_t n = ++done;
    if (opts.progress) {
      std::lock_guard lock(progress_mu);
      opts.progress(n, inputs.size());
    }
  });

  PredictionRun out{opts.checkpoint_id, mode, ckpt.labels, {}, opts.created_at, opts.source, {}, store};
  for (auto& o : outcomes) {
    if (o.record) out.records.push_back(std::move(*o.record));
    if (o.failure) out.failures.push_back(std::move(*o.failure));
  }
  return out;
}

PredictionRun run(const nn::Checkpoint& ckpt, const dataset::LabeledDataset& ds, const RunOptions& opts)
{
  require(ds.labels() == ckpt.labels, ErrorKind::Domain,
          "dataset labels (" + ds.labels().negative.str() + ", " + ds.labels().positive.str() +
              ") do not match the checkpoint's (" + ckpt.labels.negative.str() + ", " + ckpt.labels.positive.str() +
              ")");
  std::vector<RunInput> inputs;
  for (std::size_t c = 0; c < 2; ++c)
    for (const auto& e : ds.entries(c)) inputs.push_back({e.filename, e.encoded, ds.labels().at(c), e.geo, {}});
  std::sort(inputs.begin(), inputs.end(), [](const RunInput& a, const RunInput& b) { return a.filename < b.filename; });
  return run(ckpt, std::move(inputs), RunMode::Test, opts);
}

PredictionRun run(const nn::Checkpoint& ckpt, const std::vector<dataset::ImageEntry>& unlabeled, const RunOptions& opts)
{
  std::vector<RunInput> inputs;
  for (const auto& e : unlabeled) inputs.push_back({e.filename, e.encoded, std::nullopt, e.geo, {}});
  return run(ckpt, std::move(inputs), RunMode::Predict, opts);
}

std::vector<RunInput> inputs_from(const imagery::PatchSet& patches)
{
  struct Pos {
    std::size_t row, col;
  };
  std::vector<Pos> pos;
  std::size_t extent = 0;
  for (std::size_t i = 0; i < patches.patches.size(); ++i) {
    const auto& p = patches.patches[i];
    Pos at{0, i};
    if (p.geo) {
      at = {p.geo->row, p.geo->col};
    } else if (auto h = p.source_id.find("#r"); h != std::string::npos) {
      unsigned long r = 0, c = 0;
      if (std::sscanf(p.source_id.c_str() + h, "#r%luc%lu", &r, &c) == 2) at = {r, c};
    }
    extent = std::max({extent, at.row + 1, at.col + 1});
    pos.push_back(at);
  }
  std::vector<RunInput> out;
  for (std::size_t i = 0; i < patches.patches.size(); ++i) {
    const auto& p = patches.patches[i];
    RunInput in{imagery::tile_filename(pos[i].row, pos[i].col, extent), encode_png(p.image), {}, {}, {}};
    if (p.geo) {
      in.geo = p.geo->center;
      in.bounds = p.geo->bounds;
    }
    out.push_back(std::move(in));
  }
  return out;
}

PredictionRun run(const nn::Checkpoint& ckpt, const imagery::PatchSet& patches, const RunOptions& opts)
{
  return run(ckpt, inputs_from(patches), RunMode::Predict, opts);
}

RunSummary summarize(const PredictionRun& run)
{
  RunSummary s;
  s.total = run.records.size();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& r : run.records) {
    const std::size_t cls = run.labels.index_of(r.predicted);
    ++s.counts[cls];
    if (run.mode == RunMode::Test && r.actual_or_chosen) pairs.emplace_back(cls, run.labels.index_of(*r.actual_or_chosen));
  }
  if (s.total > 0)
    for (std::size_t c = 0; c < 2; ++c) s.pct[c] = 100.0 * static_cast<double>(s.counts[c]) / static_cast<double>(s.total);
  if (run.mode == RunMode::Test && !pairs.empty()) {
    s.confusion = metrics::confusion(pairs);
    s.report = metrics::report(*s.confusion);
  }
  return s;
}

std::string display_pct(double pct) { return std::to_string(std::llround(pct)) + "%"; }

namespace {

template <typename Pred>
PredictionRun keep_if(const PredictionRun& run, Pred pred)
{
  PredictionRun out = run;
  out.records.clear();
  std::copy_if(run.records.begin(), run.records.end(), std::back_inserter(out.records), pred);
  return out;
}

void check_threshold(double min_pct)
{
  require(min_pct >= 0.0 && min_pct <= 100.0, ErrorKind::Domain, "filter threshold must lie in [0, 100]");
}

}  // namespace

PredictionRun filter_confidence(const PredictionRun& run, double min_pct)
{
  check_threshold(min_pct);
  return keep_if(run, [&](const PredictionRecord& r) { return r.confidence_pct > min_pct; });
}

PredictionRun filter_significance(const PredictionRun& run, double min_pct)
{
  check_threshold(min_pct);
  return keep_if(run, [&](const PredictionRecord& r) { return r.significance_pct && *r.significance_pct > min_pct; });
}

PredictionRun random_sample(const PredictionRun& run, std::size_t k, std::uint64_t seed)
{
  const std::size_t n = run.records.size();
  require(k <= n, ErrorKind::Domain, "sample size " + std::to_string(k) + " exceeds run size " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng::Stream s(rng::mix(seed, {0x5A3D1E}));
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + s.below(n - i)]);
  std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  PredictionRun out = run;
  out.records.clear();
  for (std::size_t i = 0; i < k; ++i) out.records.push_back(run.records[idx[i]]);
  return out;
}

PredictionRun toggle_label(const PredictionRun& run, std::size_t index)
{
  require(index < run.records.size(), ErrorKind::Domain, "record index " + std::to_string(index) + " out of range");
  PredictionRun out = run;
  auto& r = out.records[index];
  r.actual_or_chosen = run.labels.other(r.effective_label());
  return out;
}

DatasetConversion to_labeled_dataset(const PredictionRun& run)
{
  std::array<std::vector<dataset::ImageEntry>, 2> classes;
  std::vector<RecordFailure> failures;
  bool any_geo = false;
  for (const auto& r : run.records) {
    const auto it = run.sources ? run.sources->find(r.source_ref) : SourceStore::const_iterator{};
    if (!run.sources || it == run.sources->end()) {
      failures.push_back({r.filename, "source image is not available"});
      continue;
    }
    try {
      classes[run.labels.index_of(r.effective_label())].push_back(dataset::make_entry(r.filename, it->second, r.geo));
      any_geo = any_geo || r.geo.has_value();
    } catch (const Error& e) {
      failures.push_back({r.filename, e.what()});
    }
  }
  return {dataset::LabeledDataset(run.labels, std::move(classes[0]), std::move(classes[1]), any_geo),
          std::move(failures)};
}

ordered_json to_json(const PredictionRecord& r)
{
  ordered_json j;
  j["filename"] = r.filename;
  j["predicted"] = r.predicted.str();
  j["actual_or_chosen"] = r.actual_or_chosen ? ordered_json(r.actual_or_chosen->str()) : ordered_json(nullptr);
  j["confidence_pct"] = r.confidence_pct;
  j["significance_pct"] = r.significance_pct ? ordered_json(*r.significance_pct) : ordered_json(nullptr);
  j["lat"] = r.geo ? ordered_json(r.geo->lat()) : ordered_json(nullptr);
  j["lon"] = r.geo ? ordered_json(r.geo->lon()) : ordered_json(nullptr);
  j["maps_link"] = r.maps_link ? ordered_json(*r.maps_link) : ordered_json(nullptr);
  if (r.bounds)
    j["bounds"] = {{"north", r.bounds->north}, {"south", r.bounds->south}, {"east", r.bounds->east}, {"west", r.bounds->west}};
  else
    j["bounds"] = nullptr;
  j["source_ref"] = r.source_ref;
  return j;
}

PredictionRecord record_from_json(const json& j)
{
  auto opt_label = [&](const char* k) -> std::optional<dataset::LabelName> {
    if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
    return dataset::LabelName(j.at(k).get<std::string>());
  };
  PredictionRecord r{.filename = j.at("filename").get<std::string>(),
                     .predicted = dataset::LabelName(j.at("predicted").get<std::string>())};
  r.actual_or_chosen = opt_label("actual_or_chosen");
  r.confidence_pct = j.at("confidence_pct").get<double>();
  if (j.contains("significance_pct") && !j.at("significance_pct").is_null())
    r.significance_pct = j.at("significance_pct").get<double>();
  if (j.contains("lat") && !j.at("lat").is_null())
    r.geo = geo::GeoPoint(j.at("lat").get<double>(), j.at("lon").get<double>());
  if (j.contains("maps_link") && !j.at("maps_link").is_null()) r.maps_link = j.at("maps_link").get<std::string>();
  if (j.contains("bounds") && !j.at("bounds").is_null()) {
    const auto& b = j.at("bounds");
    r.bounds = geo::GeoBounds{b.at("north").get<double>(), b.at("south").get<double>(), b.at("east").get<double>(),
                              b.at("west").get<double>()};
  }
  r.source_ref = j.value("source_ref", r.filename);
  return r;
}

ordered_json to_json(const RunSummary& s)
{
  ordered_json j;
  j["total"] = s.total;
  j["counts"] = {s.counts[0], s.counts[1]};
  j["pct"] = {s.pct[0], s.pct[1]};
  j["confusion"] = s.confusion ? metrics::to_json(*s.confusion) : ordered_json(nullptr);
  j["metrics"] = s.report ? metrics::to_json(*s.report) : ordered_json(nullptr);
  return j;
}

namespace {

bool safe_ref(const std::string& ref)
{
  return !ref.empty() && ref.find('/') == std::string::npos && ref.find('\\') == std::string::npos && ref != "." &&
         ref != "..";
}

}  // namespace

void save_run(const PredictionRun& run, const std::filesystem::path& dir)
{
  ordered_json j;
  j["checkpoint_id"] = run.checkpoint_id;
  j["mode"] = to_string(run.mode);
  j["labels"] = {{"negative", run.labels.negative.str()}, {"positive", run.labels.positive.str()}};
  j["created_at"] = run.created_at;
  j["source"] = run.source;
  ordered_json records = ordered_json::array();
  for (const auto& r : run.records) records.push_back(to_json(r));
  j["records"] = std::move(records);
  ordered_json failures = ordered_json::array();
  for (const auto& f : run.failures) failures.push_back({{"filename", f.filename}, {"reason", f.reason}});
  j["failures"] = std::move(failures);
  j["summary"] = to_json(summarize(run));
  if (run.sources)
    for (const auto& r : run.records) {
      const auto it = run.sources->find(r.source_ref);
      if (it == run.sources->end()) continue;
      require(safe_ref(r.source_ref), ErrorKind::Io, "unsafe source reference " + r.source_ref);
      write_file(dir / "images" / r.source_ref, it->second);
    }
  const std::string text = j.dump(2) + "\n";
  write_file(dir / "run.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

PredictionRun load_run(const std::filesystem::path& dir)
{
  const Bytes raw = read_file(dir / "run.json");
  json j;
  try {
    j = json::parse(raw.begin(), raw.end());
    const auto& labels = j.at("labels");
    PredictionRun run{j.at("checkpoint_id").get<std::string>(),
                      j.at("mode").get<std::string>() == "test" ? RunMode::Test : RunMode::Predict,
                      dataset::LabelSet(dataset::LabelName(labels.at("negative").get<std::string>()),
                                        dataset::LabelName(labels.at("positive").get<std::string>())),
                      {},
                      j.value("created_at", std::string()),
                      j.value("source", std::string()),
                      {},
                      nullptr};
    auto store = std::make_shared<SourceStore>();
    for (const auto& rj : j.at("records")) {
      auto r = record_from_json(rj);
      run.labels.index_of(r.predicted);
      if (safe_ref(r.source_ref) && !store->count(r.source_ref)) {
        const auto path = dir / "images" / r.source_ref;
        if (std::filesystem::exists(path)) (*store)[r.source_ref] = read_file(path);
      }
      run.records.push_back(std::move(r));
    }
    for (const auto& f : j.value("failures", json::array()))
      run.failures.push_back({f.at("filename").get<std::string>(), f.at("reason").get<std::string>()});
    run.sources = std::move(store);
    return run;
  } catch (const json::exception& e) {
    fail(ErrorKind::Structure, "malformed run.json: " + std::string(e.what()));
  }
}

}  // namespace deepterra::inference
