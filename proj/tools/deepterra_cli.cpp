// deepterra: headless front door to each pipeline stage.
//
// Exit codes: 0 success, 2 usage, 3 data error, 4 I/O.

#include "deepterra/augment.hpp"
#include "deepterra/csv.hpp"
#include "deepterra/dataset.hpp"
#include "deepterra/error.hpp"
#include "deepterra/export.hpp"
#include "deepterra/geogrid.hpp"
#include "deepterra/imagery.hpp"
#include "deepterra/inference.hpp"
#include "deepterra/nn/train.hpp"
#include "deepterra/service.hpp"

#include <cstdio>
#include <ctime>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace deepterra;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitIo = 4;

struct Common {
  bool json_out = false;
};

geo::GeoPoint parse_latlon(const std::string& text)
{
  const auto comma = text.find(',');
  require(comma != std::string::npos, ErrorKind::Config, "--ne expects LAT,LON, got '" + text + "'");
  try {
    std::size_t a = 0, b = 0;
    const double lat = std::stod(text.substr(0, comma), &a);
    const double lon = std::stod(text.substr(comma + 1), &b);
    require(a == comma && b == text.size() - comma - 1, ErrorKind::Config, "--ne expects LAT,LON, got '" + text + "'");
    return geo::GeoPoint(lat, lon);
  } catch (const std::logic_error&) {
    fail(ErrorKind::Config, "--ne expects LAT,LON, got '" + text + "'");
  }
}

json read_json_file(const fs::path& p)
{
  const Bytes raw = read_file(p);
  try {
    return json::parse(raw.begin(), raw.end());
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, p.string() + ": malformed JSON: " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text)
{
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string now_utc()
{
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Writes patches as PNGs plus a manifest carrying their coordinates.
std::size_t write_patches(const imagery::PatchSet& ps, const fs::path& out)
{
  fs::create_directories(out);
  std::vector<dataset::ManifestRow> rows;
  for (const auto& in : inference::inputs_from(ps)) {
    write_file(out / in.filename, in.encoded);
    rows.push_back({in.filename, "", in.geo});
  }
  if (std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.geo.has_value(); }))
    write_text(out / "manifest.csv", dataset::format_manifest(rows));
  return rows.size();
}

void print_summary(const inference::PredictionRun& run, bool as_json)
{
  const auto s = inference::summarize(run);
  if (as_json) {
    std::cout << inference::to_json(s).dump(2) << "\n";
    return;
  }
  std::cout << s.total << " records\n";
  for (std::size_t c = 0; c < 2; ++c)
    std::cout << "  " << run.labels.at(c).str() << ": " << s.counts[c] << " (" << inference::display_pct(s.pct[c])
              << ")\n";
  if (s.report) {
    const auto& m = *s.report;
    char buf[256];
    std::snprintf(buf, sizeof buf, "  accuracy %.4f  precision %.4f  recall %.4f  f1 %.4f  mcc %.4f\n", m.accuracy,
                  m.precision, m.recall, m.f1, m.mcc);
    std::cout << buf;
  }
  if (!run.failures.empty()) std::cout << "  " << run.failures.size() << " inputs failed\n";
}

int cmd_grid(const geo::AreaSpec& area, const std::optional<fs::path>& out, const Common& c)
{
  const auto grid = geo::build_grid(area);
  std::string text;
  if (c.json_out) {
    ordered_json rows = ordered_json::array();
    for (const auto& cell : grid.cells())
      rows.push_back({{"row", cell.row},
                      {"col", cell.col},
                      {"filename", imagery::tile_filename(cell.row, cell.col, area.grid_n)},
                      {"lat", cell.center.lat()},
                      {"lon", cell.center.lon()},
                      {"north", cell.bounds.north},
                      {"south", cell.bounds.south},
                      {"east", cell.bounds.east},
                      {"west", cell.bounds.west},
                      {"patch_px", area.patch_px}});
    text = rows.dump(2) + "\n";
  } else {
    text = csv::format_row({"row", "col", "filename", "lat", "lon", "north", "south", "east", "west", "patch_px"});
    for (const auto& cell : grid.cells())
      text += csv::format_row({std::to_string(cell.row), std::to_string(cell.col),
                               imagery::tile_filename(cell.row, cell.col, area.grid_n), csv::fixed(cell.center.lat(), 6),
                               csv::fixed(cell.center.lon(), 6), csv::fixed(cell.bounds.north, 6),
                               csv::fixed(cell.bounds.south, 6), csv::fixed(cell.bounds.east, 6),
                               csv::fixed(cell.bounds.west, 6), std::to_string(area.patch_px)});
  }
  if (out)
    write_text(*out, text);
  else
    std::cout << text;
  return 0;
}

nn::TrainConfig load_train_config(const std::optional<fs::path>& file, const json& overrides)
{
  json j = file ? read_json_file(*file) : json::object();
  require(j.is_object(), ErrorKind::Config, "train config must be a JSON object");
  for (const auto& [k, v] : overrides.items()) j[k] = v;
  auto cfg = nn::train_config_from_json(j);
  cfg.validate();
  return cfg;
}

inference::PredictionRun run_folder(const nn::Checkpoint& ckpt, const fs::path& in, inference::RunMode mode,
                                    const inference::RunOptions& opts, std::vector<std::string>& warnings)
{
  if (dataset::looks_labeled(in)) {
    const auto ds = dataset::import_folder(in, {}, &warnings);
    if (mode == inference::RunMode::Test) return inference::run(ckpt, ds, opts);
    std::vector<dataset::ImageEntry> all;
    for (std::size_t c = 0; c < 2; ++c)
      for (const auto& e : ds.entries(c)) all.push_back(e);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.filename < b.filename; });
    return inference::run(ckpt, all, opts);
  }
  require(mode == inference::RunMode::Predict, ErrorKind::Structure,
          in.string() + " is not a labeled dataset folder; test runs need class directories");
  return inference::run(ckpt, dataset::import_unlabeled_folder(in, &warnings), opts);
}

void print_warnings(const std::vector<std::string>& warnings)
{
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"deepterra: geospatial patch classification pipeline"};
  app.require_subcommand(1);
  Common common;
  app.add_flag("--json", common.json_out, "Machine-readable output");

  // grid
  auto* grid = app.add_subcommand("grid", "Print the patch grid manifest for an area");
  std::string ne;
  double side_m = 1000.0;
  std::size_t grid_n = 36, patch_px = 200;
  std::optional<std::string> out_file;
  grid->add_option("--ne", ne, "North-east corner LAT,LON")->required();
  grid->add_option("--side-m", side_m, "Area side in metres");
  grid->add_option("--n", grid_n, "Cells per side");
  grid->add_option("--patch-px", patch_px, "Patch side in pixels");
  grid->add_option("--out", out_file, "Write to a file instead of stdout");

  // fetch
  auto* fetch = app.add_subcommand("fetch", "Fetch an area's tiles from a tile source");
  std::string source_cfg, out_dir;
  double rate_limit = -1.0;
  fetch->add_option("--source", source_cfg, "Tile source JSON config")->required();
  fetch->add_option("--ne", ne, "North-east corner LAT,LON")->required();
  fetch->add_option("--side-m", side_m, "Area side in metres");
  fetch->add_option("--n", grid_n, "Cells per side");
  fetch->add_option("--patch-px", patch_px, "Patch side in pixels");
  fetch->add_option("--rate-limit", rate_limit, "Requests per second (overrides the config)");
  fetch->add_option("--out", out_dir, "Output folder")->required();

  // split
  auto* split = app.add_subcommand("split", "Cut an image into square patches");
  std::string image_file;
  std::optional<std::string> split_ne;
  split->add_option("--image", image_file, "Source image")->required();
  split->add_option("--patch-px", patch_px, "Patch side in pixels");
  split->add_option("--ne", split_ne, "Geo-tag patches from this north-east corner LAT,LON");
  split->add_option("--side-m", side_m, "Area side in metres when geo-tagging");
  split->add_option("--out", out_dir, "Output folder")->required();

  // augment
  auto* aug = app.add_subcommand("augment", "Write an augmented copy of a labeled dataset");
  std::string in_dir, spec_file;
  std::optional<int> copies;
  std::optional<std::uint64_t> aug_seed;
  std::size_t workers = 1;
  aug->add_option("--in", in_dir, "Labeled dataset folder")->required();
  aug->add_option("--spec", spec_file, "Augmentation spec JSON")->required();
  aug->add_option("--copies", copies, "Override copies_per_image");
  aug->add_option("--seed", aug_seed, "Override seed");
  aug->add_option("--workers", workers, "Worker threads");
  aug->add_option("--out", out_dir, "Output folder")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a classifier");
  std::optional<std::string> config_file, model_file;
  std::string model_out;
  std::optional<std::size_t> epochs, batch, patience;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  train->add_option("--in", in_dir, "Labeled dataset folder")->required();
  train->add_option("--config", config_file, "Train config JSON");
  train->add_option("--model", model_file, "Model spec JSON (default: the configured architecture)");
  train->add_option("--epochs", epochs, "Override max_epochs");
  train->add_option("--batch-size", batch, "Override batch_size");
  train->add_option("--patience", patience, "Override early_stopping_patience");
  train->add_option("--lr", lr, "Override learning_rate");
  train->add_option("--seed", seed, "Override seed");
  train->add_option("--out", model_out, "Checkpoint path")->required();

  // test
  auto* test = app.add_subcommand("test", "Evaluate a checkpoint on a labeled dataset");
  std::string model_in;
  std::optional<std::string> report_file, run_out;
  bool no_significance = false;
  test->add_option("--model", model_in, "Checkpoint")->required();
  test->add_option("--in", in_dir, "Labeled dataset folder")->required();
  test->add_option("--report", report_file, "Write confusion matrix and metrics JSON");
  test->add_option("--run", run_out, "Also save the run directory");
  test->add_flag("--no-significance", no_significance, "Skip occlusion significance");
  test->add_option("--workers", workers, "Worker threads");

  // predict
  auto* predict = app.add_subcommand("predict", "Classify a folder of images");
  predict->add_option("--model", model_in, "Checkpoint")->required();
  predict->add_option("--in", in_dir, "Image folder (flat with optional manifest.csv, or labeled)")->required();
  predict->add_option("--out", out_dir, "Run directory")->required();
  predict->add_flag("--no-significance", no_significance, "Skip occlusion significance");
  predict->add_option("--workers", workers, "Worker threads");

  // export
  auto* exp = app.add_subcommand("export", "Export a run as CSV, JSON or an HTML map");
  std::string run_dir, format;
  bool positive_only = false;
  exp->add_option("--run", run_dir, "Run directory")->required();
  exp->add_option("--format", format, "csv, json or html")->required()->check(CLI::IsMember({"csv", "json", "html"}));
  exp->add_option("--out", out_dir, "Output file")->required();
  exp->add_flag("--positive-only", positive_only, "HTML: include positive records only");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  std::optional<std::string> workspace, bind;
  std::optional<std::size_t> max_upload;
  serve->add_option("--workspace", workspace, "Workspace directory (WORKSPACE_DIR)");
  serve->add_option("--bind", bind, "host:port (BIND_ADDR)");
  serve->add_option("--max-upload-mb", max_upload, "Upload cap in MiB (MAX_UPLOAD_MB)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*grid) {
      geo::AreaSpec area{parse_latlon(ne), side_m, grid_n, patch_px};
      area.validate();
      return cmd_grid(area, out_file ? std::optional<fs::path>(*out_file) : std::nullopt, common);
    }
    if (*fetch) {
      json src = read_json_file(source_cfg);
      if (rate_limit >= 0 && src.is_object()) src["rate_limit_rps"] = rate_limit;
      const auto source = imagery::tile_source_from_json(src);
      source.validate();
      geo::AreaSpec area{parse_latlon(ne), side_m, grid_n, patch_px};
      area.validate();
      const auto ps = imagery::fetch_area(source, area);
      const std::size_t n = write_patches(ps, out_dir);
      for (const auto& f : ps.failures) std::cerr << "warning: tile r" << f.row << " c" << f.col << ": " << f.reason << "\n";
      if (common.json_out)
        std::cout << ordered_json{{"patches", n}, {"failures", ps.failures.size()}}.dump() << "\n";
      else
        std::cout << n << " patches, " << ps.failures.size() << " failures\n";
      return 0;
    }
    if (*split) {
      const RasterImage img = load_image(image_file);
      auto ps = imagery::split_image(img, patch_px, fs::path(image_file).filename().string());
      if (split_ne) {
        const std::size_t n = img.width() / patch_px;
        require(img.height() / patch_px == n, ErrorKind::Domain, "geo-tagging needs a square patch grid");
        geo::AreaSpec area{parse_latlon(*split_ne), side_m, n, patch_px};
        if (n > 0) {
          area.validate();
          ps = imagery::attach_geo(std::move(ps), geo::GeoPatchGrid(area));
        }
      }
      const std::size_t n = write_patches(ps, out_dir);
      if (common.json_out)
        std::cout << ordered_json{{"patches", n}, {"patch_px", patch_px}}.dump() << "\n";
      else
        std::cout << n << " patches\n";
      return 0;
    }
    if (*aug) {
      json j = read_json_file(spec_file);
      if (copies) j["copies_per_image"] = *copies;
      if (aug_seed) j["seed"] = *aug_seed;
      const auto spec = augment::spec_from_json(j);
      spec.validate();
      std::vector<std::string> warnings;
      const auto ds = dataset::import_folder(in_dir, {}, &warnings);
      print_warnings(warnings);
      const auto out = augment::augment_dataset(ds, spec, workers);
      dataset::write_folder(out, out_dir);
      augment::write_provenance(spec, out_dir);
      if (common.json_out)
        std::cout << ordered_json{{"input", ds.size()}, {"output", out.size()}}.dump() << "\n";
      else
        std::cout << ds.size() << " images -> " << out.size() << " images\n";
      return 0;
    }
    if (*train) {
      json overrides = json::object();
      if (epochs) overrides["max_epochs"] = *epochs;
      if (batch) overrides["batch_size"] = *batch;
      if (patience) overrides["early_stopping_patience"] = *patience;
      if (lr) overrides["learning_rate"] = *lr;
      if (seed) overrides["seed"] = *seed;
      const auto cfg = load_train_config(config_file ? std::optional<fs::path>(*config_file) : std::nullopt, overrides);
      std::vector<std::string> warnings;
      const auto ds = dataset::import_folder(in_dir, {}, &warnings);
      print_warnings(warnings);
      nn::ProgressSink sink;
      sink.on_epoch = [&](const nn::EpochStats& s) {
        if (common.json_out) {
          std::cout << nn::to_json(s).dump() << "\n";
        } else {
          char buf[200];
          std::snprintf(buf, sizeof buf, "epoch %zu  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f  (%.0f ms)\n",
                        s.epoch, s.train_loss, s.train_accuracy, s.val_loss, s.val_accuracy, s.wall_ms);
          std::cout << buf;
        }
        std::cout.flush();
      };
      const auto ckpt = model_file ? nn::train(ds, nn::model_from_json(read_json_file(*model_file)), cfg, nullptr, &sink)
                                   : nn::train(ds, cfg, nullptr, &sink);
      nn::save_checkpoint(ckpt, model_out);
      if (!common.json_out)
        std::cout << "best epoch " << ckpt.best_epoch << ", " << nn::to_string(ckpt.stop_reason) << ", saved "
                  << model_out << "\n";
      return 0;
    }
    if (*test || *predict) {
      const auto ckpt = nn::load_checkpoint(model_in);
      inference::RunOptions opts;
      opts.checkpoint_id = fs::path(model_in).filename().string();
      opts.created_at = now_utc();
      opts.source = in_dir;
      opts.compute_significance = !no_significance;
      opts.workers = workers;
      std::vector<std::string> warnings;
      const auto mode = *test ? inference::RunMode::Test : inference::RunMode::Predict;
      const auto run = run_folder(ckpt, in_dir, mode, opts, warnings);
      print_warnings(warnings);
      for (const auto& f : run.failures) std::cerr << "warning: " << f.filename << ": " << f.reason << "\n";
      if (*test && report_file) write_text(*report_file, inference::to_json(inference::summarize(run)).dump(2) + "\n");
      if (*test && run_out) inference::save_run(run, *run_out);
      if (*predict) inference::save_run(run, out_dir);
      print_summary(run, common.json_out);
      return 0;
    }
    if (*exp) {
      const auto run = inference::load_run(run_dir);
      if (format == "csv")
        exporting::write_csv(run, out_dir);
      else if (format == "json")
        exporting::write_json(run, out_dir);
      else
        exporting::write_html_map(run, out_dir, positive_only);
      if (!common.json_out) std::cout << "wrote " << out_dir << "\n";
      return 0;
    }
    if (*serve) {
      service::ServiceConfig defaults;
      defaults.host = "0.0.0.0";
      auto cfg = service::config_from_env(defaults);
      if (workspace) cfg.workspace = *workspace;
      if (bind) std::tie(cfg.host, cfg.port) = service::parse_bind_addr(*bind);
      if (max_upload) cfg.max_upload_mb = *max_upload;
      service::Server server(cfg);
      std::cerr << "serving " << cfg.workspace.string() << " on " << cfg.host << ":" << cfg.port << "\n";
      server.run();
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Io ? kExitIo : kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
