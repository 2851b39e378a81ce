#include "deepterra/dataset.hpp"

#include "deepterra/csv.hpp"
#include "deepterra/error.hpp"
#include "deepterra/hash.hpp"
#include "deepterra/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>

#include "json.hpp"

namespace deepterra::dataset {

namespace fs = std::filesystem;
using nlohmann::json;

LabelName::LabelName(std::string name) : name_(std::move(name))
{
  require(is_valid(name_), ErrorKind::Domain,
          "invalid label '" + name_ + "': use lowercase letters, digits and underscore");
}

bool LabelName::is_valid(std::string_view name)
{
  return !name.empty() && std::all_of(name.begin(), name.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
  });
}

LabelSet::LabelSet(LabelName neg, LabelName pos) : negative(std::move(neg)), positive(std::move(pos))
{
  require(negative != positive, ErrorKind::Domain, "label set needs two distinct labels");
}

std::size_t LabelSet::index_of(const LabelName& l) const
{
  if (l == negative) return 0;
  if (l == positive) return 1;
  fail(ErrorKind::Domain, "unknown label '" + l.str() + "'");
}

LabelSet infer_label_set(const LabelName& a, const LabelName& b)
{
  for (const char* prefix : {"not_", "no_", "non_"}) {
    if (b.str() == prefix + a.str()) return {b, a};
    if (a.str() == prefix + b.str()) return {a, b};
  }
  static const std::pair<const char*, const char*> pairs[] = {
      {"neg", "pos"}, {"negative", "positive"}, {"no", "yes"}, {"false", "true"}, {"0", "1"}};
  for (const auto& [n, p] : pairs) {
    if (a.str() == n && b.str() == p) return {a, b};
    if (b.str() == n && a.str() == p) return {b, a};
  }
  return a < b ? LabelSet{b, a} : LabelSet{a, b};
}

namespace {

std::string geo_key(const std::optional<geo::GeoPoint>& g)
{
  if (!g) return "";
  return csv::fixed(g->lat(), 6) + "," + csv::fixed(g->lon(), 6);
}

std::string read_text(std::span<const std::uint8_t> b)
{
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

Bytes to_bytes(const std::string& s) { return Bytes(s.begin(), s.end()); }

bool is_hidden(const std::string& name) { return !name.empty() && name.front() == '.'; }

}  // namespace

bool operator==(const ImageEntry& a, const ImageEntry& b)
{
  return a.filename == b.filename && a.encoded == b.encoded && a.image == b.image &&
         geo_key(a.geo) == geo_key(b.geo);
}

ImageEntry make_entry(std::string filename, Bytes encoded, std::optional<geo::GeoPoint> geo)
{
  auto image = decode_image(encoded);
  return {std::move(filename), std::move(encoded), std::move(image), geo};
}

ImageEntry make_entry(std::string filename, const RasterImage& image, std::optional<geo::GeoPoint> geo)
{
  return {std::move(filename), encode_png(image), image, geo};
}

std::string format_manifest(const std::vector<ManifestRow>& rows)
{
  std::string out = csv::format_row({"filename", "label", "lat", "lon"});
  for (const auto& r : rows) {
    out += csv::format_row({r.filename, r.label, r.geo ? csv::fixed(r.geo->lat(), 6) : "",
                            r.geo ? csv::fixed(r.geo->lon(), 6) : ""});
  }
  return out;
}

std::vector<ManifestRow> parse_manifest(std::string_view text)
{
  const auto rows = csv::parse(text);
  require(!rows.empty(), ErrorKind::Structure, "manifest.csv is empty");
  const csv::Row& header = rows.front();
  require(header == csv::Row{"filename", "label", "lat", "lon"}, ErrorKind::Structure,
          "manifest.csv header must be filename,label,lat,lon");
  std::vector<ManifestRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() == 1 && r[0].empty()) continue;
    require(r.size() == 4, ErrorKind::Structure, "manifest.csv row " + std::to_string(i) + " has " +
                                                     std::to_string(r.size()) + " fields");
    ManifestRow row{r[0], r[1], std::nullopt};
    require((r[2].empty()) == (r[3].empty()), ErrorKind::Structure,
            "manifest.csv row " + std::to_string(i) + " has only one coordinate");
    if (!r[2].empty()) {
      try {
        row.geo = geo::GeoPoint(std::stod(r[2]), std::stod(r[3]));
      } catch (const std::logic_error&) {
        fail(ErrorKind::Structure, "manifest.csv row " + std::to_string(i) + " has bad coordinates");
      }
    }
    out.push_back(std::move(row));
  }
  return out;
}

LabeledDataset::LabeledDataset(LabelSet labels, std::vector<ImageEntry> negatives,
                               std::vector<ImageEntry> positives, bool has_manifest)
    : labels_(std::move(labels)), classes_{std::move(negatives), std::move(positives)}, has_manifest_(has_manifest)
{
  std::set<std::string> names;
  std::optional<std::pair<std::size_t, std::size_t>> dims;
  for (const auto& cls : classes_) {
    for (const auto& e : cls) {
      require(names.insert(e.filename).second, ErrorKind::Structure, "duplicate filename " + e.filename);
      const std::pair d{e.image.width(), e.image.height()};
      if (!dims) dims = d;
      require(*dims == d, ErrorKind::Structure,
              "image " + e.filename + " is " + std::to_string(d.first) + "x" + std::to_string(d.second) +
                  " but the dataset uses " + std::to_string(dims->first) + "x" + std::to_string(dims->second));
    }
  }
}

std::optional<std::pair<std::size_t, std::size_t>> LabeledDataset::image_size() const
{
  for (const auto& cls : classes_)
    if (!cls.empty()) return std::pair{cls.front().image.width(), cls.front().image.height()};
  return std::nullopt;
}

std::vector<ManifestRow> LabeledDataset::manifest() const
{
  std::vector<ManifestRow> rows;
  for (std::size_t c = 0; c < 2; ++c)
    for (const auto& e : classes_[c]) rows.push_back({e.filename, labels_.at(c).str(), e.geo});
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.filename < b.filename; });
  return rows;
}

namespace {

// Strips one wrapping directory when every entry lives below it and the
// class directories sit one level further down.
void unwrap_single_root(std::vector<archive::Entry>& files)
{
  if (files.empty()) return;
  const auto slash = files.front().path.find('/');
  if (slash == std::string::npos) return;
  const std::string root = files.front().path.substr(0, slash + 1);
  bool deep = false;
  for (const auto& f : files) {
    if (f.path.rfind(root, 0) != 0) return;
    if (std::count(f.path.begin(), f.path.end(), '/') >= 2) deep = true;
  }
  if (!deep) return;
  for (auto& f : files) f.path.erase(0, root.size());
}

}  // namespace

LabeledDataset import_tree(std::vector<archive::Entry> files, const ImportOptions& opts,
                           std::vector<std::string>* warnings, const std::vector<std::string>& empty_dirs)
{
  auto warn = [&](std::string msg) {
    if (warnings) warnings->push_back(std::move(msg));
  };

  std::optional<std::vector<ManifestRow>> manifest;
  std::optional<LabelSet> declared;
  std::map<std::string, std::vector<archive::Entry*>> by_dir;
  for (const auto& d : empty_dirs) by_dir[d];
  for (auto& f : files) {
    const auto parts = std::count(f.path.begin(), f.path.end(), '/');
    if (f.path == "manifest.csv") {
      manifest = parse_manifest(read_text(f.data));
      continue;
    }
    if (f.path == "dataset.json") {
      try {
        const auto j = json::parse(read_text(f.data));
        declared = LabelSet(LabelName(j.at("negative").get<std::string>()),
                            LabelName(j.at("positive").get<std::string>()));
      } catch (const json::exception& e) {
        fail(ErrorKind::Structure, std::string("bad dataset.json: ") + e.what());
      } catch (const Error& e) {
        fail(ErrorKind::Structure, std::string("bad dataset.json: ") + e.what());
      }
      continue;
    }
    if (parts != 1) {
      if (parts > 1) warn("ignoring nested file " + f.path);
      continue;
    }
    const auto slash = f.path.find('/');
    const std::string dir = f.path.substr(0, slash), name = f.path.substr(slash + 1);
    if (is_hidden(dir)) continue;
    auto& bucket = by_dir[dir];
    if (name.empty() || is_hidden(name) || !has_image_extension(name)) continue;
    bucket.push_back(&f);
  }

  require(by_dir.size() >= 2, ErrorKind::Structure,
          "expected 2 class subdirectories, found " + std::to_string(by_dir.size()));
  require(by_dir.size() == 2, ErrorKind::Structure,
          "only binary datasets are supported; found " + std::to_string(by_dir.size()) + " classes");

  std::vector<LabelName> names;
  for (const auto& [dir, _] : by_dir) {
    require(LabelName::is_valid(dir), ErrorKind::Structure, "class directory '" + dir + "' is not a valid label");
    names.emplace_back(dir);
  }
  LabelSet labels = infer_label_set(names[0], names[1]);
  if (declared) {
    require(declared->contains(names[0]) && declared->contains(names[1]), ErrorKind::Structure,
            "dataset.json labels do not match class directories");
    labels = *declared;
  }
  if (opts.positive_label) {
    require(labels.contains(*opts.positive_label), ErrorKind::Structure,
            "positive label '" + opts.positive_label->str() + "' is not a class");
    if (labels.positive != *opts.positive_label) labels = LabelSet(labels.positive, labels.negative);
  }

  std::map<std::string, const ManifestRow*> rows;
  if (manifest)
    for (const auto& r : *manifest) rows[r.filename] = &r;

  std::array<std::vector<ImageEntry>, 2> classes;
  for (auto& [dir, members] : by_dir) {
    const LabelName label(dir);
    auto& out = classes[labels.index_of(label)];
    std::sort(members.begin(), members.end(), [](auto* a, auto* b) { return a->path < b->path; });
    for (auto* f : members) {
      const std::string name = f->path.substr(dir.size() + 1);
      std::optional<geo::GeoPoint> g;
      if (auto it = rows.find(name); it != rows.end()) {
        require(it->second->label.empty() || it->second->label == dir, ErrorKind::Structure,
                "manifest label for " + name + " disagrees with its directory");
        g = it->second->geo;
      }
      try {
        out.push_back(make_entry(name, std::move(f->data), g));
      } catch (const Error& e) {
        warn("skipping " + f->path + ": " + e.what());
      }
    }
    require(!out.empty(), ErrorKind::Structure, "class '" + dir + "' has no decodable images");
  }
  return LabeledDataset(labels, std::move(classes[0]), std::move(classes[1]), manifest.has_value());
}

namespace {

std::vector<archive::Entry> read_tree(const fs::path& root, std::vector<std::string>* empty_dirs)
{
  require(fs::is_directory(root), ErrorKind::Io, "not a directory: " + root.string());
  std::vector<archive::Entry> files;
  for (const auto& top : fs::directory_iterator(root)) {
    const std::string name = top.path().filename().string();
    if (top.is_regular_file() && (name == "manifest.csv" || name == "dataset.json")) {
      files.push_back({name, read_file(top.path())});
    } else if (top.is_directory() && !is_hidden(name)) {
      bool any = false;
      for (const auto& f : fs::directory_iterator(top.path())) {
        if (!f.is_regular_file()) continue;
        files.push_back({name + "/" + f.path().filename().string(), read_file(f.path())});
        any = true;
      }
      if (!any && empty_dirs) empty_dirs->push_back(name);
    }
  }
  return files;
}

}  // namespace

LabeledDataset import_folder(const fs::path& root, const ImportOptions& opts, std::vector<std::string>* warnings)
{
  std::vector<std::string> empty_dirs;
  auto files = read_tree(root, &empty_dirs);
  return import_tree(std::move(files), opts, warnings, empty_dirs);
}

LabeledDataset import_archive_bytes(std::span<const std::uint8_t> tgz, const ImportOptions& opts,
                                    std::vector<std::string>* warnings)
{
  auto files = archive::read_tgz(tgz);
  unwrap_single_root(files);
  return import_tree(std::move(files), opts, warnings);
}

LabeledDataset import_archive(const fs::path& tgz, const ImportOptions& opts, std::vector<std::string>* warnings)
{
  require(fs::is_regular_file(tgz), ErrorKind::Io, "archive not found: " + tgz.string());
  return import_archive_bytes(read_file(tgz), opts, warnings);
}

namespace {

std::mutex& cache_key_mutex(const std::string& key)
{
  static std::mutex registry_mu;
  static std::map<std::string, std::unique_ptr<std::mutex>> registry;
  std::lock_guard lock(registry_mu);
  auto& m = registry[key];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

}  // namespace

LabeledDataset import_url(const std::string& url, const UrlImportOptions& opts, std::vector<std::string>* warnings)
{
  require(!opts.cache_dir.empty(), ErrorKind::Config, "cache_dir is required for URL imports");
  const std::string key = sha256_hex(url);
  const fs::path index = opts.cache_dir / "urls" / key;
  Bytes content;
  {
    std::lock_guard lock(cache_key_mutex(key));
    std::error_code ec;
    if (fs::exists(index)) {
      const auto digest = read_text(read_file(index));
      const fs::path blob = opts.cache_dir / "blobs" / (digest + ".tgz");
      if (fs::exists(blob)) {
        content = read_file(blob);
        if (sha256_hex(content) != digest) content.clear();
      }
    }
    if (content.empty()) {
      http::GetOptions get;
      get.retry = opts.retry;
      get.max_bytes = opts.max_bytes;
      auto res = http::get(url, get);
      if (res.status != 200) fail(ErrorKind::Fetch, "GET " + url + " returned HTTP " + std::to_string(res.status));
      content = std::move(res.body);
      const std::string digest = sha256_hex(content);
      write_file(opts.cache_dir / "blobs" / (digest + ".tgz"), content);
      write_file(index, to_bytes(digest));
    }
  }
  return import_archive_bytes(content, opts.import, warnings);
}

std::size_t train_count(std::size_t n, double ratio)
{
  require(n >= 2, ErrorKind::Split, "class needs at least 2 entries to split");
  const auto rounded = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  return std::clamp<std::size_t>(rounded, 1, n - 1);
}

std::pair<LabeledDataset, LabeledDataset> split_train_val(const LabeledDataset& ds, double ratio, std::uint64_t seed)
{
  require(ratio > 0.0 && ratio < 1.0, ErrorKind::Split, "split ratio must lie in (0, 1)");
  std::array<std::vector<ImageEntry>, 2> train, val;
  for (std::size_t c = 0; c < 2; ++c) {
    const auto& entries = ds.entries(c);
    require(entries.size() >= 2, ErrorKind::Split,
            "class '" + ds.labels().at(c).str() + "' has fewer than 2 entries");
    std::vector<std::size_t> idx(entries.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng::Stream stream(rng::mix(seed, {0x5EED5, c}));
    rng::shuffle(idx, stream);
    const std::size_t n_train = train_count(entries.size(), ratio);
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::sort(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? train : val)[c].push_back(entries[idx[i]]);
  }
  return {LabeledDataset(ds.labels(), std::move(train[0]), std::move(train[1]), ds.has_manifest()),
          LabeledDataset(ds.labels(), std::move(val[0]), std::move(val[1]), ds.has_manifest())};
}

std::vector<archive::Entry> to_tree(const LabeledDataset& ds)
{
  std::vector<archive::Entry> out;
  json labels = {{"negative", ds.labels().negative.str()}, {"positive", ds.labels().positive.str()}};
  out.push_back({"dataset.json", to_bytes(labels.dump(2) + "\n")});
  if (ds.has_manifest()) out.push_back({"manifest.csv", to_bytes(format_manifest(ds.manifest()))});
  for (std::size_t c = 0; c < 2; ++c) {
    require(!ds.entries(c).empty(), ErrorKind::Structure,
            "class '" + ds.labels().at(c).str() + "' is empty");
    for (const auto& e : ds.entries(c)) out.push_back({ds.labels().at(c).str() + "/" + e.filename, e.encoded});
  }
  return out;
}

void export_archive(const LabeledDataset& ds, const fs::path& path)
{
  archive::write_tgz_file(path, to_tree(ds));
}

void write_folder(const LabeledDataset& ds, const fs::path& root)
{
  for (const auto& e : to_tree(ds)) write_file(root / e.path, e.data);
}

bool looks_labeled(const fs::path& root)
{
  if (!fs::is_directory(root)) return false;
  for (const auto& top : fs::directory_iterator(root))
    if (top.is_regular_file() && has_image_extension(top.path())) return false;
  std::size_t dirs = 0;
  for (const auto& top : fs::directory_iterator(root))
    if (top.is_directory() && !is_hidden(top.path().filename().string())) ++dirs;
  return dirs >= 2;
}

std::vector<ImageEntry> import_unlabeled_folder(const fs::path& root, std::vector<std::string>* warnings)
{
  require(fs::is_directory(root), ErrorKind::Io, "not a directory: " + root.string());
  std::map<std::string, std::optional<geo::GeoPoint>> geo_by_name;
  if (fs::exists(root / "manifest.csv"))
    for (const auto& r : parse_manifest(read_text(read_file(root / "manifest.csv")))) geo_by_name[r.filename] = r.geo;

  std::vector<fs::path> paths;
  for (const auto& f : fs::directory_iterator(root))
    if (f.is_regular_file() && has_image_extension(f.path()) && !is_hidden(f.path().filename().string()))
      paths.push_back(f.path());
  std::sort(paths.begin(), paths.end());

  std::vector<ImageEntry> out;
  std::optional<std::pair<std::size_t, std::size_t>> dims;
  for (const auto& p : paths) {
    const std::string name = p.filename().string();
    auto it = geo_by_name.find(name);
    try {
      auto e = make_entry(name, read_file(p), it == geo_by_name.end() ? std::nullopt : it->second);
      const std::pair d{e.image.width(), e.image.height()};
      if (!dims) dims = d;
      require(*dims == d, ErrorKind::Structure, "image " + name + " has mismatched dimensions");
      out.push_back(std::move(e));
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Structure) throw;
      if (warnings) warnings->push_back("skipping " + name + ": " + e.what());
    }
  }
  return out;
}

LabeledDataset relabel(const LabeledDataset& ds, const std::string& filename, const LabelName& label)
{
  const std::size_t target = ds.labels().index_of(label);
  std::array<std::vector<ImageEntry>, 2> classes{ds.entries(0), ds.entries(1)};
  for (std::size_t c = 0; c < 2; ++c) {
    auto it = std::find_if(classes[c].begin(), classes[c].end(), [&](const auto& e) { return e.filename == filename; });
    if (it == classes[c].end()) continue;
    if (c != target) {
      auto moved = std::move(*it);
      classes[c].erase(it);
      auto& dst = classes[target];
      dst.insert(std::upper_bound(dst.begin(), dst.end(), moved,
                                  [](const auto& a, const auto& b) { return a.filename < b.filename; }),
                 std::move(moved));
    }
    return LabeledDataset(ds.labels(), std::move(classes[0]), std::move(classes[1]), ds.has_manifest());
  }
  fail(ErrorKind::Domain, "unknown filename " + filename);
}

}  // namespace deepterra::dataset
