#include "deepterra/error.hpp"
#include "deepterra/hash.hpp"
#include "deepterra/nn/train.hpp"

#include <bit>
#include <cstring>

// Layout: "DTCK" | u64 LE header length | JSON header | LE float64 blobs |
// 32-byte SHA-256 of everything before it.

namespace deepterra::nn {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'D', 'T', 'C', 'K'};
constexpr std::size_t kDigestBytes = 32;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u64(Bytes& out, std::uint64_t v)
{
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p)
{
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

Bytes digest_bytes(std::span<const std::uint8_t> data)
{
  const std::string hex = sha256_hex(data);
  Bytes out(kDigestBytes);
  for (std::size_t i = 0; i < kDigestBytes; ++i) out[i] = static_cast<std::uint8_t>(std::stoul(hex.substr(2 * i, 2), nullptr, 16));
  return out;
}

Bytes weight_blob(const WeightMap& w)
{
  Bytes out;
  for (const auto& [_, t] : w.tensors()) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), p, p + t.size() * sizeof(double));
  }
  return out;
}

}  // namespace

Bytes serialize_checkpoint(const Checkpoint& ckpt)
{
  check_weights(ckpt.spec, ckpt.weights);
  const Bytes blob = weight_blob(ckpt.weights);

  ordered_json header;
  header["format_version"] = ckpt.format_version;
  header["model_spec"] = to_json(ckpt.spec);
  header["train_config"] = to_json(ckpt.config);
  header["label_order"] = {ckpt.labels.negative.str(), ckpt.labels.positive.str()};
  ordered_json history = ordered_json::array();
  for (const auto& s : ckpt.history) history.push_back(to_json(s));
  header["history"] = std::move(history);
  header["best_epoch"] = ckpt.best_epoch;
  header["stop_reason"] = to_string(ckpt.stop_reason);
  ordered_json weights = ordered_json::array();
  for (const auto& [name, t] : ckpt.weights.tensors()) weights.push_back({{"name", name}, {"shape", t.shape()}});
  header["weights"] = std::move(weights);
  header["weights_checksum"] = sha256_hex(blob);
  const std::string text = header.dump();

  Bytes out(kMagic, kMagic + 4);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blob.begin(), blob.end());
  const Bytes digest = digest_bytes(out);
  out.insert(out.end(), digest.begin(), digest.end());
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes)
{
  require(bytes.size() >= 12 + kDigestBytes && std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorKind::Checksum,
          "not a checkpoint file or truncated");
  const auto body = bytes.first(bytes.size() - kDigestBytes);
  const Bytes digest = digest_bytes(body);
  require(std::equal(digest.begin(), digest.end(), bytes.end() - kDigestBytes), ErrorKind::Checksum,
          "checkpoint checksum mismatch (corrupted or truncated file)");

  const std::uint64_t header_len = get_u64(bytes.data() + 4);
  require(header_len <= body.size() - 12, ErrorKind::Checksum, "checkpoint header length exceeds file");
  json header;
  try {
    header = json::parse(body.begin() + 12, body.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    fail(ErrorKind::Checksum, std::string("checkpoint header unreadable: ") + e.what());
  }
  const int version = header.value("format_version", -1);
  require(version == kCheckpointFormatVersion, ErrorKind::Version,
          "checkpoint format version " + std::to_string(version) + " is not supported (expected " +
              std::to_string(kCheckpointFormatVersion) + ")");

  const auto blob = body.subspan(12 + header_len);
  require(sha256_hex(blob) == header.at("weights_checksum").get<std::string>(), ErrorKind::Checksum,
          "weights checksum mismatch");

  try {
    const auto labels = header.at("label_order");
    Checkpoint ckpt{model_from_json(header.at("model_spec")),
                    {},
                    dataset::LabelSet(dataset::LabelName(labels.at(0).get<std::string>()),
                                      dataset::LabelName(labels.at(1).get<std::string>())),
                    train_config_from_json(header.at("train_config")),
                    {},
                    header.at("best_epoch").get<std::size_t>(),
                    StopReason::Completed,
                    version};
    for (const auto& s : header.at("history")) ckpt.history.push_back(epoch_stats_from_json(s));
    const auto reason = header.at("stop_reason").get<std::string>();
    for (auto r : {StopReason::Completed, StopReason::EarlyStopped, StopReason::Stopped})
      if (reason == to_string(r)) ckpt.stop_reason = r;

    std::size_t offset = 0;
    for (const auto& w : header.at("weights")) {
      const Shape shape = w.at("shape").get<Shape>();
      const std::size_t n = element_count(shape);
      require(offset + n * sizeof(double) <= blob.size(), ErrorKind::Checksum, "weight data shorter than declared");
      std::vector<double> data(n);
      std::memcpy(data.data(), blob.data() + offset, n * sizeof(double));
      offset += n * sizeof(double);
      ckpt.weights.set(w.at("name").get<std::string>(), Tensor(shape, std::move(data)));
    }
    require(offset == blob.size(), ErrorKind::Checksum, "unexpected trailing weight data");
    check_weights(ckpt.spec, ckpt.weights);
    return ckpt;
  } catch (const json::exception& e) {
    fail(ErrorKind::Checksum, std::string("checkpoint header malformed: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path)
{
  write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace deepterra::nn
