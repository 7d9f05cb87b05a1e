#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <zlib.h>

#include "json.hpp"

#include "hyperat/config.hpp"
#include "hyperat/hyperlora.hpp"
#include "hyperat/merging.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

namespace hyperat {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "hyperat-checkpoint";

enum class Stage { Pretrained, Hyperat, Merged, HyperatPlus };

inline std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::Pretrained: return "pretrained";
    case Stage::Hyperat: return "hyperat";
    case Stage::Merged: return "merged";
    case Stage::HyperatPlus: return "hyperat_plus";
  }
  return "?";
}

inline Stage parse_stage(std::string_view s) {
  for (Stage st : {Stage::Pretrained, Stage::Hyperat, Stage::Merged, Stage::HyperatPlus}) {
    if (stage_name(st) == s) return st;
  }
  throw IntegrityError("unknown checkpoint stage '" + std::string(s) + "'");
}

// Which checkpoint stages each pipeline command consumes.
inline std::vector<Stage> accepted_stages(std::string_view command) {
  if (command == "train") return {Stage::Pretrained};
  if (command == "merge") return {Stage::Hyperat, Stage::Merged, Stage::HyperatPlus};
  if (command == "tune-plus") return {Stage::Hyperat, Stage::Merged};
  if (command == "eval" || command == "attack") {
    return {Stage::Pretrained, Stage::Hyperat, Stage::Merged, Stage::HyperatPlus};
  }
  throw ConfigError("unknown pipeline command '" + std::string(command) + "'");
}

inline void require_stage(Stage actual, std::string_view command) {
  const auto ok = accepted_stages(command);
  if (std::find(ok.begin(), ok.end(), actual) != ok.end()) return;
  std::string expected;
  for (Stage s : ok) expected += (expected.empty() ? "" : ", ") + std::string(stage_name(s));
  throw StageError("'" + std::string(command) + "' needs a checkpoint of stage {" + expected + "}, got '" +
                   std::string(stage_name(actual)) + "'");
}

// Everything a pipeline stage persists. The hypernetwork exists from stage
// "hyperat" on, merge coefficients from "merged" on.
struct CheckpointBundle {
  ExperimentConfig config;
  Stage stage = Stage::Pretrained;
  BackboneState<float> backbone;
  std::optional<HyperLora<float>> hyper;
  std::optional<MergeCoefficients> coeffs;
};

namespace detail {

struct BlobRef {
  std::string name;
  std::string dtype;  // f32 | f64
  Eigen::Index rows = 0, cols = 0;
  const void* data = nullptr;
  std::size_t nbytes = 0;
};

inline std::uint32_t crc32_of(const void* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

template <class T>
BlobRef blob_of(std::string name, const Mat<T>& m) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return {std::move(name), std::is_same_v<T, float> ? "f32" : "f64", m.rows(), m.cols(), m.data(),
          static_cast<std::size_t>(m.size()) * sizeof(T)};
}

inline std::vector<BlobRef> bundle_blobs(CheckpointBundle& b) {
  std::vector<BlobRef> out;
  for (auto& [name, m] : b.backbone.params.named()) out.push_back(blob_of("backbone." + name, *m));
  if (b.hyper) {
    for (auto& [name, m] : b.hyper->named()) out.push_back(blob_of(name, *m));
  }
  return out;
}

template <class T>
void read_blob(const nlohmann::json& entry, const std::vector<char>& bytes, Mat<T>& dst,
               const std::filesystem::path& where) {
  const std::string name = entry.at("name");
  const std::string want = std::is_same_v<T, float> ? "f32" : "f64";
  if (entry.at("dtype") != want) throw IntegrityError("blob '" + name + "' has dtype " + std::string(entry.at("dtype")));
  const auto shape = entry.at("shape").get<std::vector<long long>>();
  if (shape.size() != 2 || shape[0] != dst.rows() || shape[1] != dst.cols()) {
    throw IntegrityError("blob '" + name + "' shape does not match the configured model");
  }
  const auto off = entry.at("offset").get<std::uint64_t>();
  const auto n = entry.at("nbytes").get<std::uint64_t>();
  if (n != static_cast<std::uint64_t>(dst.size()) * sizeof(T)) throw IntegrityError("blob '" + name + "' size mismatch");
  if (off + n > bytes.size()) throw IntegrityError("blob '" + name + "' is truncated in " + where.string());
  if (crc32_of(bytes.data() + off, n) != entry.at("crc32").get<std::uint32_t>()) {
    throw IntegrityError("checksum mismatch for blob '" + name + "' in " + where.string());
  }
  std::memcpy(dst.data(), bytes.data() + off, n);
}

}  // namespace detail

inline void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  auto& b = const_cast<CheckpointBundle&>(bundle);  // named() hands out mutable views; nothing is written
  if (b.stage != Stage::Pretrained && !b.hyper) throw ConfigError("stage " + std::string(stage_name(b.stage)) + " needs a hypernetwork");
  if ((b.stage == Stage::Merged || b.stage == Stage::HyperatPlus) && !b.coeffs) {
    throw ConfigError("stage " + std::string(stage_name(b.stage)) + " needs merge coefficients");
  }
  fs::create_directories(dir);
  auto blobs = detail::bundle_blobs(b);
  Mat<double> tradeoff;
  if (b.coeffs) {
    blobs.push_back(detail::blob_of("merge.lambda", b.coeffs->lambda));
    tradeoff = Mat<double>::Constant(1, 1, b.coeffs->tradeoff);
    blobs.push_back(detail::blob_of("merge.tradeoff", tradeoff));
  }

  nlohmann::json entries = nlohmann::json::array();
  std::ofstream data(dir / "blobs.bin", std::ios::binary | std::ios::trunc);
  std::uint64_t offset = 0;
  for (const auto& blob : blobs) {
    data.write(static_cast<const char*>(blob.data), static_cast<std::streamsize>(blob.nbytes));
    entries.push_back({{"name", blob.name},
                       {"dtype", blob.dtype},
                       {"shape", {blob.rows, blob.cols}},
                       {"offset", offset},
                       {"nbytes", blob.nbytes},
                       {"crc32", detail::crc32_of(blob.data, blob.nbytes)}});
    offset += blob.nbytes;
  }
  if (!data) throw IngestionError("cannot write " + (dir / "blobs.bin").string());

  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"version", kCheckpointVersion},
                             {"stage", stage_name(b.stage)},
                             {"config_hash", config_hash(b.config)},
                             {"config", config_to_json(b.config)},
                             {"blobs", entries}};
  std::ofstream m(dir / "manifest.json", std::ios::trunc);
  m << manifest.dump(2) << "\n";
  if (!m) throw IngestionError("cannot write " + (dir / "manifest.json").string());
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IntegrityError("no manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("unreadable manifest in " + dir.string() + ": " + e.what());
  }
  if (m.value("format", "") != kCheckpointFormat) throw IntegrityError(dir.string() + " is not a checkpoint");
  if (m.value("version", -1) != kCheckpointVersion) {
    throw IntegrityError("checkpoint format version " + m.value("version", nlohmann::json()).dump() +
                         " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  return m;
}

inline Stage checkpoint_stage(const std::filesystem::path& dir) { return parse_stage(read_manifest(dir).at("stage").get<std::string>()); }

inline CheckpointBundle load_checkpoint(const std::filesystem::path& dir) {
  const nlohmann::json m = read_manifest(dir);
  CheckpointBundle b;
  try {
    b.config = config_from_json(m.at("config"));
    b.stage = parse_stage(m.at("stage").get<std::string>());
    if (m.at("config_hash").get<std::string>() != config_hash(b.config)) {
      throw IntegrityError("configuration hash mismatch in " + dir.string());
    }

    std::ifstream in(dir / "blobs.bin", std::ios::binary);
    if (!in) throw IntegrityError("missing blobs.bin in " + dir.string());
    const std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

    std::map<std::string, const nlohmann::json*> index;
    for (const auto& e : m.at("blobs")) index[e.at("name").get<std::string>()] = &e;
    const auto entry = [&](const std::string& name) -> const nlohmann::json& {
      auto it = index.find(name);
      if (it == index.end()) throw IntegrityError("checkpoint lacks blob '" + name + "'");
      return *it->second;
    };

    b.backbone = init_backbone<float>(b.config.backbone, 0);
    for (auto& [name, mat] : b.backbone.params.named()) detail::read_blob(entry("backbone." + name), bytes, *mat, dir);
    if (b.stage != Stage::Pretrained) {
      b.hyper = init_hyperlora<float>(MethodRegistry(b.config.methods), b.config.backbone, b.config.hyper, 0);
      for (auto& [name, mat] : b.hyper->named()) detail::read_blob(entry(name), bytes, *mat, dir);
    }
    if (index.count("merge.lambda")) {
      MergeCoefficients c;
      const auto shape = entry("merge.lambda").at("shape").get<std::vector<long long>>();
      if (shape.size() != 2) throw IntegrityError("merge.lambda must be a matrix");
      c.lambda.resize(shape[0], shape[1]);
      detail::read_blob(entry("merge.lambda"), bytes, c.lambda, dir);
      Mat<double> t(1, 1);
      detail::read_blob(entry("merge.tradeoff"), bytes, t, dir);
      c.tradeoff = t(0, 0);
      b.coeffs = std::move(c);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("malformed manifest in " + dir.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError("checkpoint configuration is invalid: " + std::string(e.what()));
  }
  if ((b.stage == Stage::Merged || b.stage == Stage::HyperatPlus) && !b.coeffs) {
    throw IntegrityError("stage " + std::string(stage_name(b.stage)) + " checkpoint has no merge coefficients");
  }
  return b;
}

inline HyperatState<float> bundle_state(const CheckpointBundle& b) {
  if (!b.hyper) throw StageError("checkpoint stage '" + std::string(stage_name(b.stage)) + "' has no hypernetwork");
  HyperatState<float> st;
  st.backbone = b.backbone;
  st.hyper = *b.hyper;
  for (const auto& m : st.hyper.registry.methods()) st.defenses.push_back(make_defense(m, b.config.defense));
  return st;
}

}  // namespace hyperat
