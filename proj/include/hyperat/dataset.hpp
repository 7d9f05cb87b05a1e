#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hyperat/errors.hpp"
#include "hyperat/tensor.hpp"

namespace hyperat {

// Labeled images with pixel values in [0, 1], one flattened (C, H, W) image
// per row.
struct Dataset {
  Mat<float> images;
  Labels labels;
  int channels = 1;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out = shape_only();
    out.images = gather_rows(images, idx);
    out.labels.reserve(idx.size());
    for (auto i : idx) out.labels.push_back(labels.at(i));
    return out;
  }

  Dataset head(std::size_t n) const {
    std::vector<std::size_t> idx(std::min(n, size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return subset(idx);
  }

  template <class T>
  Mat<T> batch_images(std::span<const std::size_t> idx) const {
    return gather_rows(images, idx).template cast<T>();
  }

  Labels batch_labels(std::span<const std::size_t> idx) const {
    Labels out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels.at(i));
    return out;
  }

 private:
  Dataset shape_only() const {
    Dataset out;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.num_classes = num_classes;
    out.name = name;
    return out;
  }
};

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

enum class DatasetFormat { IdxImages, ClassFolders };
enum class Split { Train, Test };

inline DatasetFormat parse_dataset_format(std::string_view s) {
  if (s == "idx" || s == "idx_images") return DatasetFormat::IdxImages;
  if (s == "folders" || s == "directory_of_class_folders") return DatasetFormat::ClassFolders;
  throw ConfigError("unknown dataset format '" + std::string(s) + "'");
}

inline std::string_view split_name(Split s) { return s == Split::Train ? "train" : "test"; }

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& p) {
  if (off + 4 > b.size()) throw IngestionError("truncated IDX header in " + p.string());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void write_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace detail

// Item count declared in an IDX header (magic, then big-endian dimensions).
inline std::uint32_t idx_item_count(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::vector<unsigned char> head(8);
  in.read(reinterpret_cast<char*>(head.data()), 8);
  if (in.gcount() != 8) throw IngestionError("truncated IDX header in " + path.string());
  const auto magic = detail::read_be32(head, 0, path);
  if ((magic >> 8) != 0x08) throw IngestionError("not an unsigned-byte IDX file: " + path.string());
  return detail::read_be32(head, 4, path);
}

// Reads an IDX image file (magic 0x803, n x rows x cols) and its label file (0x801).
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::read_be32(img, 0, images_path) != 0x00000803) {
    throw IngestionError("bad IDX image magic in " + images_path.string());
  }
  if (detail::read_be32(lab, 0, labels_path) != 0x00000801) {
    throw IngestionError("bad IDX label magic in " + labels_path.string());
  }
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t nl = detail::read_be32(lab, 4, labels_path);
  if (n != nl) throw IngestionError("image/label count mismatch in " + images_path.string());
  if (img.size() != 16 + n * rows * cols) throw IngestionError("IDX image payload size mismatch in " + images_path.string());
  if (lab.size() != 8 + n) throw IngestionError("IDX label payload size mismatch in " + labels_path.string());

  Dataset ds;
  ds.channels = 1;
  ds.height = static_cast<int>(rows);
  ds.width = static_cast<int>(cols);
  ds.images.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(rows * cols));
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images.data()[i] = static_cast<float>(img[16 + i]) / 255.0f;
  ds.labels.resize(n);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = max_label + 1;
  ds.name = images_path.filename().string();
  return ds;
}

inline void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  if (ds.channels != 1) throw ConfigError("IDX export supports single-channel images only");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IngestionError("cannot write IDX files at " + images_path.string());
  detail::write_be32(img, 0x00000803);
  detail::write_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(ds.height));
  detail::write_be32(img, static_cast<std::uint32_t>(ds.width));
  std::vector<char> buf(static_cast<std::size_t>(ds.images.size()));
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const float v = std::clamp(ds.images.data()[i], 0.0f, 1.0f);
    buf[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  img.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  detail::write_be32(lab, 0x00000801);
  detail::write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) lab.put(static_cast<char>(l));
}

// Standard IDX file names for a split.
inline std::pair<std::filesystem::path, std::filesystem::path> idx_paths(const std::filesystem::path& dir, Split s) {
  const std::string prefix = s == Split::Train ? "train" : "t10k";
  return {dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte")};
}

namespace detail {

// Binary (P5/P6) or ASCII (P2/P3) netpbm image as floats in [0, 1], channel-major.
inline std::vector<float> read_netpbm(const std::filesystem::path& path, int& channels, int& height, int& width) {
  const auto bytes = read_file(path);
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_ws();
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw IngestionError("malformed netpbm header in " + path.string());
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P') throw IngestionError("not a netpbm image: " + path.string());
  const char kind = static_cast<char>(bytes[1]);
  pos = 2;
  const bool binary = kind == '5' || kind == '6';
  channels = (kind == '3' || kind == '6') ? 3 : (kind == '2' || kind == '5') ? 1 : 0;
  if (channels == 0) throw IngestionError("unsupported netpbm variant in " + path.string());
  width = static_cast<int>(read_int());
  height = static_cast<int>(read_int());
  const long maxval = read_int();
  if (maxval <= 0 || maxval > 255) throw IngestionError("unsupported netpbm maxval in " + path.string());
  const std::size_t n = static_cast<std::size_t>(channels) * height * width;
  std::vector<float> interleaved(n);
  if (binary) {
    ++pos;
    if (pos + n > bytes.size()) throw IngestionError("truncated netpbm payload in " + path.string());
    for (std::size_t i = 0; i < n; ++i) interleaved[i] = static_cast<float>(bytes[pos + i]) / static_cast<float>(maxval);
  } else {
    for (std::size_t i = 0; i < n; ++i) interleaved[i] = static_cast<float>(read_int()) / static_cast<float>(maxval);
  }
  std::vector<float> planar(n);
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  for (std::size_t p = 0; p < hw; ++p) {
    for (int c = 0; c < channels; ++c) planar[c * hw + p] = interleaved[p * channels + c];
  }
  return planar;
}

}  // namespace detail

// Reads <root>/<class name>/*.pgm|*.ppm; classes are ordered by directory name.
inline Dataset load_class_folders(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IngestionError("not a directory: " + root.string());
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) classes.push_back(e.path());
  }
  std::sort(classes.begin(), classes.end());
  Dataset ds;
  std::vector<std::vector<float>> rows;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c])) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      int ch = 0, h = 0, w = 0;
      auto px = detail::read_netpbm(f, ch, h, w);
      if (rows.empty()) {
        ds.channels = ch;
        ds.height = h;
        ds.width = w;
      } else if (ch != ds.channels || h != ds.height || w != ds.width) {
        throw IngestionError("image shape differs from the rest of the dataset: " + f.string());
      }
      rows.push_back(std::move(px));
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  if (rows.empty()) throw IngestionError("no images found under " + root.string());
  ds.num_classes = static_cast<int>(classes.size());
  ds.images.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ds.images.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXf>(rows[i].data(), static_cast<Eigen::Index>(rows[i].size()));
  }
  ds.name = root.filename().string();
  return ds;
}

inline void write_pgm(const std::filesystem::path& path, std::span<const float> pixels, int height, int width) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  for (float v : pixels) out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
}

struct LoadOptions {
  std::optional<std::uint64_t> shuffle_seed;
  std::size_t limit = 0;  // 0 = everything
};

// Loads one split. IDX: <path>/{train,t10k}-{images-idx3,labels-idx1}-ubyte.
// Class folders: <path>/<split>/<class>/image files.
inline Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format, Split split,
                            const LoadOptions& opt = {}) {
  Dataset ds;
  if (format == DatasetFormat::IdxImages) {
    const auto [img, lab] = idx_paths(path, split);
    ds = load_idx(img, lab);
  } else {
    ds = load_class_folders(path / std::string(split_name(split)));
  }
  if (ds.size() == 0) throw IngestionError("dataset split is empty at " + path.string());
  ds.name = path.filename().string() + "/" + std::string(split_name(split));
  std::vector<std::size_t> idx = opt.shuffle_seed ? shuffled_indices(ds.size(), *opt.shuffle_seed)
                                                  : shuffled_indices(0, 0);
  if (!opt.shuffle_seed) {
    idx.resize(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  if (opt.limit > 0 && opt.limit < idx.size()) idx.resize(opt.limit);
  if (!opt.shuffle_seed && idx.size() == ds.size()) return ds;
  return ds.subset(idx);
}

}  // namespace hyperat
