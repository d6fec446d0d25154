#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "backx/error.hpp"
#include "backx/image.hpp"
#include "backx/png_io.hpp"
#include "backx/random.hpp"
#include "backx/tensor.hpp"

namespace backx {

/// Random-access source of labelled images. Implementations decode on read.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual std::size_t size() const = 0;
  virtual Shape image_shape() const = 0;
  /// Images [begin, end) with labels and source indices.
  virtual ImageBatch read(std::size_t begin, std::size_t end) const = 0;
};

class InMemorySource final : public ImageSource {
 public:
  explicit InMemorySource(ImageBatch batch) : batch_(std::move(batch)) {
    if (batch_.indices.empty())
      for (std::size_t i = 0; i < batch_.size(); ++i) batch_.indices.push_back(i);
  }
  std::size_t size() const override { return batch_.size(); }
  Shape image_shape() const override { return batch_.image_shape(); }
  ImageBatch read(std::size_t begin, std::size_t end) const override { return batch_.slice(begin, end); }

 private:
  ImageBatch batch_;
};

/// Sequential fixed-order batches over a split. Two streams over the same
/// split yield identical batches.
class BatchStream {
 public:
  BatchStream(std::shared_ptr<const ImageSource> src, std::size_t batch_size)
      : src_(std::move(src)), batch_(batch_size) {
    if (batch_ == 0) throw DomainError("batch size must be positive");
  }
  std::optional<ImageBatch> next() {
    if (pos_ >= src_->size()) return std::nullopt;
    const std::size_t end = std::min(src_->size(), pos_ + batch_);
    auto b = src_->read(pos_, end);
    pos_ = end;
    return b;
  }

 private:
  std::shared_ptr<const ImageSource> src_;
  std::size_t batch_;
  std::size_t pos_ = 0;
};

struct Split {
  std::shared_ptr<const ImageSource> source;

  std::size_t size() const { return source ? source->size() : 0; }
  BatchStream stream(std::size_t batch_size) const { return {source, batch_size}; }
  ImageBatch materialize() const { return source->read(0, source->size()); }
};

struct Provenance {
  std::string uri;
  std::string checksum;
};

struct DatasetHandle {
  std::string name;
  Split train;
  Split test;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;
  Normalization normalization;
  Provenance provenance;

  Shape image_shape() const { return train.source->image_shape(); }
};

/// Per-channel mean and standard deviation over a batch.
inline Normalization compute_normalization(const ImageBatch& batch) {
  const std::size_t c = batch.channels(), plane = batch.height() * batch.width();
  Normalization n{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double count = static_cast<double>(batch.size() * plane);
  for (std::size_t i = 0; i < batch.pixels.size(); ++i) n.mean[(i / plane) % c] += batch.pixels[i];
  for (auto& m : n.mean) m /= count;
  for (std::size_t i = 0; i < batch.pixels.size(); ++i) {
    const double d = batch.pixels[i] - n.mean[(i / plane) % c];
    n.stddev[(i / plane) % c] += d * d;
  }
  for (auto& s : n.stddev) s = std::max(std::sqrt(s / count), 1e-6);
  return n;
}

// ---------------------------------------------------------------------------
// Synthetic class-conditional images

namespace detail {

inline std::array<double, 3> class_tint(std::size_t c, std::size_t k) {
  // HSV hue wheel, s = 0.55, v = 0.8.
  const double h = 6.0 * static_cast<double>(c) / static_cast<double>(k);
  const double s = 0.55, v = 0.8;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (static_cast<int>(std::floor(h)) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline ImageBatch synthesize_split(std::size_t num_classes, std::size_t per_class, std::size_t size,
                                   std::uint64_t seed) {
  const std::size_t n = num_classes * per_class;
  ImageBatch b{Tensor({n, 3, size, size}), {}, {}};
  const double s = static_cast<double>(size);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % num_classes;
    Rng rng(derive_seed(seed, i));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.04);
    const auto tint = class_tint(c, num_classes);
    const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(num_classes);
    const double freq = 1.5 + static_cast<double>(c % 3);
    const double phase = 2 * std::numbers::pi * uni(rng);
    const double gain = 0.85 + 0.3 * uni(rng);
    const double shift = 0.08 * (uni(rng) - 0.5);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double u = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) / s;
        const double wave = 0.22 * std::sin(2 * std::numbers::pi * freq * u + phase);
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double v = 0.15 + 0.6 * tint[ch] * gain + wave + shift + noise(rng);
          b.pixels[((i * 3 + ch) * size + y) * size + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    b.labels.push_back(c);
    b.indices.push_back(i);
  }
  return b;
}

}  // namespace detail

/// Procedural dataset: class c gets its own colour tint and an oriented
/// grating (orientation and frequency per class, phase per sample) plus
/// pixel noise. Fully determined by the arguments.
inline DatasetHandle synthesize_dataset(std::size_t num_classes, std::size_t samples_per_class, std::size_t image_size,
                                        std::uint64_t seed, std::optional<std::size_t> test_per_class = std::nullopt) {
  if (samples_per_class < 2) throw DomainError("samples_per_class must be at least 2");
  if (num_classes < 1) throw DomainError("num_classes must be positive");
  if (image_size < 4) throw DomainError("image_size must be at least 4");
  const std::size_t tpc = test_per_class.value_or(std::max<std::size_t>(1, samples_per_class / 5));
  auto train = detail::synthesize_split(num_classes, samples_per_class, image_size, derive_seed(seed, 1));
  auto test = detail::synthesize_split(num_classes, tpc, image_size, derive_seed(seed, 2));
  DatasetHandle h;
  h.name = "synthetic";
  h.num_classes = num_classes;
  for (std::size_t c = 0; c < num_classes; ++c) h.class_names.push_back("class_" + std::to_string(c));
  h.normalization = compute_normalization(train);
  Fnv1a sum;
  sum.update(train.pixels.values()).update(test.pixels.values());
  h.provenance = {"synthetic://classes=" + std::to_string(num_classes) + "&per_class=" +
                      std::to_string(samples_per_class) + "&size=" + std::to_string(image_size) +
                      "&seed=" + std::to_string(seed),
                  hex64(sum.digest())};
  h.train.source = std::make_shared<InMemorySource>(std::move(train));
  h.test.source = std::make_shared<InMemorySource>(std::move(test));
  return h;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes
// (3 x 32 x 32, channel-major).

class CifarBinarySource final : public ImageSource {
 public:
  static constexpr std::size_t kRecord = 1 + 3 * 32 * 32;

  explicit CifarBinarySource(std::vector<std::filesystem::path> files) : files_(std::move(files)) {
    for (const auto& f : files_) {
      std::error_code ec;
      const auto bytes = std::filesystem::file_size(f, ec);
      if (ec) throw IngestionError(f.string(), "cannot stat");
      if (bytes == 0 || bytes % kRecord != 0) throw IngestionError(f.string(), "size is not a multiple of 3073 bytes");
      counts_.push_back(bytes / kRecord);
      total_ += counts_.back();
    }
  }

  std::size_t size() const override { return total_; }
  Shape image_shape() const override { return {3, 32, 32}; }

  ImageBatch read(std::size_t begin, std::size_t end) const override {
    if (begin > end || end > total_) throw IndexError("cifar read out of range");
    ImageBatch b{Tensor({end - begin, 3, 32, 32}), {}, {}};
    std::vector<unsigned char> rec(kRecord);
    std::size_t file_start = 0, out = 0;
    for (std::size_t fi = 0; fi < files_.size() && out < end - begin; ++fi) {
      const std::size_t file_end = file_start + counts_[fi];
      const std::size_t lo = std::max(begin, file_start), hi = std::min(end, file_end);
      if (lo < hi) {
        std::ifstream f(files_[fi], std::ios::binary);
        f.seekg(static_cast<std::streamoff>((lo - file_start) * kRecord));
        for (std::size_t i = lo; i < hi; ++i, ++out) {
          if (!f.read(reinterpret_cast<char*>(rec.data()), kRecord))
            throw IngestionError(files_[fi].string(), "truncated record");
          if (rec[0] >= 10) throw IngestionError(files_[fi].string(), "label out of range");
          b.labels.push_back(rec[0]);
          b.indices.push_back(i);
          for (std::size_t p = 0; p < kRecord - 1; ++p) b.pixels[out * (kRecord - 1) + p] = rec[p + 1] / 255.0;
        }
      }
      file_start = file_end;
    }
    return b;
  }

 private:
  std::vector<std::filesystem::path> files_;
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Image folders: one directory of PNG files per class.

class ImageFolderSource final : public ImageSource {
 public:
  ImageFolderSource(std::vector<std::pair<std::filesystem::path, std::size_t>> items, Shape shape)
      : items_(std::move(items)), shape_(std::move(shape)) {}
  std::size_t size() const override { return items_.size(); }
  Shape image_shape() const override { return shape_; }
  ImageBatch read(std::size_t begin, std::size_t end) const override {
    if (begin > end || end > items_.size()) throw IndexError("image folder read out of range");
    Shape s = shape_;
    s.insert(s.begin(), end - begin);
    ImageBatch b{Tensor(s), {}, {}};
    for (std::size_t i = begin; i < end; ++i) {
      Tensor img = png::read_rgb(items_[i].first);
      if (img.shape() != shape_)
        throw IngestionError(items_[i].first.string(), "image shape " + shape_str(img.shape()) + " differs from " +
                                                            shape_str(shape_));
      std::copy(img.storage().begin(), img.storage().end(), b.pixels.data() + (i - begin) * img.size());
      b.labels.push_back(items_[i].second);
      b.indices.push_back(i);
    }
    return b;
  }

 private:
  std::vector<std::pair<std::filesystem::path, std::size_t>> items_;
  Shape shape_;
};

namespace detail {

inline std::string file_checksum(const std::vector<std::filesystem::path>& files) {
  Fnv1a h;
  std::vector<char> buf(1 << 16);
  for (const auto& p : files) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IngestionError(p.string(), "cannot open");
    h.update(p.filename().string());
    while (f.read(buf.data(), static_cast<std::streamsize>(buf.size())) || f.gcount() > 0)
      h.update(buf.data(), static_cast<std::size_t>(f.gcount()));
  }
  return hex64(h.digest());
}

inline std::vector<std::filesystem::path> sorted_dirs(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::filesystem::path> sorted_pngs(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// Checks an optional dataset manifest against the computed checksum.
inline void verify_manifest(const std::filesystem::path& root, const std::string& computed) {
  const auto mpath = root / "backx_dataset.json";
  if (!std::filesystem::exists(mpath)) return;
  try {
    auto m = nlohmann::json::parse(std::ifstream(mpath));
    if (m.at("checksum").get<std::string>() != computed)
      throw IngestionError(mpath.string(), "checksum mismatch (expected " + m.at("checksum").get<std::string>() +
                                               ", found " + computed + ")");
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(mpath.string(), e.what());
  }
}

inline DatasetHandle load_cifar10(const std::filesystem::path& root_in) {
  auto root = root_in;
  if (std::filesystem::exists(root / "cifar-10-batches-bin")) root /= "cifar-10-batches-bin";
  std::vector<std::filesystem::path> train_files, test_files;
  for (int i = 1; i <= 5; ++i) {
    auto p = root / ("data_batch_" + std::to_string(i) + ".bin");
    if (!std::filesystem::exists(p)) throw IngestionError(p.string(), "missing CIFAR-10 batch");
    train_files.push_back(p);
  }
  test_files.push_back(root / "test_batch.bin");
  if (!std::filesystem::exists(test_files[0])) throw IngestionError(test_files[0].string(), "missing CIFAR-10 batch");

  DatasetHandle h;
  h.name = "cifar10";
  h.num_classes = 10;
  h.class_names = {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
  if (std::ifstream meta(root / "batches.meta.txt"); meta) {
    std::vector<std::string> names;
    for (std::string line; std::getline(meta, line);)
      if (!line.empty()) names.push_back(line);
    if (names.size() == 10) h.class_names = names;
  }
  h.train.source = std::make_shared<CifarBinarySource>(train_files);
  h.test.source = std::make_shared<CifarBinarySource>(test_files);
  auto all = train_files;
  all.insert(all.end(), test_files.begin(), test_files.end());
  h.provenance = {"file://" + std::filesystem::absolute(root).string(), file_checksum(all)};
  verify_manifest(root, h.provenance.checksum);
  h.normalization = {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}};
  return h;
}

inline DatasetHandle load_image_folder(const std::filesystem::path& root, const std::string& name) {
  const bool presplit = std::filesystem::is_directory(root / "train") && std::filesystem::is_directory(root / "test");
  const auto class_root = presplit ? root / "train" : root;
  std::vector<std::string> classes;
  for (const auto& d : sorted_dirs(class_root)) classes.push_back(d.filename().string());
  if (classes.empty()) throw IngestionError(class_root.string(), "no class directories");

  std::vector<std::pair<std::filesystem::path, std::size_t>> train, test;
  auto collect = [&](const std::filesystem::path& base, auto& out) {
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (!std::filesystem::is_directory(base / classes[c])) continue;
      for (const auto& p : sorted_pngs(base / classes[c])) out.emplace_back(p, c);
    }
  };
  if (presplit) {
    collect(root / "train", train);
    collect(root / "test", test);
  } else {
    // Every fifth image of each class (by sorted filename) goes to test.
    std::vector<std::pair<std::filesystem::path, std::size_t>> all;
    collect(root, all);
    std::vector<std::size_t> seen(classes.size(), 0);
    for (auto& item : all) (seen[item.second]++ % 5 == 4 ? test : train).push_back(item);
  }
  if (train.empty()) throw IngestionError(class_root.string(), "no PNG images found");
  const Shape shape = png::read_rgb(train.front().first).shape();

  std::vector<std::filesystem::path> files;
  for (const auto& t : train) files.push_back(t.first);
  for (const auto& t : test) files.push_back(t.first);

  DatasetHandle h;
  h.name = name;
  h.num_classes = classes.size();
  h.class_names = classes;
  h.train.source = std::make_shared<ImageFolderSource>(std::move(train), shape);
  h.test.source = std::make_shared<ImageFolderSource>(std::move(test), shape);
  h.provenance = {"file://" + std::filesystem::absolute(root).string(), file_checksum(files)};
  verify_manifest(root, h.provenance.checksum);
  h.normalization = Normalization{std::vector<double>(shape[0], 0.5), std::vector<double>(shape[0], 0.25)};
  return h;
}

}  // namespace detail

/// Loads "cifar10" (native binary batches) or any other name as an image
/// folder rooted at root_path.
inline DatasetHandle load_dataset(const std::string& name, const std::filesystem::path& root_path) {
  if (!std::filesystem::is_directory(root_path)) throw IngestionError(root_path.string(), "dataset root not found");
  if (std::filesystem::is_empty(root_path)) throw IngestionError(root_path.string(), "dataset root is empty");
  if (name == "cifar10") return detail::load_cifar10(root_path);
  return detail::load_image_folder(root_path, name);
}

/// Writes the structured-text manifest checked on later loads.
inline void write_dataset_manifest(const DatasetHandle& h, const std::filesystem::path& root) {
  nlohmann::json m = {{"name", h.name},
                      {"num_classes", h.num_classes},
                      {"class_names", h.class_names},
                      {"train_size", h.train.size()},
                      {"test_size", h.test.size()},
                      {"normalization", h.normalization},
                      {"uri", h.provenance.uri},
                      {"checksum", h.provenance.checksum}};
  std::ofstream(root / "backx_dataset.json") << m.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Dense tensor files: "BXT1", u32 rank, u64 dims, float64 data.

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  f.write("BXT1", 4);
  const auto rank = static_cast<std::uint32_t>(t.rank());
  f.write(reinterpret_cast<const char*>(&rank), sizeof rank);
  for (std::size_t d : t.shape()) {
    const auto v = static_cast<std::uint64_t>(d);
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw Error("cannot write " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  char magic[4];
  if (!f.read(magic, 4) || std::string(magic, 4) != "BXT1") throw IngestionError(path.string(), "not a tensor file");
  std::uint32_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), sizeof rank);
  Shape s(rank);
  for (auto& d : s) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof v);
    d = static_cast<std::size_t>(v);
  }
  Tensor t(s);
  f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw IngestionError(path.string(), "truncated tensor file");
  return t;
}

}  // namespace backx
