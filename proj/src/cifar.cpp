#include <algorithm>
#include <cmath>

#include "segloo/data.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"

namespace segloo::data {

namespace fs = std::filesystem;

void ImageBatch::validate() const {
  const std::size_t n = labels.size();
  require(images.rank() == 4 && static_cast<std::size_t>(images.dim(0)) == n, ErrorKind::kData,
          "image tensor " + shape_string(images.shape()) + " does not hold " + std::to_string(n) + " images");
  require(ids.size() == n, ErrorKind::kData, "image id count does not match image count");
  for (float v : images.values()) require(v >= 0.0f && v <= 1.0f, ErrorKind::kData, "pixel value outside [0, 1]");
}

ImageBatch ImageBatch::subset(std::span<const std::size_t> indices) const {
  ImageBatch out;
  Shape s = images.shape();
  s[0] = static_cast<int>(indices.size());
  out.images = Tensor(s);
  const std::size_t item = images.item_size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    require(indices[k] < size(), ErrorKind::kConfig, "image index out of range");
    const auto src = images.item(indices[k]);
    std::copy(src.begin(), src.end(), out.images.data() + k * item);
    out.labels.push_back(labels[indices[k]]);
    out.ids.push_back(ids[indices[k]]);
  }
  return out;
}

ImageBatch ImageBatch::concat(std::span<const ImageBatch> parts) {
  ImageBatch out;
  std::size_t total = 0;
  Shape s{0, 3, 32, 32};
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    total += p.size();
    s = p.images.shape();
  }
  s[0] = static_cast<int>(total);
  out.images = Tensor(s);
  float* dst = out.images.data();
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    require(p.images.item_size() * total == out.images.size(), ErrorKind::kData, "cannot concatenate images of different shapes");
    dst = std::copy(p.images.values().begin(), p.images.values().end(), dst);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.ids.insert(out.ids.end(), p.ids.begin(), p.ids.end());
  }
  return out;
}

ImageBatch decode_cifar(std::span<const std::uint8_t> bytes, const std::string& id_prefix) {
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  const std::size_t tail = bytes.size() % kCifarRecordBytes;
  require(tail == 0, ErrorKind::kData,
          id_prefix + ": truncated record at offset " + std::to_string(n * kCifarRecordBytes) + " (" +
              std::to_string(tail) + " trailing bytes, records are " + std::to_string(kCifarRecordBytes) + " bytes)");
  ImageBatch b;
  b.images = Tensor({static_cast<int>(n), 3, 32, 32});
  b.labels.resize(n);
  b.ids.resize(n);
  float* dst = b.images.data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    require(rec[0] <= 9, ErrorKind::kData,
            id_prefix + ": label " + std::to_string(rec[0]) + " at offset " + std::to_string(i * kCifarRecordBytes) +
                " is not a class id 0-9");
    b.labels[i] = rec[0];
    b.ids[i] = id_prefix + ":" + std::to_string(i);
    for (std::size_t p = 0; p < kCifarImageBytes; ++p) dst[i * kCifarImageBytes + p] = rec[1 + p] / 255.0f;
  }
  return b;
}

std::vector<std::uint8_t> encode_cifar(const ImageBatch& batch) {
  batch.validate();
  require(batch.images.item_size() == kCifarImageBytes, ErrorKind::kData, "CIFAR records hold 3 x 32 x 32 images");
  std::vector<std::uint8_t> out(batch.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    require(batch.labels[i] >= 0 && batch.labels[i] <= 9, ErrorKind::kData, "label outside 0-9");
    std::uint8_t* rec = out.data() + i * kCifarRecordBytes;
    rec[0] = static_cast<std::uint8_t>(batch.labels[i]);
    const auto px = batch.images.item(i);
    for (std::size_t p = 0; p < kCifarImageBytes; ++p) rec[1 + p] = static_cast<std::uint8_t>(std::lround(px[p] * 255.0f));
  }
  return out;
}

ImageBatch read_cifar_file(const fs::path& path, const std::string& id_prefix) {
  const auto bytes = io::read_bytes(path);
  return decode_cifar(bytes, id_prefix);
}

void write_cifar_file(const fs::path& path, const ImageBatch& batch) { io::write_bytes_atomic(path, encode_cifar(batch)); }

CifarFiles locate_cifar10(const fs::path& dir) {
  for (const fs::path& base : {dir, dir / "cifar-10-batches-bin"}) {
    CifarFiles f;
    // data_batch_1.bin onwards, stopping at the first gap; the official release has five.
    for (int i = 1; fs::exists(base / ("data_batch_" + std::to_string(i) + ".bin")); ++i)
      f.train.push_back(base / ("data_batch_" + std::to_string(i) + ".bin"));
    f.test = base / "test_batch.bin";
    if (fs::exists(f.test) && !f.train.empty()) return f;
  }
  fail(ErrorKind::kData, "no CIFAR-10 binary files (data_batch_1.bin.., test_batch.bin) under " + dir.string());
}

CifarSplit load_cifar10(const fs::path& dir) {
  const auto files = locate_cifar10(dir);
  std::vector<ImageBatch> parts;
  for (std::size_t i = 0; i < files.train.size(); ++i) parts.push_back(read_cifar_file(files.train[i], "train" + std::to_string(i + 1)));
  return {ImageBatch::concat(parts), read_cifar_file(files.test, "test")};
}

}  // namespace segloo::data
