#include <cmath>
#include <cstring>

#include "internal/bytes.hpp"
#include "segloo/data.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"

namespace segloo::data {

namespace {
constexpr char kMagic[4] = {'S', 'F', 'I', '1'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_image_batch(const ImageBatch& batch) {
  batch.validate();
  detail::ByteWriter w;
  w.text(std::string_view(kMagic, 4));
  w.u32(kVersion);
  const Shape& s = batch.images.shape();
  w.u32(static_cast<std::uint32_t>(batch.size()));
  for (int k = 1; k < 4; ++k) w.u32(static_cast<std::uint32_t>(s[k]));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    w.u32(static_cast<std::uint32_t>(batch.labels[i]));
    w.u16(static_cast<std::uint16_t>(batch.ids[i].size()));
    w.text(batch.ids[i]);
  }
  for (float v : batch.images.values()) w.f32(v);
  return std::move(w.buffer());
}

ImageBatch decode_image_batch(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    fail(ErrorKind::kFormat, "image batch file: bad magic (expected SFI1)");
  detail::ByteReader r(bytes, "image batch file");
  r.bytes(4);
  const auto version = r.u32();
  if (version != kVersion) fail(ErrorKind::kFormat, "image batch file: unsupported version " + std::to_string(version));
  const auto n = r.u32();
  Shape shape{static_cast<int>(n), 0, 0, 0};
  for (int k = 1; k < 4; ++k) shape[k] = static_cast<int>(r.u32());
  require(shape[1] > 0 && shape[2] > 0 && shape[3] > 0 && shape[1] * shape[2] * shape[3] <= (1 << 24), ErrorKind::kData,
          "image batch file: implausible image shape");
  ImageBatch b;
  for (std::uint32_t i = 0; i < n; ++i) {
    b.labels.push_back(static_cast<int>(r.u32()));
    b.ids.push_back(r.text(r.u16()));
  }
  const std::size_t count = static_cast<std::size_t>(n) * shape[1] * shape[2] * shape[3];
  require(r.remaining() == count * 4, ErrorKind::kData,
          "image batch file: expected " + std::to_string(count * 4) + " bytes of pixels, found " +
              std::to_string(r.remaining()));
  b.images = Tensor(shape);
  for (float& v : b.images.values()) {
    v = r.f32();
    require(std::isfinite(v), ErrorKind::kData, "image batch file: non-finite pixel value");
  }
  b.validate();
  return b;
}

void write_image_batch(const std::filesystem::path& path, const ImageBatch& batch) {
  io::write_bytes_atomic(path, encode_image_batch(batch));
}

ImageBatch read_image_batch(const std::filesystem::path& path) { return decode_image_batch(io::read_bytes(path)); }

}  // namespace segloo::data
