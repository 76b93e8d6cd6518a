#include <cstring>

#include "internal/bytes.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"
#include "segloo/nn.hpp"

namespace segloo::nn {

namespace {
constexpr char kMagic[4] = {'S', 'F', 'W', '1'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_weights(const Network& net) {
  detail::ByteWriter w;
  w.text(std::string_view(kMagic, 4));
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(net.parameter_count()));
  const auto names = net.param_names();
  const auto params = net.all_params();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.u16(static_cast<std::uint16_t>(names[i].size()));
    w.text(names[i]);
    const Shape& s = params[i]->shape();
    w.u8(static_cast<std::uint8_t>(s.size()));
    for (int e : s) w.u32(static_cast<std::uint32_t>(e));
    for (float v : params[i]->values()) w.f32(v);
  }
  return std::move(w.buffer());
}

void save_weights(const Network& net, const std::filesystem::path& path) {
  io::write_bytes_atomic(path, encode_weights(net));
}

Network decode_weights(std::span<const std::uint8_t> bytes, const ArchConfig& arch) {
  detail::ByteReader r(bytes, "weight file");
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorKind::kFormat, "weight file: bad magic (expected SFW1)");
  }
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kVersion) fail(ErrorKind::kFormat, "weight file: unsupported version " + std::to_string(version));
  const std::uint32_t total = r.u32();
  const std::uint32_t count = r.u32();

  Network net = Network::build(arch, 0);
  const auto names = net.param_names();
  auto params = net.all_params();
  if (total != net.parameter_count() || count != params.size()) {
    fail(ErrorKind::kConfig, "weight file holds " + std::to_string(total) + " parameters in " + std::to_string(count) +
                                 " tensors; architecture expects " + std::to_string(net.parameter_count()) + " in " +
                                 std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = r.text(r.u16());
    const std::uint8_t rank = r.u8();
    Shape s;
    for (std::uint8_t d = 0; d < rank; ++d) s.push_back(static_cast<int>(r.u32()));
    if (name != names[i] || s != params[i]->shape()) {
      fail(ErrorKind::kConfig, "weight tensor '" + name + "' " + shape_string(s) + " does not match architecture '" +
                                   names[i] + "' " + shape_string(params[i]->shape()));
    }
    for (float& v : params[i]->values()) v = r.f32();
  }
  if (r.remaining() != 0) fail(ErrorKind::kData, "weight file: trailing bytes at offset " + std::to_string(r.offset()));
  for (const Tensor* t : net.all_params()) {
    require(t->all_finite(), ErrorKind::kNumeric, "weight file contains non-finite values");
  }
  return net;
}

Network load_weights(const std::filesystem::path& path, const ArchConfig& arch) {
  const auto bytes = io::read_bytes(path);
  return decode_weights(bytes, arch);
}

}  // namespace segloo::nn
