#include "segloo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "segloo/error.hpp"

namespace segloo {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    require(e >= 0, ErrorKind::kConfig, "negative extent in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  require(shape_size(shape_) == data_.size(), ErrorKind::kConfig,
          "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
              shape_string(shape_));
}

std::size_t Tensor::item_size() const {
  require(!shape_.empty() && shape_[0] > 0, ErrorKind::kConfig, "tensor has no leading axis");
  return data_.size() / static_cast<std::size_t>(shape_[0]);
}

std::span<float> Tensor::item(std::size_t i) {
  const std::size_t n = item_size();
  require(i < static_cast<std::size_t>(shape_[0]), ErrorKind::kConfig, "item index out of range");
  return std::span<float>(data_).subspan(i * n, n);
}

std::span<const float> Tensor::item(std::size_t i) const {
  const std::size_t n = item_size();
  require(i < static_cast<std::size_t>(shape_[0]), ErrorKind::kConfig, "item index out of range");
  return std::span<const float>(data_).subspan(i * n, n);
}

Tensor Tensor::item_tensor(std::size_t i) const {
  auto view = item(i);
  Shape s(shape_.begin(), shape_.end());
  s[0] = 1;
  return Tensor(std::move(s), std::vector<float>(view.begin(), view.end()));
}

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_size(shape) == data_.size(), ErrorKind::kConfig,
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

float Tensor::max_abs_diff(const Tensor& other) const {
  require(shape_ == other.shape_, ErrorKind::kConfig, "shape mismatch in max_abs_diff");
  float m = 0.0f;
  for (std::size_t i = 0; i < data_.size(); ++i) m = std::max(m, std::fabs(data_[i] - other.data_[i]));
  return m;
}

Tensor stack(std::span<const Tensor> items) {
  require(!items.empty(), ErrorKind::kConfig, "cannot stack zero tensors");
  const Shape& inner = items.front().shape();
  Shape shape{static_cast<int>(items.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<float> data;
  data.reserve(shape_size(shape));
  for (const Tensor& t : items) {
    require(t.shape() == inner, ErrorKind::kConfig, "cannot stack tensors of different shapes");
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace segloo
