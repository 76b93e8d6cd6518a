#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace segloo {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float32 array. Images are N x C x H x W with values in [0,1].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const noexcept { return shape_; }
  int dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Views of the i-th item along axis 0.
  std::size_t item_size() const;
  std::span<float> item(std::size_t i);
  std::span<const float> item(std::size_t i) const;
  Tensor item_tensor(std::size_t i) const;

  // Reinterprets the buffer under a new shape of identical size.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;
  float max_abs_diff(const Tensor& other) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

}  // namespace segloo
