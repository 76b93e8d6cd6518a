#pragma once

#include "segloo/error.hpp"
#include "segloo/tensor.hpp"

namespace segloo::detail {

// Channel-first image view accepting [C,H,W] or [1,C,H,W].
struct ImageDims {
  int channels;
  int height;
  int width;
};

inline ImageDims image_dims(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.size() == 3) return {s[0], s[1], s[2]};
  if (s.size() == 4 && s[0] == 1) return {s[1], s[2], s[3]};
  fail(ErrorKind::kConfig, "expected a [C,H,W] image, got " + shape_string(s));
}

}  // namespace segloo::detail
