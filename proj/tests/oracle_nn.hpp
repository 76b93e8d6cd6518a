#pragma once
// Double-precision reference forward pass, written independently of the engine's
// kernels. Used as the finite-difference oracle for gradient tests.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "segloo/nn.hpp"

namespace oracle {

inline std::vector<double> forward_logits(const segloo::nn::Network& net, const std::vector<double>& input) {
  using segloo::nn::LayerKind;
  std::vector<double> cur = input;
  segloo::Shape shape = net.input_shape();
  const auto& layers = net.arch().layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const auto params = net.layer_params(i);
    std::vector<double> next;
    switch (l.kind) {
      case LayerKind::kConv2d: {
        const int c = shape[0], h = shape[1], w = shape[2];
        const int oh = (h + 2 * l.padding - l.kernel) / l.stride + 1;
        const int ow = (w + 2 * l.padding - l.kernel) / l.stride + 1;
        next.assign(static_cast<std::size_t>(l.out_channels) * oh * ow, 0.0);
        for (int oc = 0; oc < l.out_channels; ++oc)
          for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
              double s = params[1][oc];
              for (int ic = 0; ic < c; ++ic)
                for (int ky = 0; ky < l.kernel; ++ky)
                  for (int kx = 0; kx < l.kernel; ++kx) {
                    const int iy = y * l.stride + ky - l.padding, ix = x * l.stride + kx - l.padding;
                    if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
                    s += double(params[0][((oc * c + ic) * l.kernel + ky) * l.kernel + kx]) * cur[(ic * h + iy) * w + ix];
                  }
              next[(oc * oh + y) * ow + x] = s;
            }
        shape = {l.out_channels, oh, ow};
        break;
      }
      case LayerKind::kRelu:
        next = cur;
        for (double& v : next) v = std::max(v, 0.0);
        break;
      case LayerKind::kMaxPool2x2: {
        const int c = shape[0], h = shape[1], w = shape[2];
        const int oh = h / 2, ow = w / 2;
        next.assign(static_cast<std::size_t>(c) * oh * ow, 0.0);
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
              double m = -1e300;
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) m = std::max(m, cur[(ch * h + 2 * y + dy) * w + 2 * x + dx]);
              next[(ch * oh + y) * ow + x] = m;
            }
        shape = {c, oh, ow};
        break;
      }
      case LayerKind::kFlatten:
        next = cur;
        shape = {static_cast<int>(cur.size())};
        break;
      case LayerKind::kDense:
        next.assign(l.out_features, 0.0);
        for (int o = 0; o < l.out_features; ++o) {
          double s = params[1][o];
          for (int j = 0; j < l.in_features; ++j) s += double(params[0][o * l.in_features + j]) * cur[j];
          next[o] = s;
        }
        shape = {l.out_features};
        break;
      case LayerKind::kBatchNorm: {
        next = cur;
        const std::size_t per = cur.size() / l.channels;
        for (int ch = 0; ch < l.channels; ++ch)
          for (std::size_t j = 0; j < per; ++j) {
            double& v = next[ch * per + j];
            v = params[0][ch] * (v - params[2][ch]) / std::sqrt(double(params[3][ch]) + l.epsilon) + params[1][ch];
          }
        break;
      }
      case LayerKind::kSoftmax:
        next = cur;  // logits are taken before the trailing softmax
        break;
    }
    cur = std::move(next);
  }
  return cur;
}

inline std::vector<double> softmax(std::vector<double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double& x : v) s += (x = std::exp(x - m));
  for (double& x : v) x /= s;
  return v;
}

inline double cross_entropy(const segloo::nn::Network& net, const std::vector<double>& x, int label) {
  const auto logits = forward_logits(net, x);
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  return m + std::log(s) - logits[label];
}

// Central difference of f at coordinate i.
template <typename F>
double central_difference(F&& f, std::vector<double> x, std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

// True when f is smooth around coordinate i at scale h: the central differences at h and
// h/10 agree. Piecewise-linear layers make some coordinates straddle a kink.
template <typename F>
bool smooth_at(F&& f, const std::vector<double>& x, std::size_t i, double h) {
  const double a = central_difference(f, x, i, h);
  const double b = central_difference(f, x, i, h / 10);
  return std::fabs(a - b) <= 1e-5 * std::max({std::fabs(a), std::fabs(b), 1e-2});
}

inline double relative_error(double a, double b, double floor = 1e-4) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

// Mean cross-entropy over a batch, in double.
inline double batch_cross_entropy(const segloo::nn::Network& net, const segloo::Tensor& batch, std::span<const int> labels) {
  double total = 0.0;
  for (int b = 0; b < batch.dim(0); ++b) {
    const auto item = batch.item(b);
    total += cross_entropy(net, std::vector<double>(item.begin(), item.end()), labels[b]);
  }
  return total / batch.dim(0);
}

// Central difference of the mean cross-entropy in one parameter, divided by the step the
// float parameter actually took. `smooth` reports whether steps h and h/10 agree.
inline double parameter_difference(segloo::nn::Network& net, std::size_t tensor, std::size_t index,
                                   const segloo::Tensor& batch, std::span<const int> labels, double h, bool* smooth) {
  float& w = net.all_params()[tensor]->values()[index];
  const float w0 = w;
  auto diff = [&](double step) {
    const float up = static_cast<float>(w0 + step), down = static_cast<float>(w0 - step);
    w = up;
    const double fu = batch_cross_entropy(net, batch, labels);
    w = down;
    const double fd = batch_cross_entropy(net, batch, labels);
    w = w0;
    return (fu - fd) / (double(up) - double(down));
  };
  const double a = diff(h);
  if (smooth) {
    const double b = diff(h / 10);
    *smooth = std::fabs(a - b) <= 1e-4 * std::max({std::fabs(a), std::fabs(b), 1e-2});
  }
  return a;
}

}  // namespace oracle
