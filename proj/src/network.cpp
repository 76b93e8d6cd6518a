#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include <nlohmann/json.hpp>

#include "internal/rng.hpp"
#include "segloo/error.hpp"
#include "segloo/fileio.hpp"
#include "segloo/nn.hpp"

namespace segloo::nn {

using json = nlohmann::json;

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool2x2: return "maxpool2x2";
    case LayerKind::kDense: return "dense";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kSoftmax: return "softmax";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  if (name == "conv2d" || name == "conv") return LayerKind::kConv2d;
  if (name == "relu") return LayerKind::kRelu;
  if (name == "maxpool2x2" || name == "maxpool") return LayerKind::kMaxPool2x2;
  if (name == "dense" || name == "linear") return LayerKind::kDense;
  if (name == "flatten") return LayerKind::kFlatten;
  if (name == "batchnorm" || name == "batchnorm-inference") return LayerKind::kBatchNorm;
  if (name == "softmax") return LayerKind::kSoftmax;
  fail(ErrorKind::kConfig, "unknown layer kind '" + name + "'");
}

std::string LayerSpec::describe() const {
  const std::string k = layer_kind_name(kind);
  switch (kind) {
    case LayerKind::kConv2d:
      return k + " " + std::to_string(in_channels) + "->" + std::to_string(out_channels) + " k" +
             std::to_string(kernel) + " s" + std::to_string(stride) + " p" + std::to_string(padding);
    case LayerKind::kDense:
      return k + " " + std::to_string(in_features) + "->" + std::to_string(out_features);
    case LayerKind::kBatchNorm:
      return k + " " + std::to_string(channels);
    default:
      return k;
  }
}

ArchConfig ArchConfig::parse(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("architecture config is not valid JSON: ") + e.what());
  }
  ArchConfig arch;
  try {
    arch.name = j.value("name", "");
    arch.input_shape = j.at("input_shape").get<Shape>();
    arch.class_count = j.value("class_count", 10);
    if (j.contains("parameter_count")) arch.declared_parameter_count = j.at("parameter_count").get<std::size_t>();
    for (const auto& l : j.at("layers")) {
      LayerSpec spec;
      spec.kind = parse_layer_kind(l.at("kind").get<std::string>());
      switch (spec.kind) {
        case LayerKind::kConv2d:
          spec.in_channels = l.at("in_channels").get<int>();
          spec.out_channels = l.at("out_channels").get<int>();
          spec.kernel = l.at("kernel").get<int>();
          spec.stride = l.value("stride", 1);
          spec.padding = l.value("padding", 0);
          break;
        case LayerKind::kDense:
          spec.in_features = l.at("in_features").get<int>();
          spec.out_features = l.at("out_features").get<int>();
          break;
        case LayerKind::kBatchNorm:
          spec.channels = l.at("channels").get<int>();
          spec.epsilon = l.value("epsilon", 1e-5f);
          break;
        default:
          break;
      }
      arch.layers.push_back(spec);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("architecture config missing field: ") + e.what());
  }
  return arch;
}

ArchConfig ArchConfig::load(const std::filesystem::path& path) {
  try {
    return parse(io::read_text(path));
  } catch (const Error& e) {
    fail(e.kind() == ErrorKind::kData ? ErrorKind::kConfig : e.kind(), path.string() + ": " + e.what());
  }
}

std::string ArchConfig::to_json() const {
  json j;
  j["name"] = name;
  j["input_shape"] = input_shape;
  j["class_count"] = class_count;
  if (declared_parameter_count) j["parameter_count"] = *declared_parameter_count;
  json layers_json = json::array();
  for (const auto& l : layers) {
    json lj;
    lj["kind"] = layer_kind_name(l.kind);
    if (l.kind == LayerKind::kConv2d) {
      lj["in_channels"] = l.in_channels;
      lj["out_channels"] = l.out_channels;
      lj["kernel"] = l.kernel;
      lj["stride"] = l.stride;
      lj["padding"] = l.padding;
    } else if (l.kind == LayerKind::kDense) {
      lj["in_features"] = l.in_features;
      lj["out_features"] = l.out_features;
    } else if (l.kind == LayerKind::kBatchNorm) {
      lj["channels"] = l.channels;
      lj["epsilon"] = l.epsilon;
    }
    layers_json.push_back(lj);
  }
  j["layers"] = layers_json;
  return j.dump(2);
}

const Tensor& ForwardTrace::at(int layer) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] == layer) return values[i];
  }
  fail(ErrorKind::kConfig, "layer " + std::to_string(layer) + " not in trace");
}

void softmax_inplace(std::span<float> row) {
  if (row.empty()) return;
  const float m = *std::max_element(row.begin(), row.end());
  float sum = 0.0f;
  for (float& v : row) {
    v = std::exp(v - m);
    sum += v;
  }
  for (float& v : row) v /= sum;
}

int argmax(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

// ---------------------------------------------------------------------------
// Construction

namespace {

std::string layer_label(std::size_t i, const LayerSpec& l) {
  return "layer " + std::to_string(i) + " (" + l.describe() + ")";
}

}  // namespace

Network Network::build(const ArchConfig& arch, std::uint64_t seed) {
  require(arch.input_shape.size() == 3 || arch.input_shape.size() == 1, ErrorKind::kConfig,
          "input_shape must be [C,H,W] or [features]");
  require(shape_size(arch.input_shape) > 0, ErrorKind::kConfig, "input_shape has zero size");
  require(arch.class_count >= 2, ErrorKind::kConfig, "class_count must be at least 2");
  require(!arch.layers.empty(), ErrorKind::kConfig, "architecture has no layers");

  Network net;
  net.arch_ = arch;
  detail::Rng rng(seed);
  Shape cur = arch.input_shape;
  std::string prev = "input " + shape_string(cur);

  auto he_uniform = [&](Shape shape, int fan_in) {
    Tensor t(std::move(shape));
    const double limit = std::sqrt(6.0 / std::max(1, fan_in));
    for (float& v : t.values()) v = static_cast<float>(rng.uniform(-limit, limit));
    return t;
  };

  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const std::string here = layer_label(i, l);
    auto mismatch = [&](const std::string& expected) {
      fail(ErrorKind::kConfig, "shape mismatch: " + here + " expects " + expected + " but " + prev + " produces " +
                                   shape_string(cur));
    };
    std::vector<Tensor> params;
    switch (l.kind) {
      case LayerKind::kConv2d: {
        require(l.in_channels > 0 && l.out_channels > 0 && l.kernel > 0 && l.stride > 0 && l.padding >= 0,
                ErrorKind::kConfig, here + ": invalid conv2d parameters");
        if (cur.size() != 3 || cur[0] != l.in_channels) mismatch("[" + std::to_string(l.in_channels) + "xHxW]");
        const int oh = (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1;
        const int ow = (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1;
        if (oh <= 0 || ow <= 0) mismatch("spatial extent >= kernel " + std::to_string(l.kernel));
        const int fan_in = l.in_channels * l.kernel * l.kernel;
        params.push_back(he_uniform({l.out_channels, l.in_channels, l.kernel, l.kernel}, fan_in));
        params.emplace_back(Shape{l.out_channels}, 0.0f);
        cur = {l.out_channels, oh, ow};
        break;
      }
      case LayerKind::kRelu:
        break;
      case LayerKind::kMaxPool2x2:
        if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) mismatch("[CxHxW] with H,W >= 2");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::kFlatten:
        cur = {static_cast<int>(shape_size(cur))};
        break;
      case LayerKind::kDense: {
        require(l.in_features > 0 && l.out_features > 0, ErrorKind::kConfig, here + ": invalid dense parameters");
        if (cur.size() != 1 || cur[0] != l.in_features) mismatch(std::to_string(l.in_features) + " inputs");
        params.push_back(he_uniform({l.out_features, l.in_features}, l.in_features));
        params.emplace_back(Shape{l.out_features}, 0.0f);
        cur = {l.out_features};
        break;
      }
      case LayerKind::kBatchNorm: {
        require(l.channels > 0 && l.epsilon > 0.0f, ErrorKind::kConfig, here + ": invalid batchnorm parameters");
        if (cur.empty() || cur[0] != l.channels) mismatch(std::to_string(l.channels) + " channels");
        params.emplace_back(Shape{l.channels}, 1.0f);  // gamma
        params.emplace_back(Shape{l.channels}, 0.0f);  // beta
        params.emplace_back(Shape{l.channels}, 0.0f);  // running mean
        params.emplace_back(Shape{l.channels}, 1.0f);  // running variance
        break;
      }
      case LayerKind::kSoftmax:
        require(i + 1 == arch.layers.size(), ErrorKind::kConfig, here + ": softmax is only allowed as the final layer");
        require(i > 0, ErrorKind::kConfig, here + ": softmax cannot be the only layer");
        if (cur.size() != 1) mismatch("a flat vector");
        net.trailing_softmax_ = true;
        break;
    }
    net.params_.push_back(std::move(params));
    net.out_shapes_.push_back(cur);
    prev = here;
  }
  require(cur.size() == 1 && cur[0] == arch.class_count, ErrorKind::kConfig,
          "network output " + shape_string(cur) + " does not match class_count " + std::to_string(arch.class_count));
  if (arch.declared_parameter_count) {
    require(*arch.declared_parameter_count == net.parameter_count(), ErrorKind::kConfig,
            "config declares " + std::to_string(*arch.declared_parameter_count) + " parameters but the layers hold " +
                std::to_string(net.parameter_count()));
  }
  return net;
}

std::size_t Network::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& layer : params_) {
    for (const auto& t : layer) n += t.size();
  }
  return n;
}

std::size_t Network::tap_layer_count() const noexcept { return layer_count() - (trailing_softmax_ ? 1 : 0); }

std::vector<std::string> Network::param_names() const {
  static const char* const kConvNames[] = {"weight", "bias"};
  static const char* const kBnNames[] = {"gamma", "beta", "mean", "var"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const bool bn = arch_.layers[i].kind == LayerKind::kBatchNorm;
    for (std::size_t j = 0; j < params_[i].size(); ++j) {
      names.push_back("layer" + std::to_string(i) + "." + (bn ? kBnNames[j] : kConvNames[j]));
    }
  }
  return names;
}

std::vector<const Tensor*> Network::all_params() const {
  std::vector<const Tensor*> out;
  for (const auto& layer : params_) {
    for (const auto& t : layer) out.push_back(&t);
  }
  return out;
}

std::vector<Tensor*> Network::all_params() {
  std::vector<Tensor*> out;
  for (auto& layer : params_) {
    for (auto& t : layer) out.push_back(&t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-image kernels

struct Network::Activations {
  const float* input = nullptr;
  std::vector<std::vector<float>> outs;  // one per executed layer (trailing softmax excluded)
  std::vector<float> probs;
};

namespace {

void conv2d_forward(const LayerSpec& l, const Shape& in_shape, const Shape& out_shape, const float* in,
                    const Tensor& weight, const Tensor& bias, float* out, std::vector<float>& padded) {
  const int cin = in_shape[0], h = in_shape[1], w = in_shape[2];
  const int cout = out_shape[0], oh = out_shape[1], ow = out_shape[2];
  const int k = l.kernel, s = l.stride, p = l.padding;
  const int hp = h + 2 * p, wp = w + 2 * p;
  padded.assign(static_cast<std::size_t>(cin) * hp * wp, 0.0f);
  for (int c = 0; c < cin; ++c) {
    for (int y = 0; y < h; ++y) {
      std::memcpy(&padded[(static_cast<std::size_t>(c) * hp + y + p) * wp + p], in + (static_cast<std::size_t>(c) * h + y) * w,
                  sizeof(float) * w);
    }
  }
  const float* wt = weight.data();
  for (int oc = 0; oc < cout; ++oc) {
    float* plane = out + static_cast<std::size_t>(oc) * oh * ow;
    std::fill(plane, plane + static_cast<std::size_t>(oh) * ow, bias[oc]);
    for (int ic = 0; ic < cin; ++ic) {
      const float* src_plane = padded.data() + static_cast<std::size_t>(ic) * hp * wp;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const float wv = wt[((static_cast<std::size_t>(oc) * cin + ic) * k + ky) * k + kx];
          for (int oy = 0; oy < oh; ++oy) {
            const float* src = src_plane + static_cast<std::size_t>(oy * s + ky) * wp + kx;
            float* dst = plane + static_cast<std::size_t>(oy) * ow;
            if (s == 1) {
              for (int ox = 0; ox < ow; ++ox) dst[ox] += wv * src[ox];
            } else {
              for (int ox = 0; ox < ow; ++ox) dst[ox] += wv * src[ox * s];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward(const LayerSpec& l, const Shape& in_shape, const Shape& out_shape, const float* in,
                     const Tensor& weight, const float* grad_out, float* grad_in, Tensor* grad_w, Tensor* grad_b) {
  const int cin = in_shape[0], h = in_shape[1], w = in_shape[2];
  const int cout = out_shape[0], oh = out_shape[1], ow = out_shape[2];
  const int k = l.kernel, s = l.stride, p = l.padding;
  const int hp = h + 2 * p, wp = w + 2 * p;
  std::vector<float> padded(static_cast<std::size_t>(cin) * hp * wp, 0.0f);
  std::vector<float> grad_padded(padded.size(), 0.0f);
  for (int c = 0; c < cin; ++c) {
    for (int y = 0; y < h; ++y) {
      std::memcpy(&padded[(static_cast<std::size_t>(c) * hp + y + p) * wp + p], in + (static_cast<std::size_t>(c) * h + y) * w,
                  sizeof(float) * w);
    }
  }
  const float* wt = weight.data();
  for (int oc = 0; oc < cout; ++oc) {
    const float* g_plane = grad_out + static_cast<std::size_t>(oc) * oh * ow;
    if (grad_b) {
      float sum = 0.0f;
      for (int i = 0; i < oh * ow; ++i) sum += g_plane[i];
      (*grad_b)[oc] += sum;
    }
    for (int ic = 0; ic < cin; ++ic) {
      const std::size_t plane_off = static_cast<std::size_t>(ic) * hp * wp;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((static_cast<std::size_t>(oc) * cin + ic) * k + ky) * k + kx;
          const float wv = wt[widx];
          float gw = 0.0f;
          for (int oy = 0; oy < oh; ++oy) {
            const std::size_t row = plane_off + static_cast<std::size_t>(oy * s + ky) * wp + kx;
            const float* g = g_plane + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              gw += g[ox] * padded[row + static_cast<std::size_t>(ox) * s];
              grad_padded[row + static_cast<std::size_t>(ox) * s] += wv * g[ox];
            }
          }
          if (grad_w) (*grad_w)[widx] += gw;
        }
      }
    }
  }
  for (int c = 0; c < cin; ++c) {
    for (int y = 0; y < h; ++y) {
      std::memcpy(grad_in + (static_cast<std::size_t>(c) * h + y) * w,
                  &grad_padded[(static_cast<std::size_t>(c) * hp + y + p) * wp + p], sizeof(float) * w);
    }
  }
}

void maxpool_forward(const Shape& in_shape, const Shape& out_shape, const float* in, float* out) {
  const int c = in_shape[0], h = in_shape[1], w = in_shape[2];
  const int oh = out_shape[1], ow = out_shape[2];
  for (int ch = 0; ch < c; ++ch) {
    const float* src = in + static_cast<std::size_t>(ch) * h * w;
    float* dst = out + static_cast<std::size_t>(ch) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      const float* r0 = src + static_cast<std::size_t>(2 * y) * w;
      const float* r1 = r0 + w;
      for (int x = 0; x < ow; ++x) {
        dst[y * ow + x] = std::max(std::max(r0[2 * x], r0[2 * x + 1]), std::max(r1[2 * x], r1[2 * x + 1]));
      }
    }
  }
}

void maxpool_backward(const Shape& in_shape, const Shape& out_shape, const float* in, const float* grad_out,
                      float* grad_in) {
  const int c = in_shape[0], h = in_shape[1], w = in_shape[2];
  const int oh = out_shape[1], ow = out_shape[2];
  std::fill(grad_in, grad_in + static_cast<std::size_t>(c) * h * w, 0.0f);
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t base = static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        // First maximum in scan order receives the gradient.
        std::size_t best = base + static_cast<std::size_t>(2 * y) * w + 2 * x;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t idx : cand) {
          if (in[idx] > in[best]) best = idx;
        }
        grad_in[best] += grad_out[static_cast<std::size_t>(ch) * oh * ow + y * ow + x];
      }
    }
  }
}

void batchnorm_forward(const LayerSpec& l, const Shape& shape, std::span<const Tensor> p, const float* in, float* out) {
  const std::size_t per_channel = shape_size(shape) / static_cast<std::size_t>(l.channels);
  for (int c = 0; c < l.channels; ++c) {
    const float scale = p[0][c] / std::sqrt(p[3][c] + l.epsilon);
    const float shift = p[1][c] - p[2][c] * scale;
    for (std::size_t i = 0; i < per_channel; ++i) {
      const std::size_t idx = c * per_channel + i;
      out[idx] = in[idx] * scale + shift;
    }
  }
}

}  // namespace

void Network::check_batch(const Tensor& batch) const {
  const Shape& s = batch.shape();
  Shape expected{0};
  expected.insert(expected.end(), arch_.input_shape.begin(), arch_.input_shape.end());
  bool ok = s.size() == expected.size() && !s.empty() && s[0] >= 1;
  for (std::size_t i = 1; ok && i < s.size(); ++i) ok = s[i] == expected[i];
  require(ok, ErrorKind::kConfig,
          "batch shape " + shape_string(s) + " does not match network input Nx" + shape_string(arch_.input_shape));
  require(batch.all_finite(), ErrorKind::kNumeric, "batch contains non-finite values");
}

void Network::forward_image(const float* input, Activations& acts) const {
  thread_local std::vector<float> padded;
  const std::size_t executed = tap_layer_count();
  acts.input = input;
  acts.outs.resize(executed);
  const float* cur = input;
  Shape cur_shape = arch_.input_shape;
  for (std::size_t i = 0; i < executed; ++i) {
    const LayerSpec& l = arch_.layers[i];
    const Shape& out_shape = out_shapes_[i];
    auto& out = acts.outs[i];
    out.resize(shape_size(out_shape));
    const std::size_t n_in = shape_size(cur_shape);
    switch (l.kind) {
      case LayerKind::kConv2d:
        conv2d_forward(l, cur_shape, out_shape, cur, params_[i][0], params_[i][1], out.data(), padded);
        break;
      case LayerKind::kRelu:
        for (std::size_t j = 0; j < n_in; ++j) out[j] = cur[j] > 0.0f ? cur[j] : 0.0f;
        break;
      case LayerKind::kMaxPool2x2:
        maxpool_forward(cur_shape, out_shape, cur, out.data());
        break;
      case LayerKind::kFlatten:
        std::copy(cur, cur + n_in, out.begin());
        break;
      case LayerKind::kDense: {
        const float* wt = params_[i][0].data();
        const int nin = l.in_features;
        for (int o = 0; o < l.out_features; ++o) {
          const float* row = wt + static_cast<std::size_t>(o) * nin;
          float sum = 0.0f;
          for (int j = 0; j < nin; ++j) sum += row[j] * cur[j];
          out[o] = sum + params_[i][1][o];
        }
        break;
      }
      case LayerKind::kBatchNorm:
        batchnorm_forward(l, cur_shape, params_[i], cur, out.data());
        break;
      case LayerKind::kSoftmax:
        break;  // unreachable: only trailing, and excluded from executed layers
    }
    cur = out.data();
    cur_shape = out_shape;
  }
  acts.probs.assign(acts.outs.back().begin(), acts.outs.back().end());
  softmax_inplace(acts.probs);
}

ForwardResult Network::forward(const Tensor& batch, std::span<const int> taps) const {
  check_batch(batch);
  const std::size_t executed = tap_layer_count();
  for (int t : taps) {
    require(t >= 0 && static_cast<std::size_t>(t) < executed, ErrorKind::kConfig,
            "unknown tap layer id " + std::to_string(t));
  }
  const int n = batch.dim(0);
  const int classes = arch_.class_count;
  ForwardResult result;
  result.logits = Tensor({n, classes});
  result.probs = Tensor({n, classes});
  result.trace.layers.assign(taps.begin(), taps.end());
  for (int t : taps) {
    Shape s{n};
    s.insert(s.end(), out_shapes_[t].begin(), out_shapes_[t].end());
    result.trace.values.emplace_back(std::move(s));
  }
  Activations acts;
  for (int b = 0; b < n; ++b) {
    forward_image(batch.item(b).data(), acts);
    const auto& logits = acts.outs.back();
    std::copy(logits.begin(), logits.end(), result.logits.item(b).begin());
    std::copy(acts.probs.begin(), acts.probs.end(), result.probs.item(b).begin());
    for (std::size_t k = 0; k < taps.size(); ++k) {
      const int t = taps[k];
      const bool output_tap = trailing_softmax_ && static_cast<std::size_t>(t) + 1 == executed;
      const auto& src = output_tap ? acts.probs : acts.outs[t];
      std::copy(src.begin(), src.end(), result.trace.values[k].item(b).begin());
    }
  }
  require(result.logits.all_finite(), ErrorKind::kNumeric, "forward produced non-finite logits");
  return result;
}

void Network::backward_image(const Activations& acts, std::span<const float> grad_logits, float* grad_input,
                             std::vector<std::vector<Tensor>>* param_grads) const {
  const std::size_t executed = tap_layer_count();
  std::vector<float> grad(grad_logits.begin(), grad_logits.end());
  std::vector<float> grad_prev;
  for (std::size_t ii = executed; ii-- > 0;) {
    const LayerSpec& l = arch_.layers[ii];
    const Shape& in_shape = ii == 0 ? arch_.input_shape : out_shapes_[ii - 1];
    const Shape& out_shape = out_shapes_[ii];
    const float* in = ii == 0 ? acts.input : acts.outs[ii - 1].data();
    const std::size_t n_in = shape_size(in_shape);
    grad_prev.assign(n_in, 0.0f);
    switch (l.kind) {
      case LayerKind::kConv2d:
        conv2d_backward(l, in_shape, out_shape, in, params_[ii][0], grad.data(), grad_prev.data(),
                        param_grads ? &(*param_grads)[ii][0] : nullptr, param_grads ? &(*param_grads)[ii][1] : nullptr);
        break;
      case LayerKind::kRelu:
        for (std::size_t j = 0; j < n_in; ++j) grad_prev[j] = in[j] > 0.0f ? grad[j] : 0.0f;
        break;
      case LayerKind::kMaxPool2x2:
        maxpool_backward(in_shape, out_shape, in, grad.data(), grad_prev.data());
        break;
      case LayerKind::kFlatten:
        std::copy(grad.begin(), grad.end(), grad_prev.begin());
        break;
      case LayerKind::kDense: {
        const float* wt = params_[ii][0].data();
        const int nin = l.in_features;
        for (int o = 0; o < l.out_features; ++o) {
          const float g = grad[o];
          if (g == 0.0f) continue;
          const float* row = wt + static_cast<std::size_t>(o) * nin;
          for (int j = 0; j < nin; ++j) grad_prev[j] += row[j] * g;
          if (param_grads) {
            float* gw = (*param_grads)[ii][0].data() + static_cast<std::size_t>(o) * nin;
            for (int j = 0; j < nin; ++j) gw[j] += g * in[j];
            (*param_grads)[ii][1][o] += g;
          }
        }
        break;
      }
      case LayerKind::kBatchNorm: {
        // Statistics and affine terms are frozen; only the input gradient flows.
        const auto& p = params_[ii];
        const std::size_t per_channel = n_in / static_cast<std::size_t>(l.channels);
        for (int c = 0; c < l.channels; ++c) {
          const float scale = p[0][c] / std::sqrt(p[3][c] + l.epsilon);
          for (std::size_t j = 0; j < per_channel; ++j) grad_prev[c * per_channel + j] = grad[c * per_channel + j] * scale;
        }
        break;
      }
      case LayerKind::kSoftmax:
        break;
    }
    grad.swap(grad_prev);
  }
  std::copy(grad.begin(), grad.end(), grad_input);
}

Tensor Network::input_gradient(const Tensor& batch, std::span<const int> labels) const {
  check_batch(batch);
  const int n = batch.dim(0);
  require(labels.size() == static_cast<std::size_t>(n), ErrorKind::kConfig, "label count does not match batch");
  Tensor grad(batch.shape());
  Activations acts;
  std::vector<float> g(arch_.class_count);
  for (int b = 0; b < n; ++b) {
    require(labels[b] >= 0 && labels[b] < arch_.class_count, ErrorKind::kConfig,
            "label " + std::to_string(labels[b]) + " out of range");
    forward_image(batch.item(b).data(), acts);
    for (int c = 0; c < arch_.class_count; ++c) g[c] = acts.probs[c] - (c == labels[b] ? 1.0f : 0.0f);
    backward_image(acts, g, grad.item(b).data(), nullptr);
  }
  require(grad.all_finite(), ErrorKind::kNumeric, "input gradient is non-finite");
  return grad;
}

std::vector<Tensor> Network::parameter_gradients(const Tensor& batch, std::span<const int> labels) const {
  check_batch(batch);
  const int n = batch.dim(0);
  require(labels.size() == static_cast<std::size_t>(n), ErrorKind::kConfig, "label count does not match batch");
  std::vector<std::vector<Tensor>> grads;
  for (const auto& layer : params_) {
    std::vector<Tensor> g;
    for (const auto& t : layer) g.emplace_back(t.shape());
    grads.push_back(std::move(g));
  }
  Activations acts;
  std::vector<float> g(arch_.class_count);
  std::vector<float> grad_input(shape_size(arch_.input_shape));
  const float inv = 1.0f / static_cast<float>(n);
  for (int b = 0; b < n; ++b) {
    require(labels[b] >= 0 && labels[b] < arch_.class_count, ErrorKind::kConfig,
            "label " + std::to_string(labels[b]) + " out of range");
    forward_image(batch.item(b).data(), acts);
    for (int c = 0; c < arch_.class_count; ++c) g[c] = (acts.probs[c] - (c == labels[b] ? 1.0f : 0.0f)) * inv;
    backward_image(acts, g, grad_input.data(), &grads);
  }
  std::vector<Tensor> out;
  for (auto& layer : grads)
    for (auto& t : layer) out.push_back(std::move(t));
  return out;
}

Tensor Network::logit_gradient(const Tensor& batch, int class_index) const {
  check_batch(batch);
  require(class_index >= 0 && class_index < arch_.class_count, ErrorKind::kConfig,
          "class index " + std::to_string(class_index) + " out of range");
  Tensor grad(batch.shape());
  Activations acts;
  std::vector<float> g(arch_.class_count, 0.0f);
  g[class_index] = 1.0f;
  for (int b = 0; b < batch.dim(0); ++b) {
    forward_image(batch.item(b).data(), acts);
    backward_image(acts, g, grad.item(b).data(), nullptr);
  }
  return grad;
}

std::pair<Tensor, Tensor> Network::logit_jacobian(const Tensor& image) const {
  check_batch(image);
  require(image.dim(0) == 1, ErrorKind::kConfig, "logit_jacobian takes a single image");
  const int classes = arch_.class_count;
  Shape js = image.shape();
  js[0] = classes;
  Tensor jac(js);
  Activations acts;
  forward_image(image.data(), acts);
  Tensor logits({1, classes}, std::vector<float>(acts.outs.back().begin(), acts.outs.back().end()));
  std::vector<float> g(classes, 0.0f);
  for (int k = 0; k < classes; ++k) {
    std::fill(g.begin(), g.end(), 0.0f);
    g[k] = 1.0f;
    backward_image(acts, g, jac.item(k).data(), nullptr);
  }
  require(jac.all_finite(), ErrorKind::kNumeric, "logit gradient is non-finite");
  return {std::move(logits), std::move(jac)};
}

Tensor Network::prob_gradient(const Tensor& batch, int class_index) const {
  check_batch(batch);
  require(class_index >= 0 && class_index < arch_.class_count, ErrorKind::kConfig,
          "class index " + std::to_string(class_index) + " out of range");
  Tensor grad(batch.shape());
  Activations acts;
  std::vector<float> g(arch_.class_count);
  for (int b = 0; b < batch.dim(0); ++b) {
    forward_image(batch.item(b).data(), acts);
    const float pk = acts.probs[class_index];
    for (int c = 0; c < arch_.class_count; ++c) g[c] = pk * ((c == class_index ? 1.0f : 0.0f) - acts.probs[c]);
    backward_image(acts, g, grad.item(b).data(), nullptr);
  }
  return grad;
}

double Network::loss(const Tensor& batch, std::span<const int> labels) const {
  const auto res = forward(batch);
  require(labels.size() == static_cast<std::size_t>(batch.dim(0)), ErrorKind::kConfig, "label count does not match batch");
  double total = 0.0;
  for (int b = 0; b < batch.dim(0); ++b) {
    const auto logits = res.logits.item(b);
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (float v : logits) sum += std::exp(v - m);
    total += m + std::log(sum) - logits[labels[b]];
  }
  return total / batch.dim(0);
}

// ---------------------------------------------------------------------------
// Training

TrainReport train(Network& net, const Tensor& images, std::span<const int> labels, const TrainHyper& hyper,
                  const std::function<void(int, double, double)>& on_epoch) {
  require(!images.empty() && images.dim(0) > 0, ErrorKind::kData, "training set is empty");
  net.check_batch(images);
  const int n = images.dim(0);
  require(labels.size() == static_cast<std::size_t>(n), ErrorKind::kConfig, "label count does not match images");
  require(hyper.batch_size >= 1 && hyper.epochs >= 0, ErrorKind::kConfig, "invalid training hyperparameters");
  for (int y : labels) {
    require(y >= 0 && y < net.class_count(), ErrorKind::kData, "training label out of range");
  }

  std::vector<std::vector<Tensor>> grads, velocity;
  for (const auto& layer : net.params_) {
    std::vector<Tensor> g;
    for (const auto& t : layer) g.emplace_back(t.shape());
    grads.push_back(g);
    velocity.push_back(std::move(g));
  }

  TrainReport report;
  detail::Rng rng(hyper.seed);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Network::Activations acts;
  std::vector<float> g(net.class_count());
  std::vector<float> grad_input(shape_size(net.input_shape()));
  bool first_batch = true;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    int correct = 0;
    for (int start = 0; start < n; start += hyper.batch_size) {
      const int end = std::min(n, start + hyper.batch_size);
      const float inv = 1.0f / static_cast<float>(end - start);
      for (auto& layer : grads) {
        for (auto& t : layer) std::fill(t.values().begin(), t.values().end(), 0.0f);
      }
      double batch_loss = 0.0;
      for (int k = start; k < end; ++k) {
        const int idx = order[k];
        net.forward_image(images.item(idx).data(), acts);
        const int y = labels[idx];
        batch_loss -= std::log(std::max(acts.probs[y], std::numeric_limits<float>::min()));
        if (argmax(acts.probs) == y) ++correct;
        for (int c = 0; c < net.class_count(); ++c) g[c] = (acts.probs[c] - (c == y ? 1.0f : 0.0f)) * inv;
        net.backward_image(acts, g, grad_input.data(), &grads);
      }
      if (first_batch) {
        report.initial_loss = batch_loss / (end - start);
        first_batch = false;
      }
      loss_sum += batch_loss;
      for (std::size_t li = 0; li < net.params_.size(); ++li) {
        if (net.arch_.layers[li].kind == LayerKind::kBatchNorm) continue;
        for (std::size_t ti = 0; ti < net.params_[li].size(); ++ti) {
          auto w = net.params_[li][ti].values();
          auto v = velocity[li][ti].values();
          auto gr = grads[li][ti].values();
          for (std::size_t j = 0; j < w.size(); ++j) {
            v[j] = hyper.momentum * v[j] - hyper.lr * (gr[j] + hyper.weight_decay * w[j]);
            w[j] += v[j];
          }
        }
      }
    }
    const double mean_loss = loss_sum / n;
    const double acc = static_cast<double>(correct) / n;
    require(std::isfinite(mean_loss), ErrorKind::kNumeric, "training diverged (non-finite loss)");
    report.epoch_loss.push_back(mean_loss);
    report.epoch_accuracy.push_back(acc);
    if (on_epoch) on_epoch(epoch, mean_loss, acc);
  }
  return report;
}

}  // namespace segloo::nn
