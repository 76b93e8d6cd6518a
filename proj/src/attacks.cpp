#include "segloo/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include "internal/params.hpp"
#include "internal/rng.hpp"
#include "segloo/error.hpp"

namespace segloo::attack {

const char* method_name(Method m) {
  switch (m) {
    case Method::kFgsm: return "fgsm";
    case Method::kPgd: return "pgd";
    case Method::kDeepFool: return "deepfool";
  }
  return "?";
}

AttackParams AttackParams::parse(const std::string& text) {
  const auto [name, kv] = detail::parse_cell(text);
  AttackParams p;
  if (name == "fgsm") p.method = Method::kFgsm;
  else if (name == "pgd") p.method = Method::kPgd;
  else if (name == "deepfool") p.method = Method::kDeepFool;
  else fail(ErrorKind::kConfig, "unknown attack '" + name + "'");
  for (const auto& [k, v] : kv) {
    if (k == "eps" || k == "epsilon") p.epsilons = detail::to_doubles(k, v);
    else if (k == "steps") p.steps = static_cast<int>(detail::to_integer(k, v));
    else if (k == "step" || k == "step_size") p.step_size = detail::to_double(k, v);
    else if (k == "random_start") p.random_start = detail::to_integer(k, v) != 0;
    else if (k == "overshoot") p.overshoot = detail::to_double(k, v);
    else if (k == "max_iter") p.max_iter = static_cast<int>(detail::to_integer(k, v));
    else if (k == "seed") p.seed = static_cast<std::uint64_t>(detail::to_integer(k, v));
    else fail(ErrorKind::kConfig, "unknown " + name + " parameter '" + k + "'");
  }
  p.validate();
  return p;
}

std::string AttackParams::to_string() const {
  std::string s = method_name(method);
  if (method == Method::kDeepFool) {
    return s + ":overshoot=" + detail::fmt(overshoot) + ",max_iter=" + std::to_string(max_iter);
  }
  s += ":eps=";
  for (std::size_t i = 0; i < epsilons.size(); ++i) s += (i ? "," : "") + detail::fmt(epsilons[i]);
  if (method == Method::kPgd) {
    s += ",steps=" + std::to_string(steps);
    if (step_size) s += ",step=" + detail::fmt(*step_size);
    s += ",random_start=" + std::to_string(random_start ? 1 : 0) + ",seed=" + std::to_string(seed);
  }
  return s;
}

void AttackParams::validate() const {
  require(!epsilons.empty(), ErrorKind::kConfig, "attack needs at least one epsilon");
  for (double e : epsilons) require(e >= 0.0 && std::isfinite(e), ErrorKind::kConfig, "epsilon must be >= 0");
  require(steps >= 1, ErrorKind::kConfig, "steps must be >= 1");
  require(!step_size || *step_size > 0.0, ErrorKind::kConfig, "step size must be > 0");
  require(max_iter >= 1, ErrorKind::kConfig, "max_iter must be >= 1");
  require(overshoot >= 0.0, ErrorKind::kConfig, "overshoot must be >= 0");
}

namespace {

// One image, with or without a leading batch axis of 1, as a batch of one.
Tensor as_batch(const nn::Network& net, const Tensor& image) {
  Shape s{1};
  s.insert(s.end(), net.input_shape().begin(), net.input_shape().end());
  const bool bare = image.shape() == net.input_shape();
  require(bare || image.shape() == s, ErrorKind::kConfig,
          "expected one image of shape " + shape_string(net.input_shape()) + ", got " + shape_string(image.shape()));
  return image.reshaped(s);
}

void check_range(const Tensor& x) {
  for (float v : x.values()) {
    require(v >= 0.0f && v <= 1.0f, ErrorKind::kData, "attack input outside [0, 1]");
  }
}

int predict(const nn::Network& net, const Tensor& x) { return nn::argmax(net.forward(x).probs.item(0)); }

float sign_of(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

AttackResult finish(const nn::Network& net, const Tensor& x, Tensor adv, int label, int original, double eps,
                    int iterations) {
  AttackResult r;
  r.label = label;
  r.original_class = original;
  r.adversarial_class = predict(net, adv);
  r.success = r.adversarial_class != label;
  r.epsilon = eps;
  r.iterations = iterations;
  double linf = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) linf = std::max(linf, std::fabs(double(adv[i]) - double(x[i])));
  r.linf = linf;
  Shape s(adv.shape().begin() + 1, adv.shape().end());
  r.adversarial = adv.reshaped(s);
  return r;
}

}  // namespace

void project(std::span<float> x, std::span<const float> origin, float eps) {
  require(x.size() == origin.size(), ErrorKind::kConfig, "projection size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) {
    // origin +- eps can round one ulp past the ball
    float lo = origin[i] - eps, hi = origin[i] + eps;
    if (origin[i] - lo > eps) lo = std::nextafter(lo, 1.0f + lo);
    if (hi - origin[i] > eps) hi = std::nextafter(hi, hi - 1.0f);
    x[i] = std::clamp(std::clamp(x[i], lo, hi), 0.0f, 1.0f);
  }
}

AttackResult fgsm(const nn::Network& net, const Tensor& image, int label, double epsilon) {
  require(epsilon >= 0.0, ErrorKind::kConfig, "epsilon must be >= 0");
  const Tensor x = as_batch(net, image);
  check_range(x);
  const int original = predict(net, x);
  const int labels[1] = {label};
  const Tensor g = net.input_gradient(x, labels);
  Tensor adv = x;
  const float eps = static_cast<float>(epsilon);
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = x[i] + eps * sign_of(g[i]);
  project(adv.values(), x.values(), eps);
  return finish(net, x, std::move(adv), label, original, epsilon, 1);
}

AttackResult pgd(const nn::Network& net, const Tensor& image, int label, double epsilon, double step_size, int steps,
                 bool random_start, std::uint64_t seed) {
  require(epsilon >= 0.0, ErrorKind::kConfig, "epsilon must be >= 0");
  require(step_size > 0.0 || epsilon == 0.0, ErrorKind::kConfig, "step size must be > 0");
  require(steps >= 1, ErrorKind::kConfig, "steps must be >= 1");
  const Tensor x = as_batch(net, image);
  check_range(x);
  const int original = predict(net, x);
  const float eps = static_cast<float>(epsilon), alpha = static_cast<float>(step_size);
  Tensor adv = x;
  if (random_start) {
    detail::Rng rng(seed);
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = x[i] + static_cast<float>(rng.uniform(-epsilon, epsilon));
    project(adv.values(), x.values(), eps);
  }
  const int labels[1] = {label};
  for (int s = 0; s < steps; ++s) {
    const Tensor g = net.input_gradient(adv, labels);
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = adv[i] + alpha * sign_of(g[i]);
    project(adv.values(), x.values(), eps);
  }
  return finish(net, x, std::move(adv), label, original, epsilon, steps);
}

AttackResult deepfool(const nn::Network& net, const Tensor& image, int label, int max_iter, double overshoot) {
  require(max_iter >= 1, ErrorKind::kConfig, "max_iter must be >= 1");
  const Tensor x = as_batch(net, image);
  check_range(x);
  const int classes = net.class_count();
  auto [logits, jac] = net.logit_jacobian(x);
  const int original = nn::argmax(logits.item(0));
  if (original != label) return finish(net, x, x, label, original, 0.0, 0);

  const std::size_t n = x.size();
  std::vector<double> total(n, 0.0), w(n), best_w(n);
  Tensor adv = x;
  int iterations = 0;
  int current = original;
  while (current == label && iterations < max_iter) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < classes; ++k) {
      if (k == label) continue;
      const auto gk = jac.item(k), gc = jac.item(label);
      double norm2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        w[i] = double(gk[i]) - double(gc[i]);
        norm2 += w[i] * w[i];
      }
      if (norm2 == 0.0) continue;
      const double gap = std::fabs(double(logits[k]) - double(logits[label]));
      const double dist = gap / std::sqrt(norm2);
      if (dist < best) {
        best = dist;
        best_w = w;
      }
    }
    if (!std::isfinite(best)) break;  // flat in every direction
    double norm = 0.0;
    for (double v : best_w) norm += v * v;
    norm = std::sqrt(norm);
    const double scale = (best + 1e-4) / norm;
    for (std::size_t i = 0; i < n; ++i) {
      total[i] += scale * best_w[i];
      adv[i] = std::clamp(static_cast<float>(x[i] + (1.0 + overshoot) * total[i]), 0.0f, 1.0f);
    }
    ++iterations;
    std::tie(logits, jac) = net.logit_jacobian(adv);
    current = nn::argmax(logits.item(0));
  }
  return finish(net, x, std::move(adv), label, original, 0.0, iterations);
}

AttackSummary summarize(std::span<const AttackResult> results) {
  AttackSummary s;
  s.count = results.size();
  if (results.empty()) return s;
  std::size_t clean = 0, kept = 0;
  double linf = 0.0;
  for (const auto& r : results) {
    clean += r.original_class == r.label;
    kept += r.adversarial_class == r.label;
    s.successes += r.success;
    linf += r.linf;
  }
  s.clean_accuracy = static_cast<double>(clean) / s.count;
  s.accuracy = static_cast<double>(kept) / s.count;
  s.mean_linf = linf / s.count;
  return s;
}

Tensor BatchAttack::adversarial_batch() const {
  std::vector<Tensor> items;
  items.reserve(results.size());
  for (const auto& r : results) items.push_back(r.adversarial);
  return stack(items);
}

BatchAttack attack_batch(const nn::Network& net, const Tensor& batch, std::span<const int> labels,
                         const AttackParams& params, int workers) {
  params.validate();
  require(batch.rank() == 4, ErrorKind::kConfig, "expected an N x C x H x W batch");
  const std::size_t n = static_cast<std::size_t>(batch.dim(0));
  require(labels.size() == n, ErrorKind::kConfig, "label count does not match batch");
  BatchAttack out;
  out.results.resize(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        const double eps = params.epsilons[i * params.epsilons.size() / n];
        const Tensor image = batch.item_tensor(i);
        switch (params.method) {
          case Method::kFgsm:
            out.results[i] = fgsm(net, image, labels[i], eps);
            break;
          case Method::kPgd:
            out.results[i] = pgd(net, image, labels[i], eps, params.step_size.value_or(eps / 4.0), params.steps,
                                 params.random_start, detail::mix_seed(params.seed, i));
            break;
          case Method::kDeepFool:
            out.results[i] = deepfool(net, image, labels[i], params.max_iter, params.overshoot);
            break;
        }
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  const int count = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (count == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < count; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  out.summary = summarize(out.results);
  return out;
}

}  // namespace segloo::attack
