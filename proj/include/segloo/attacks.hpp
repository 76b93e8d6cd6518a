#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segloo/nn.hpp"
#include "segloo/tensor.hpp"

namespace segloo::attack {

enum class Method { kFgsm, kPgd, kDeepFool };

const char* method_name(Method m);

/// Attack configuration, e.g. "fgsm:eps=0.02,0.06,0.1", "pgd:eps=0.1,steps=20,random_start=0",
/// "deepfool:overshoot=0.02,max_iter=50". Several epsilons split a batch into equal contiguous parts.
struct AttackParams {
  Method method = Method::kFgsm;
  std::vector<double> epsilons{0.1};
  int steps = 10;
  std::optional<double> step_size;  // PGD; defaults to epsilon / 4
  bool random_start = true;
  double overshoot = 0.02;
  int max_iter = 50;
  std::uint64_t seed = 0;

  static AttackParams parse(const std::string& text);
  std::string to_string() const;
  void validate() const;
};

struct AttackResult {
  Tensor adversarial;  // C x H x W
  int label = 0;
  int original_class = 0;
  int adversarial_class = 0;
  bool success = false;  // adversarial prediction differs from the label
  double epsilon = 0.0;
  double linf = 0.0;
  int iterations = 0;
};

struct AttackSummary {
  std::size_t count = 0;
  double clean_accuracy = 0.0;
  double accuracy = 0.0;  // fraction still classified as the label after the attack
  std::size_t successes = 0;
  double mean_linf = 0.0;
};

struct BatchAttack {
  std::vector<AttackResult> results;
  AttackSummary summary;

  Tensor adversarial_batch() const;
};

AttackResult fgsm(const nn::Network& net, const Tensor& image, int label, double epsilon);
AttackResult pgd(const nn::Network& net, const Tensor& image, int label, double epsilon, double step_size, int steps,
                 bool random_start, std::uint64_t seed);
AttackResult deepfool(const nn::Network& net, const Tensor& image, int label, int max_iter, double overshoot);

/// Attacks every image of an N x C x H x W batch. Image i uses epsilon i * E / N of the grid
/// and, for PGD, a random start seeded from (seed, i).
BatchAttack attack_batch(const nn::Network& net, const Tensor& batch, std::span<const int> labels,
                         const AttackParams& params, int workers = 1);

AttackSummary summarize(std::span<const AttackResult> results);

// Clamp `x` to the L-infinity ball of radius eps around `origin`, then to [0, 1].
void project(std::span<float> x, std::span<const float> origin, float eps);

}  // namespace segloo::attack
