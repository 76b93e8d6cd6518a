#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "internal/rng.hpp"
#include "segloo/attacks.hpp"
#include "segloo/error.hpp"

using namespace segloo;
using namespace segloo::attack;

namespace {

nn::Network desk_net(std::uint64_t seed = 1) {
  return nn::Network::build(nn::ArchConfig::load(SEGLOO_SOURCE_DIR "/configs/desk_cnn.json"), seed);
}

Tensor random_images(int n, std::uint64_t seed) {
  detail::Rng rng(seed);
  Tensor t({n, 3, 32, 32});
  for (float& v : t.values()) v = static_cast<float>(rng.uniform());
  return t;
}

// Two-class linear model on 4 features: logits = W x + b.
nn::Network linear_binary(const std::vector<float>& w0, const std::vector<float>& w1, float b0, float b1) {
  nn::ArchConfig arch;
  arch.input_shape = {4};
  arch.class_count = 2;
  nn::LayerSpec d;
  d.kind = nn::LayerKind::kDense;
  d.in_features = 4;
  d.out_features = 2;
  arch.layers = {d};
  auto net = nn::Network::build(arch, 0);
  auto& w = net.layer_params(0)[0];
  auto& b = net.layer_params(0)[1];
  for (int i = 0; i < 4; ++i) {
    w[i] = w0[i];
    w[4 + i] = w1[i];
  }
  b[0] = b0;
  b[1] = b1;
  return net;
}

std::vector<int> predictions(const nn::Network& net, const Tensor& batch) {
  auto probs = net.forward(batch).probs;
  std::vector<int> out;
  for (int i = 0; i < batch.dim(0); ++i) out.push_back(nn::argmax(probs.item(i)));
  return out;
}

}  // namespace

TEST_CASE("attack parameter parsing") {
  auto f = AttackParams::parse("fgsm:eps=0.02,0.06,0.1");
  CHECK(f.method == Method::kFgsm);
  CHECK(f.epsilons == std::vector<double>{0.02, 0.06, 0.1});
  auto p = AttackParams::parse("pgd:eps=0.1");
  CHECK(p.steps == 10);
  CHECK(p.random_start);
  CHECK_FALSE(p.step_size.has_value());
  CHECK(AttackParams::parse(p.to_string()).to_string() == p.to_string());
  auto d = AttackParams::parse("deepfool");
  CHECK(d.overshoot == 0.02);
  CHECK(d.max_iter == 50);
  CHECK_THROWS_AS(AttackParams::parse("cw"), Error);
  CHECK_THROWS_AS(AttackParams::parse("fgsm:eps=-0.1"), Error);
  CHECK_THROWS_AS(AttackParams::parse("pgd:eps=0.1,steps=0"), Error);
  CHECK_THROWS_AS(AttackParams::parse("pgd:eps=0.1,step=0"), Error);
  CHECK_THROWS_AS(AttackParams::parse("fgsm:epsi=0.1"), Error);
}

TEST_CASE("fgsm with zero budget returns the input") {
  auto net = desk_net();
  auto batch = random_images(6, 1);
  auto preds = predictions(net, batch);
  for (int i = 0; i < 6; ++i) {
    const int label = i % 2 == 0 ? preds[i] : (preds[i] + 1) % 10;
    auto r = fgsm(net, batch.item_tensor(i), label, 0.0);
    CHECK(r.adversarial == batch.item_tensor(i).reshaped({3, 32, 32}));
    CHECK(r.success == (label != preds[i]));
    CHECK(r.linf == 0.0);
  }
}

TEST_CASE("fgsm on a linear model steps along the sign of the weight difference") {
  const std::vector<float> w0{0.5f, -1.0f, 0.25f, 2.0f}, w1{-0.5f, 1.0f, 0.75f, 2.5f};
  auto net = linear_binary(w0, w1, 0.1f, -0.1f);
  Tensor x({4}, std::vector<float>{0.4f, 0.5f, 0.6f, 0.5f});
  for (int label : {0, 1}) {
    auto r = fgsm(net, x, label, 0.05);
    for (int i = 0; i < 4; ++i) {
      const float diff = w1[i] - w0[i];
      const float s = diff > 0 ? 1.0f : (diff < 0 ? -1.0f : 0.0f);
      // ascending the loss of class 0 moves towards class 1 and vice versa
      CHECK(r.adversarial[i] == doctest::Approx(x[i] + 0.05f * (label == 0 ? s : -s)).epsilon(1e-6));
    }
  }
}

TEST_CASE("fgsm and pgd stay inside the budget and the unit box") {
  auto net = desk_net(2);
  auto batch = random_images(4, 2);
  auto preds = predictions(net, batch);
  for (double eps : {0.02, 0.06, 0.1, 0.3}) {
    for (int i = 0; i < 4; ++i) {
      for (const auto& r : {fgsm(net, batch.item_tensor(i), preds[i], eps),
                            pgd(net, batch.item_tensor(i), preds[i], eps, eps / 4, 3, true, 7)}) {
        CHECK(r.linf <= eps + 1e-6);
        for (float v : r.adversarial.values()) CHECK((v >= 0.0f && v <= 1.0f));
      }
    }
  }
}

TEST_CASE("pgd with one full step and no random start is fgsm") {
  auto net = desk_net(3);
  auto batch = random_images(5, 3);
  auto preds = predictions(net, batch);
  for (double eps : {0.02, 0.06, 0.1}) {
    for (int i = 0; i < 5; ++i) {
      auto a = fgsm(net, batch.item_tensor(i), preds[i], eps);
      auto b = pgd(net, batch.item_tensor(i), preds[i], eps, eps, 1, false, 0);
      CHECK(a.adversarial == b.adversarial);
      CHECK(a.adversarial_class == b.adversarial_class);
    }
  }
}

TEST_CASE("projection matches a coordinate-wise check") {
  detail::Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const float eps = static_cast<float>(rng.uniform(0.0, 0.3));
    std::vector<float> origin(50), x(50);
    for (auto& v : origin) v = static_cast<float>(rng.uniform());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = origin[i] + static_cast<float>(rng.uniform(-1.0, 1.0));
    auto before = x;
    project(x, origin, eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(std::fabs(x[i] - origin[i]) <= eps);
      CHECK((x[i] >= 0.0f && x[i] <= 1.0f));
      const bool inside = std::fabs(before[i] - origin[i]) <= eps && before[i] >= 0.0f && before[i] <= 1.0f;
      if (inside) CHECK(x[i] == before[i]);
    }
  }
}

TEST_CASE("pgd random start is seeded") {
  auto net = desk_net(4);
  auto img = random_images(1, 4).item_tensor(0);
  const int label = predictions(net, img)[0];
  auto a = pgd(net, img, label, 0.05, 0.0125, 2, true, 11);
  auto b = pgd(net, img, label, 0.05, 0.0125, 2, true, 11);
  auto c = pgd(net, img, label, 0.05, 0.0125, 2, true, 12);
  CHECK(a.adversarial == b.adversarial);
  CHECK_FALSE(a.adversarial == c.adversarial);
}

TEST_CASE("deepfool: misclassified input returns immediately") {
  auto net = desk_net(5);
  auto img = random_images(1, 5).item_tensor(0);
  const int pred = predictions(net, img)[0];
  auto r = deepfool(net, img, (pred + 1) % 10, 50, 0.02);
  CHECK(r.iterations == 0);
  CHECK(r.success);
  CHECK(r.linf == 0.0);
}

TEST_CASE("deepfool: linear binary model crosses in one step") {
  const std::vector<float> w0{0.5f, -1.0f, 0.25f, 2.0f}, w1{-0.5f, 1.0f, 0.75f, 0.5f};
  auto net = linear_binary(w0, w1, 0.05f, 0.0f);
  Tensor x({4}, std::vector<float>{0.45f, 0.3f, 0.55f, 0.5f});
  double f = 0.0 - 0.05, norm2 = 0.0;  // f = z1 - z0
  std::vector<double> w(4);
  for (int i = 0; i < 4; ++i) {
    w[i] = double(w1[i]) - w0[i];
    f += w[i] * x[i];
    norm2 += w[i] * w[i];
  }
  REQUIRE(f < 0.0);
  const double overshoot = 0.02;
  auto r = deepfool(net, x, 0, 50, overshoot);
  CHECK(r.iterations == 1);
  CHECK(r.success);
  CHECK(r.adversarial_class == 1);
  for (int i = 0; i < 4; ++i) {
    const double expected = -f * w[i] / norm2 * (1 + overshoot);
    CHECK(std::fabs((r.adversarial[i] - x[i]) - expected) < 1.2e-4);
  }
}

TEST_CASE("attack_batch summary, epsilon thirds and worker independence") {
  auto net = desk_net(6);
  auto batch = random_images(9, 6);
  auto preds = predictions(net, batch);
  std::vector<int> labels = preds;
  labels[2] = (labels[2] + 3) % 10;
  labels[7] = (labels[7] + 1) % 10;

  auto clean = attack_batch(net, batch, labels, AttackParams::parse("fgsm:eps=0"));
  CHECK(clean.summary.accuracy == doctest::Approx(7.0 / 9.0));
  CHECK(clean.summary.clean_accuracy == clean.summary.accuracy);

  auto mixed = attack_batch(net, batch, labels, AttackParams::parse("fgsm:eps=0.02,0.06,0.1"), 1);
  const double grid[3] = {0.02, 0.06, 0.1};
  std::size_t kept = 0, successes = 0;
  for (int i = 0; i < 9; ++i) {
    CHECK(mixed.results[i].epsilon == grid[i / 3]);
    kept += mixed.results[i].adversarial_class == labels[i];
    successes += mixed.results[i].adversarial_class != labels[i];
    CHECK(mixed.results[i].success == (mixed.results[i].adversarial_class != labels[i]));
  }
  CHECK(mixed.summary.accuracy == doctest::Approx(double(kept) / 9));
  CHECK(mixed.summary.successes == successes);
  CHECK(mixed.adversarial_batch().shape() == batch.shape());

  auto p1 = attack_batch(net, batch, labels, AttackParams::parse("pgd:eps=0.05,steps=2,seed=3"), 1);
  auto p3 = attack_batch(net, batch, labels, AttackParams::parse("pgd:eps=0.05,steps=2,seed=3"), 3);
  for (int i = 0; i < 9; ++i) CHECK(p1.results[i].adversarial == p3.results[i].adversarial);

  CHECK_THROWS_AS(attack_batch(net, batch, std::vector<int>(3, 0), AttackParams{}), Error);
}
