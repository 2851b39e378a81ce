#pragma once

// Central finite-difference oracle for the network's parameter gradients.

#include "deepterra/nn/model.hpp"
#include "deepterra/random.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace testsupport {

inline deepterra::nn::ModelSpec gradcheck_spec(deepterra::nn::Activation act = deepterra::nn::Activation::Tanh)
{
  using namespace deepterra::nn;
  ModelSpec spec;
  spec.input_px = 8;
  spec.layers = {Conv2D{3, 4, 1}, ActivationLayer{act}, MaxPool{2}, Flatten{}, Dense{6}, ActivationLayer{act}};
  return spec;
}

inline deepterra::nn::Tensor random_batch(std::size_t n, std::size_t channels, std::size_t side, std::uint64_t seed)
{
  deepterra::nn::Tensor t({n, channels, side, side});
  deepterra::rng::Stream s(seed);
  for (auto& v : t.values()) v = s.unit();
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

// Compares every parameter's analytic gradient of the mean cross-entropy
// against (L(w+eps) - L(w-eps)) / (2 eps).
inline GradCheckResult gradient_check(const deepterra::nn::ModelSpec& spec, std::uint64_t seed, double eps = 1e-5)
{
  using namespace deepterra::nn;
  WeightMap w = init_weights(spec, seed);
  // Nonzero biases so their gradients are exercised away from the origin.
  deepterra::rng::Stream s(seed ^ 0xB1A5);
  for (const auto& [name, t] : std::map<std::string, Tensor>(w.tensors()))
    if (name.find("bias") != std::string::npos) {
      Tensor& b = w.mutable_at(name);
      for (auto& v : b.values()) v = s.uniform(-0.2, 0.2);
    }
  const Tensor batch = random_batch(3, spec.input_channels, spec.input_px, seed * 7 + 1);
  const std::vector<std::size_t> labels = {0, 1, static_cast<std::size_t>(seed % 2)};

  auto loss_at = [&](const WeightMap& weights) {
    auto fr = forward(spec, weights, batch, Mode::Eval, 0);
    return cross_entropy(fr.cache.logits(), labels).loss;
  };

  auto fr = forward(spec, w, batch, Mode::Eval, 0);
  const auto ce = cross_entropy(fr.cache.logits(), labels);
  const Gradients grads = backward(fr.cache, ce.grad_logits);

  GradCheckResult r;
  for (const auto& [name, g] : grads) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double orig = w.at(name)[i];
      w.mutable_at(name)[i] = orig + eps;
      const double up = loss_at(w);
      w.mutable_at(name)[i] = orig - eps;
      const double down = loss_at(w);
      w.mutable_at(name)[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = g[i];
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
      r.max_rel_error = std::max(r.max_rel_error, std::fabs(analytic - numeric) / denom);
      ++r.checked;
    }
  }
  return r;
}

}  // namespace testsupport
