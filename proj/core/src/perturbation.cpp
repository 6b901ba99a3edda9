#include "amalgam/perturbation.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "amalgam/errors.hpp"
#include "amalgam/rng.hpp"

namespace amalgam {

namespace {

double plain_l2(const Tensor& t) {
  double s = 0.0;
  for (int64_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

void check_magnitude(double value, const char* what) {
  if (!std::isfinite(value) || value < 0.0) {
    throw ConfigError(std::string(what) + " must be finite and >= 0, got " +
                      std::to_string(value));
  }
}

}  // namespace

const char* perturbation_kind_name(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::None:
      return "none";
    case PerturbationKind::GaussianWeight:
      return "gaussian-weight";
    case PerturbationKind::AdversarialWeight:
      return "adversarial-weight";
    case PerturbationKind::InputNoise:
      return "input-noise";
  }
  throw ConfigError("unknown perturbation kind");
}

PerturbationKind perturbation_kind_from_name(const std::string& name) {
  if (name == "none") return PerturbationKind::None;
  if (name == "gaussian-weight") return PerturbationKind::GaussianWeight;
  if (name == "adversarial-weight") return PerturbationKind::AdversarialWeight;
  if (name == "input-noise") return PerturbationKind::InputNoise;
  throw ConfigError("unknown perturbation kind: '" + name + "'");
}

void validate_perturbation_config(const PerturbationConfig& cfg) {
  check_magnitude(cfg.sigma, "perturbation sigma");
  check_magnitude(cfg.epsilon, "perturbation epsilon");
  check_magnitude(cfg.eta, "perturbation eta");
  if (cfg.steps_A < 1) {
    throw ConfigError("perturbation steps_A must be >= 1, got " + std::to_string(cfg.steps_A));
  }
}

double adaptive_noise_std(const Tensor& t, double sigma) {
  check_magnitude(sigma, "perturbation sigma");
  if (!t.valid() || t.size() == 0) {
    throw ShapeError("adaptive_noise_std: tensor has no elements");
  }
  return sigma * plain_l2(t) / std::sqrt(static_cast<double>(t.size()));
}

std::vector<Tensor> gaussian_weight_perturb(const std::vector<Tensor>& phi, double sigma,
                                            uint64_t seed) {
  check_magnitude(sigma, "perturbation sigma");
  if (sigma == 0.0) return phi;
  Rng rng(derive_seed(seed, "gaussian_weight_perturb"));
  std::vector<Tensor> out;
  out.reserve(phi.size());
  for (const Tensor& t : phi) {
    double std_t = adaptive_noise_std(t, sigma);
    if (std_t == 0.0) {
      // An all-zero tensor has no magnitude to be relative to; it passes
      // through untouched and consumes no draws.
      out.push_back(t);
      continue;
    }
    std::vector<double> vals(static_cast<size_t>(t.size()));
    for (int64_t i = 0; i < t.size(); ++i) {
      vals[static_cast<size_t>(i)] = t[i] + rng.normal(0.0, std_t);
    }
    out.push_back(Tensor(t.shape(), std::move(vals)));
  }
  return out;
}

std::vector<Tensor> adversarial_weight_perturb(const TruncationLoss& loss,
                                               const std::vector<Tensor>& phi, double epsilon,
                                               int64_t steps_A) {
  if (!loss) throw ConfigError("adversarial_weight_perturb: loss callback is empty");
  check_magnitude(epsilon, "perturbation epsilon");
  if (steps_A < 1) {
    throw ConfigError("adversarial_weight_perturb: steps_A must be >= 1, got " +
                      std::to_string(steps_A));
  }
  if (phi.empty()) throw ShapeError("adversarial_weight_perturb: no parameter tensors");
  if (epsilon == 0.0) return phi;

  std::vector<double> phi_norm(phi.size());
  for (size_t j = 0; j < phi.size(); ++j) phi_norm[j] = plain_l2(phi[j]);

  std::vector<Tensor> psi(phi.size());
  for (size_t j = 0; j < phi.size(); ++j) psi[j] = Tensor::zeros(phi[j].shape());

  for (int64_t a = 0; a < steps_A; ++a) {
    Tape tape;
    std::vector<Tensor> at;
    at.reserve(phi.size());
    for (size_t j = 0; j < phi.size(); ++j) {
      at.push_back(tape.leaf(add(nullptr, phi[j], psi[j])));
    }
    Tensor value = loss(&tape, at);
    if (!value.valid() || !value.is_scalar()) {
      throw ShapeError("adversarial_weight_perturb: loss must return a scalar");
    }
    if (!std::isfinite(value.item())) {
      throw DivergenceError("adversarial attack: loss became non-finite at ascent step " +
                            std::to_string(a + 1));
    }
    GradMap grads = backward(tape, value);
    for (size_t j = 0; j < phi.size(); ++j) {
      Tensor g = grads.grad(at[j]);
      double gn = plain_l2(g);
      if (!std::isfinite(gn)) {
        throw DivergenceError("adversarial attack: gradient became non-finite at ascent step " +
                              std::to_string(a + 1));
      }
      // A tensor the loss does not react to (or a zero-magnitude tensor)
      // keeps its current offset: there is no direction to ascend.
      if (gn == 0.0 || phi_norm[j] == 0.0) continue;
      psi[j] = add(nullptr, psi[j], mul_scalar(nullptr, g, epsilon * phi_norm[j] / gn));
    }
  }

  std::vector<Tensor> out;
  out.reserve(phi.size());
  for (size_t j = 0; j < phi.size(); ++j) out.push_back(add(nullptr, phi[j], psi[j]));
  return out;
}

Tensor input_perturb(const Tensor& grad, double sigma, uint64_t seed) {
  check_magnitude(sigma, "perturbation sigma");
  if (!grad.valid() || grad.size() == 0) throw ShapeError("input_perturb: tensor has no elements");
  if (sigma == 0.0) return grad;
  Rng rng(derive_seed(seed, "input_perturb"));
  std::vector<double> vals(static_cast<size_t>(grad.size()));
  for (int64_t i = 0; i < grad.size(); ++i) {
    vals[static_cast<size_t>(i)] = grad[i] + rng.normal(0.0, sigma);
  }
  return Tensor(grad.shape(), std::move(vals));
}

}  // namespace amalgam
