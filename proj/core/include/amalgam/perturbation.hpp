#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "amalgam/tape.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

/// Training-time robustness noise: which kind of perturbation (if any) the
/// meta-trainer applies to each truncation.
enum class PerturbationKind { None, GaussianWeight, AdversarialWeight, InputNoise };

const char* perturbation_kind_name(PerturbationKind k);
PerturbationKind perturbation_kind_from_name(const std::string& name);

struct PerturbationConfig {
  PerturbationKind kind = PerturbationKind::None;
  double sigma = 0.0;    // relative Gaussian magnitude (weight noise) or
                         // absolute std (input noise)
  double epsilon = 0.0;  // relative adversarial magnitude
  int64_t steps_A = 1;   // ascent steps per truncation
  double eta = 0.01;     // base-PGD step size; kept for completeness, the
                         // normalized ascent step has no use for it
  uint64_t seed = 0;     // stream for standalone invocations
};

void validate_perturbation_config(const PerturbationConfig& cfg);

/// Per-coordinate noise scale for one tensor: sigma * ||t||_2 / sqrt(|t|).
/// Noise adapts to each tensor's own magnitude, so rescaling a tensor by c
/// rescales its noise by exactly c.
double adaptive_noise_std(const Tensor& t, double sigma);

/// Gaussian weight noise on a forward copy: each tensor gets i.i.d. noise
/// at its adaptive scale. sigma = 0 (or an all-zero tensor) passes the
/// input through untouched. Equal seeds give bitwise-equal output.
std::vector<Tensor> gaussian_weight_perturb(const std::vector<Tensor>& phi, double sigma,
                                            uint64_t seed);

/// Evaluates one truncation's loss at the given (tape-leafed) parameters.
/// Implementations must be re-runnable: the attack calls this once per
/// ascent step on a fresh tape.
using TruncationLoss = std::function<Tensor(Tape*, const std::vector<Tensor>&)>;

/// Projected-ascent weight attack. Starting from psi = 0, each of the
/// steps_A rounds takes the loss gradient at phi + psi and moves psi by
/// epsilon * ||phi_t||_2 along each tensor's normalized gradient. Returns
/// phi + psi. A zero-gradient tensor keeps its psi; epsilon = 0 returns
/// phi itself. Throws DivergenceError if the loss or gradient goes
/// non-finite mid-attack.
std::vector<Tensor> adversarial_weight_perturb(const TruncationLoss& loss,
                                               const std::vector<Tensor>& phi, double epsilon,
                                               int64_t steps_A);

/// Absolute i.i.d. Gaussian noise on a gradient, applied before the update
/// policy sees it. sigma = 0 returns the input tensor unchanged.
Tensor input_perturb(const Tensor& grad, double sigma, uint64_t seed);

}  // namespace amalgam
