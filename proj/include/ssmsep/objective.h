// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef SSMSEP_OBJECTIVE_H_
#define SSMSEP_OBJECTIVE_H_

#include <functional>
#include <span>
#include <vector>

#include "ssmsep/autograd.h"

namespace ssmsep {

inline constexpr double kLossEps = 1e-8;
inline constexpr double kSnrClamp = 30.0;

// Metric path. Each throws DomainError on an all-zero reference (after mean
// removal for the scale-invariant forms) and ContractError on a length
// mismatch. A residual below 1e-24 of the target energy counts as exact and
// yields +infinity.
double snr(std::span<const double> est, std::span<const double> ref);
double si_snr(std::span<const double> est, std::span<const double> ref);
double si_snri(std::span<const double> est, std::span<const double> ref, std::span<const double> mix);
// Scaled-projection SDR with the mean retained.
double sdr(std::span<const double> est, std::span<const double> ref);
double sdri(std::span<const double> est, std::span<const double> ref, std::span<const double> mix);

// Loss path: -clamp(10 log10(|r|^2 / (|r - e|^2 + eps) + eps), -30, 30).
double neg_snr_loss(std::span<const double> est, std::span<const double> ref);

struct PitResult {
  double loss = 0;
  std::vector<std::size_t> permutation;  // estimate j is paired with reference permutation[j]
};

using PitCriterion = std::function<double(std::span<const double> est, std::span<const double> ref)>;

// Exhaustive search over all J! pairings (J <= 4) of the mean criterion.
// Ties resolve to the lexicographically smallest permutation.
PitResult pit(const std::vector<std::vector<double>>& ests, const std::vector<std::vector<double>>& refs,
              const PitCriterion& criterion = neg_snr_loss);

namespace ag {

// Differentiable PIT negative-SNR loss. est [J, L], refs [J, L]; the
// result is the mean over sources for the best pairing.
template <typename T>
Var<T> pit_neg_snr(const Var<T>& est, const Tensor<T>& refs, std::vector<std::size_t>* permutation = nullptr);

}  // namespace ag

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global L2 norm; <= 0 disables
};

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;
  double lr = 1e-3;
};

// Clips grads in place to the global norm, then applies one bias-corrected
// Adam update. Returns the pre-clip norm. Throws NumericError on a
// non-finite gradient before touching any parameter.
template <typename T>
double adam_step(std::span<Tensor<T>* const> params, std::span<Tensor<T>> grads, OptimizerState<T>& state,
                 const AdamConfig& config);

// Adam over autograd leaves; missing gradients count as zero.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig config);

  double step();
  void zero_grad();
  double lr() const noexcept { return state_.lr; }
  void set_lr(double lr) noexcept { state_.lr = lr; }
  const OptimizerState<T>& state() const noexcept { return state_; }

 private:
  std::vector<Var<T>> params_;
  AdamConfig config_;
  OptimizerState<T> state_;
};

// Halves the learning rate after `halve_patience` epochs without a new best
// validation loss and requests a stop after `stop_patience`.
class PlateauScheduler {
 public:
  enum class Action { kNone, kHalve, kStop };

  PlateauScheduler(std::size_t halve_patience = 10, std::size_t stop_patience = 20, double factor = 0.5);

  Action observe(double val_loss);
  double best() const noexcept { return best_; }
  std::size_t since_best() const noexcept { return since_best_; }
  std::size_t since_halve() const noexcept { return since_halve_; }
  double factor() const noexcept { return factor_; }

 private:
  std::size_t halve_patience_, stop_patience_;
  double factor_;
  double best_;
  std::size_t since_best_ = 0;
  std::size_t since_halve_ = 0;
};

}  // namespace ssmsep

#endif  // SSMSEP_OBJECTIVE_H_
