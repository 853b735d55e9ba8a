#pragma once

#include "irmkit/types.hpp"

#include <functional>
#include <memory>
#include <span>
#include <utility>

namespace irm::optim {

enum class OptKind { SGD, Adam, LSGD, LALR, SAM };

struct OptimizerConfig {
  OptKind kind = OptKind::Adam;
  double base_lr = 2e-3;
  std::pair<double, double> adam_betas{0.9, 0.999};
  double adam_eps = 1e-8;
  long lsgd_reference_batch = 1024;
  long lsgd_warmup_steps = 0;
  std::pair<double, double> lalr_clamp{0.0, 1.0};
  bool lalr_squared_norms = false;  // literal squared-norm reading of the update rule
  double sam_rho = 0.0;
  std::shared_ptr<OptimizerConfig> sam_inner;  // wrapped optimizer for SAM

  void validate() const;
};

/// Linear learning-rate scaling with warm-up: target = base·batch/reference,
/// ramped linearly from base over lsgd_warmup_steps, constant afterwards.
double lsgd_schedule(long step, long batch_size, const OptimizerConfig& cfg);

void sgd_step(std::span<Mat* const> params, std::span<const Mat> grads, double lr);

/// Layer-wise adaptive step: each tensor moves by exactly
/// clamp(norm(theta), c_l, c_u) · lr along -grad/norm(grad). Tensors with a
/// zero gradient are skipped.
void lalr_step(std::span<Mat* const> params, std::span<const Mat> grads, double lr,
               std::pair<double, double> clamp, bool squared_norms);

/// SGD/Adam/LSGD/LALR state machine over a fixed list of tensors. SAM is
/// driven by sam_step below around an inner Optimizer.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, size_t n_tensors);

  void step(std::span<Mat* const> params, std::span<const Mat> grads,
            long batch_size);
  long steps_taken() const { return t_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
  bool state_ready_ = false;
};

/// Single-ascent sharpness-aware step: gradients re-evaluated at
/// params + rho·g/|g| are applied by the inner optimizer at the original
/// params. rho == 0 and |g| < 1e-12 both short-circuit to a plain inner
/// step on the unperturbed gradient.
void sam_step(Optimizer& inner, std::span<Mat* const> params,
              const std::function<std::vector<Mat>()>& grad_fn, double rho,
              long batch_size);

}  // namespace irm::optim
