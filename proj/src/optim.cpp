#include "irmkit/optim.hpp"

#include <cmath>

namespace irm::optim {

void OptimizerConfig::validate() const {
  if (base_lr <= 0.0) throw InvalidConfig("base_lr must be positive");
  if (lalr_clamp.first < 0.0 || lalr_clamp.first > lalr_clamp.second) {
    throw InvalidConfig("lalr clamp must satisfy 0 <= c_l <= c_u");
  }
  if (kind == OptKind::LSGD && lsgd_reference_batch < 1) {
    throw InvalidConfig("lsgd_reference_batch must be positive");
  }
  if (kind == OptKind::SAM) {
    if (sam_rho < 0.0) throw InvalidConfig("sam_rho must be >= 0");
    if (sam_inner && sam_inner->kind == OptKind::SAM) {
      throw InvalidConfig("SAM cannot wrap SAM");
    }
    if (sam_inner) sam_inner->validate();
  }
}

double lsgd_schedule(long step, long batch_size, const OptimizerConfig& cfg) {
  const double target =
      cfg.base_lr * static_cast<double>(batch_size) / cfg.lsgd_reference_batch;
  if (cfg.lsgd_warmup_steps <= 0 || step >= cfg.lsgd_warmup_steps) return target;
  const double frac = static_cast<double>(step) / cfg.lsgd_warmup_steps;
  return cfg.base_lr + (target - cfg.base_lr) * frac;
}

void sgd_step(std::span<Mat* const> params, std::span<const Mat> grads, double lr) {
  for (size_t i = 0; i < params.size(); ++i) {
    *params[i] -= lr * grads[i];
  }
}

void lalr_step(std::span<Mat* const> params, std::span<const Mat> grads, double lr,
               std::pair<double, double> clamp, bool squared_norms) {
  for (size_t i = 0; i < params.size(); ++i) {
    const double wn = squared_norms ? params[i]->squaredNorm() : params[i]->norm();
    const double gn = squared_norms ? grads[i].squaredNorm() : grads[i].norm();
    if (gn == 0.0) continue;
    const double tau = std::min(std::max(wn, clamp.first), clamp.second);
    *params[i] -= (tau * lr / gn) * grads[i];
  }
}

Optimizer::Optimizer(OptimizerConfig cfg, size_t n_tensors) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.kind == OptKind::Adam) {
    m_.resize(n_tensors);
    v_.resize(n_tensors);
  }
}

void Optimizer::step(std::span<Mat* const> params, std::span<const Mat> grads,
                     long batch_size) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: param/grad count mismatch");
  switch (cfg_.kind) {
    case OptKind::SGD:
      sgd_step(params, grads, cfg_.base_lr);
      break;
    case OptKind::LSGD:
      sgd_step(params, grads, lsgd_schedule(t_, batch_size, cfg_));
      break;
    case OptKind::LALR:
      lalr_step(params, grads, cfg_.base_lr, cfg_.lalr_clamp, cfg_.lalr_squared_norms);
      break;
    case OptKind::Adam: {
      if (!state_ready_) {
        for (size_t i = 0; i < params.size(); ++i) {
          m_[i] = Mat::Zero(params[i]->rows(), params[i]->cols());
          v_[i] = Mat::Zero(params[i]->rows(), params[i]->cols());
        }
        state_ready_ = true;
      }
      const auto [b1, b2] = cfg_.adam_betas;
      const double t = static_cast<double>(t_ + 1);
      const double c1 = 1.0 - std::pow(b1, t);
      const double c2 = 1.0 - std::pow(b2, t);
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
        v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i].cwiseProduct(grads[i]);
        const Mat mhat = m_[i] / c1;
        const Mat vhat = v_[i] / c2;
        params[i]->array() -=
            cfg_.base_lr * mhat.array() / (vhat.array().sqrt() + cfg_.adam_eps);
      }
      break;
    }
    case OptKind::SAM:
      throw InvalidConfig("SAM must be driven through sam_step");
  }
  ++t_;
}

void sam_step(Optimizer& inner, std::span<Mat* const> params,
              const std::function<std::vector<Mat>()>& grad_fn, double rho,
              long batch_size) {
  std::vector<Mat> g = grad_fn();
  if (rho > 0.0) {
    double sq = 0.0;
    for (const Mat& gi : g) sq += gi.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm >= 1e-12) {
      std::vector<Mat> saved;
      saved.reserve(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        saved.push_back(*params[i]);
        *params[i] += (rho / norm) * g[i];
      }
      g = grad_fn();
      for (size_t i = 0; i < params.size(); ++i) *params[i] = saved[i];
    }
  }
  inner.step(params, g, batch_size);
}

}  // namespace irm::optim
