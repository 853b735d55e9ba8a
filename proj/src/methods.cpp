#include "irmkit/methods.hpp"

#include <algorithm>
#include <cmath>

namespace irm::methods {

using namespace irm::ad;
using model::HeadMode;
using model::ModelVars;
using model::PredictorParams;

const char* method_name(Method m) {
  switch (m) {
    case Method::ERM: return "ERM";
    case Method::IRMv1: return "IRMv1";
    case Method::IRMv0: return "IRMv0";
    case Method::REx: return "REx";
    case Method::Fishr: return "Fishr";
    case Method::IRMGame: return "IRMGame";
    case Method::BLOC: return "BLOC";
    case Method::BLOC_v1: return "BLOC_v1";
    case Method::BLOC_REx: return "BLOC_REx";
    case Method::BLOC_Fishr: return "BLOC_Fishr";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  for (Method m : {Method::ERM, Method::IRMv1, Method::IRMv0, Method::REx,
                   Method::Fishr, Method::IRMGame, Method::BLOC, Method::BLOC_v1,
                   Method::BLOC_REx, Method::BLOC_Fishr}) {
    if (name == method_name(m)) return m;
  }
  throw InvalidConfig("unknown method: " + name);
}

HeadMode head_mode_for(Method m) {
  switch (m) {
    case Method::IRMv1:
      return HeadMode::ScalarFrozen;
    case Method::IRMGame:
    case Method::BLOC:
    case Method::BLOC_v1:
    case Method::BLOC_REx:
    case Method::BLOC_Fishr:
      return HeadMode::PerEnv;
    default:
      return HeadMode::Shared;
  }
}

bool is_bloc(Method m) {
  return m == Method::BLOC || m == Method::BLOC_v1 || m == Method::BLOC_REx ||
         m == Method::BLOC_Fishr;
}

model::InferenceMode inference_mode_for(Method m) {
  if (m == Method::IRMGame) return model::InferenceMode::EnsembleMeanLogit;
  if (is_bloc(m)) return model::InferenceMode::ConsensusHead;
  return model::InferenceMode::Shared;
}

void MethodConfig::validate() const {
  if (gamma < 0.0) throw InvalidConfig("gamma must be >= 0");
  if (warmup_epochs < 0 || total_epochs < 1 || warmup_epochs > total_epochs) {
    throw InvalidConfig("need 0 <= warmup_epochs <= total_epochs");
  }
  if (K < 1) throw InvalidConfig("K must be >= 1");
  if (batch_size < 1) throw InvalidBatch("batch_size must be >= 1");
  if (lower_lr < 0.0) throw InvalidConfig("lower_lr must be >= 0");
  optimizer.validate();
  if (optimizer.kind == optim::OptKind::SAM && is_bloc(method)) {
    throw InvalidConfig("SAM is not defined for the bi-level methods");
  }
}

namespace {

Var risk_of(const ModelVars& mv, int env, const EnvBatch& b) {
  return model::env_risk(mv, env, b.x, b.y);
}

Var sum_vars(std::span<const Var> vs) {
  Var acc;
  for (const Var& v : vs) acc = acc.on_tape() ? add(acc, v) : v;
  return acc;
}

void fill_risks(StepDiagnostics* diag, std::span<const Var> risks) {
  if (!diag) return;
  diag->per_env_risk.clear();
  for (const Var& r : risks) diag->per_env_risk.push_back(r.scalar());
}

double head_drift(const PredictorParams& p) {
  double worst = 0.0;
  for (size_t i = 0; i < p.heads.size(); ++i) {
    for (size_t j = i + 1; j < p.heads.size(); ++j) {
      const double d2 = (p.heads[i].w - p.heads[j].w).squaredNorm() +
                        (p.heads[i].b - p.heads[j].b).squaredNorm();
      worst = std::max(worst, std::sqrt(d2));
    }
  }
  return worst;
}

/// Population variance of scalar vars: (1/N) Σ (r_e − mean)².
Var population_variance(Tape& t, std::span<const Var> risks) {
  const double inv_n = 1.0 / static_cast<double>(risks.size());
  Var mean_risk = scalar_mul(inv_n, sum_vars(risks));
  Var acc;
  for (const Var& r : risks) {
    Var d = square(sub(r, mean_risk));
    acc = acc.on_tape() ? add(acc, d) : d;
  }
  return scalar_mul(inv_n, acc);
}

/// (1/N) Σ_e Σ_tensors |g_e − ḡ|² for per-env gradient lists.
Var gradient_variance(std::span<const std::vector<Var>> env_grads) {
  const size_t n_env = env_grads.size();
  const size_t n_tensors = env_grads[0].size();
  const double inv_n = 1.0 / static_cast<double>(n_env);
  Var acc;
  for (size_t k = 0; k < n_tensors; ++k) {
    Var mean_g;
    for (size_t e = 0; e < n_env; ++e) {
      mean_g = mean_g.on_tape() ? add(mean_g, env_grads[e][k]) : env_grads[e][k];
    }
    mean_g = scalar_mul(inv_n, mean_g);
    for (size_t e = 0; e < n_env; ++e) {
      Var d = squared_norm(sub(env_grads[e][k], mean_g));
      acc = acc.on_tape() ? add(acc, d) : d;
    }
  }
  return scalar_mul(inv_n, acc);
}

}  // namespace

Var objective_erm(const ModelVars& mv, std::span<const EnvBatch> batches,
                  StepDiagnostics* diag) {
  std::vector<Var> risks;
  for (int e = 0; e < static_cast<int>(batches.size()); ++e) {
    const int env = mv.head_mode == HeadMode::PerEnv ? e : -1;
    risks.push_back(risk_of(mv, env, batches[e]));
  }
  Var total = sum_vars(risks);
  fill_risks(diag, risks);
  if (diag) diag->objective = total.scalar();
  return total;
}

Var objective_irmv1(const ModelVars& mv, std::span<const EnvBatch> batches,
                    double gamma, StepDiagnostics* diag) {
  if (mv.head_mode != HeadMode::ScalarFrozen) {
    throw HeadModeMismatch("IRMv1 needs the ScalarFrozen head mode");
  }
  std::vector<Var> risks, pens;
  for (const EnvBatch& b : batches) {
    Var r = risk_of(mv, -1, b);
    risks.push_back(r);
    if (gamma != 0.0) {
      auto g = grad(r, {mv.frozen_scalar}, true);
      pens.push_back(squared_norm(g[0]));
    }
  }
  Var total = sum_vars(risks);
  double pen_value = 0.0;
  if (gamma != 0.0) {
    Var pen = sum_vars(pens);
    pen_value = pen.scalar();
    total = add(total, scalar_mul(gamma, pen));
  }
  fill_risks(diag, risks);
  if (diag) {
    for (const Var& p : pens) diag->per_env_stationarity.push_back(p.scalar());
    diag->penalty_value = pen_value;
    diag->objective = total.scalar();
  }
  return total;
}

Var objective_irmv0(const ModelVars& mv, std::span<const EnvBatch> batches,
                    double gamma, StepDiagnostics* diag) {
  if (mv.head_mode != HeadMode::Shared) {
    throw HeadModeMismatch("IRMv0 needs the Shared head mode");
  }
  std::vector<Var> risks, pens;
  for (const EnvBatch& b : batches) {
    Var r = risk_of(mv, -1, b);
    risks.push_back(r);
    if (gamma != 0.0) {
      auto g = grad(r, std::span<const Var>(mv.head_vars(0)), true);
      pens.push_back(add(squared_norm(g[0]), squared_norm(g[1])));
    }
  }
  Var total = sum_vars(risks);
  double pen_value = 0.0;
  if (gamma != 0.0) {
    Var pen = sum_vars(pens);
    pen_value = pen.scalar();
    total = add(total, scalar_mul(gamma, pen));
  }
  fill_risks(diag, risks);
  if (diag) {
    for (const Var& p : pens) diag->per_env_stationarity.push_back(p.scalar());
    diag->penalty_value = pen_value;
    diag->objective = total.scalar();
  }
  return total;
}

Var objective_rex(const ModelVars& mv, std::span<const EnvBatch> batches,
                  double gamma, StepDiagnostics* diag) {
  if (mv.head_mode != HeadMode::Shared) {
    throw HeadModeMismatch("REx needs the Shared head mode");
  }
  std::vector<Var> risks;
  for (const EnvBatch& b : batches) risks.push_back(risk_of(mv, -1, b));
  const double inv_n = 1.0 / static_cast<double>(batches.size());
  Var total = scalar_mul(inv_n, sum_vars(risks));
  double pen_value = 0.0;
  if (gamma != 0.0) {
    Var pen = population_variance(*total.tape, risks);
    pen_value = pen.scalar();
    total = add(total, scalar_mul(gamma, pen));
  }
  fill_risks(diag, risks);
  if (diag) {
    diag->penalty_value = pen_value;
    diag->objective = total.scalar();
  }
  return total;
}

Var objective_fishr(const ModelVars& mv, std::span<const EnvBatch> batches,
                    double gamma, bool full_params, StepDiagnostics* diag) {
  if (mv.head_mode != HeadMode::Shared) {
    throw HeadModeMismatch("Fishr needs the Shared head mode");
  }
  std::vector<Var> risks;
  for (const EnvBatch& b : batches) risks.push_back(risk_of(mv, -1, b));
  const double inv_n = 1.0 / static_cast<double>(batches.size());
  Var total = scalar_mul(inv_n, sum_vars(risks));
  double pen_value = 0.0;
  if (gamma != 0.0) {
    const std::vector<Var> wrt =
        full_params ? mv.all_trainable_vars() : mv.head_vars(0);
    std::vector<std::vector<Var>> env_grads;
    for (const Var& r : risks) {
      env_grads.push_back(grad(r, std::span<const Var>(wrt), true));
    }
    Var pen = gradient_variance(env_grads);
    pen_value = pen.scalar();
    total = add(total, scalar_mul(gamma, pen));
  }
  fill_risks(diag, risks);
  if (diag) {
    diag->penalty_value = pen_value;
    diag->objective = total.scalar();
  }
  return total;
}

Var build_objective(Method m, const ModelVars& mv, std::span<const EnvBatch> batches,
                    double gamma, const MethodConfig& cfg, StepDiagnostics* diag) {
  switch (m) {
    case Method::ERM: return objective_erm(mv, batches, diag);
    case Method::IRMv1: return objective_irmv1(mv, batches, gamma, diag);
    case Method::IRMv0: return objective_irmv0(mv, batches, gamma, diag);
    case Method::REx: return objective_rex(mv, batches, gamma, diag);
    case Method::Fishr:
      return objective_fishr(mv, batches, gamma, cfg.fishr_full_params, diag);
    default:
      throw InvalidConfig("build_objective covers the single-level methods only");
  }
}

// ---------------------------------------------------------------------------

StepDiagnostics irm_game_step(PredictorParams& params,
                              std::span<const envgen::Batcher::Batch> batches,
                              GameState& state, long batch_size) {
  if (params.head_mode != HeadMode::PerEnv) {
    throw HeadModeMismatch("IRM-Game needs PerEnv heads");
  }
  const int n_env = static_cast<int>(params.heads.size());
  StepDiagnostics diag;
  diag.per_env_stationarity.resize(n_env);

  // Fixed round-robin: head e best-responds to the current ensemble.
  for (int e = 0; e < n_env; ++e) {
    Tape t;
    ModelVars mv = model::bind(t, params);
    Var x = t.constant(batches[e].x);
    Var y = t.constant(batches[e].y);
    Var risk = mean(bce_with_logits(model::ensemble_logit(mv, x), y));
    auto g = grad_values(risk, std::span<const Var>(mv.head_vars(e)));
    diag.per_env_stationarity[e] = g[0].squaredNorm() + g[1].squaredNorm();
    auto tensors = model::head_tensors(params, e);
    state.head_opts[e].step(tensors, g, batch_size);
  }

  auto theta_grads = [&](StepDiagnostics* d) {
    Tape t;
    ModelVars mv = model::bind(t, params);
    std::vector<Var> risks;
    for (int e = 0; e < n_env; ++e) {
      Var x = t.constant(batches[e].x);
      Var y = t.constant(batches[e].y);
      risks.push_back(mean(bce_with_logits(model::ensemble_logit(mv, x), y)));
    }
    Var total = sum_vars(risks);
    if (d) {
      fill_risks(d, risks);
      d->objective = total.scalar();
    }
    return grad_values(total, std::span<const Var>(mv.extractor_vars()));
  };

  auto tensors = model::extractor_tensors(params);
  const auto& ocfg = state.theta_opt.config();
  if (ocfg.kind == optim::OptKind::SAM) {
    throw InvalidConfig("IRM-Game theta optimizer must be driven via the train loop for SAM");
  }
  state.theta_opt.step(tensors, theta_grads(&diag), batch_size);
  diag.consensus_drift = head_drift(params);
  return diag;
}

// ---------------------------------------------------------------------------

namespace {

struct LowerAdamCtx {
  BlocState* state;
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;
};

/// One recorded lower-level descent step on (w, b). Plain GD by default;
/// with bloc_adam_lower the Adam moments enter as detached constants and the
/// smooth denominator sqrt(v̂ + eps²) keeps the unrolled path differentiable.
void lower_step(Tape& t, Var risk, Var& w, Var& b, const MethodConfig& cfg,
                LowerAdamCtx* adam, int head_index) {
  auto g = grad(risk, {w, b}, true);
  if (!adam) {
    w = sub(w, scalar_mul(cfg.lower_lr, g[0]));
    b = sub(b, scalar_mul(cfg.lower_lr, g[1]));
    return;
  }
  BlocState& st = *adam->state;
  const double t_step = static_cast<double>(st.lower_t + 1);
  const double c1 = 1.0 - std::pow(adam->b1, t_step);
  const double c2 = 1.0 - std::pow(adam->b2, t_step);
  Var params[2] = {w, b};
  for (int k = 0; k < 2; ++k) {
    const size_t slot = 2 * head_index + k;
    Mat& m_prev = st.head_m[slot];
    Mat& v_prev = st.head_v[slot];
    if (m_prev.size() == 0) {
      m_prev = Mat::Zero(params[k].rows(), params[k].cols());
      v_prev = Mat::Zero(params[k].rows(), params[k].cols());
    }
    Var m_new = add(t.constant(adam->b1 * m_prev), scalar_mul(1.0 - adam->b1, g[k]));
    Var v_new = add(t.constant(adam->b2 * v_prev), scalar_mul(1.0 - adam->b2, square(g[k])));
    Var mhat = scalar_mul(1.0 / c1, m_new);
    Var vhat = scalar_mul(1.0 / c2, v_new);
    Var denom = ad::sqrt(add(vhat, t.constant(Mat::Constant(
                                    params[k].rows(), params[k].cols(),
                                    adam->eps * adam->eps))));
    params[k] = sub(params[k], scalar_mul(cfg.lower_lr, divide(mhat, denom)));
    m_prev = m_new.value();
    v_prev = v_new.value();
  }
  w = params[0];
  b = params[1];
}

}  // namespace

BlocGraph build_bloc_graph(Tape& tape, const PredictorParams& params,
                           std::span<const EnvBatch> batches, double gamma_t,
                           const MethodConfig& cfg, Method variant,
                           BlocState* state) {
  if (params.head_mode != HeadMode::PerEnv) {
    throw HeadModeMismatch("BLOC needs PerEnv heads");
  }
  if (cfg.K < 1) throw InvalidConfig("K must be >= 1");
  const int n_env = static_cast<int>(batches.size());
  if (params.n_heads() != n_env) {
    throw InvalidConfig("one head per training environment required");
  }

  BlocGraph gph;
  gph.mv = model::bind(tape, params);

  LowerAdamCtx adam_ctx{state};
  LowerAdamCtx* adam = (cfg.bloc_adam_lower && state) ? &adam_ctx : nullptr;

  // Lower level: K recorded descent steps per environment head.
  std::vector<Var> w_tilde, b_tilde;
  for (int e = 0; e < n_env; ++e) {
    Var w = gph.mv.heads[e].w;
    Var b = gph.mv.heads[e].b;
    for (int k = 0; k < cfg.K; ++k) {
      Var risk = mean(bce_with_logits(
          model::logit_with_head(gph.mv, w, b, batches[e].x), batches[e].y));
      lower_step(tape, risk, w, b, cfg, adam, e);
    }
    w_tilde.push_back(w);
    b_tilde.push_back(b);
  }
  if (adam) ++state->lower_t;

  // Average consensus projection.
  const double inv_n = 1.0 / static_cast<double>(n_env);
  gph.w_star = scalar_mul(inv_n, sum_vars(w_tilde));
  gph.b_star = scalar_mul(inv_n, sum_vars(b_tilde));

  // Upper level at the consensus head.
  std::vector<std::vector<Var>> star_grads;
  std::vector<Var> v1_sens;
  for (int e = 0; e < n_env; ++e) {
    Var logits = model::logit_with_head(gph.mv, gph.w_star, gph.b_star, batches[e].x);
    Var risk;
    if (variant == Method::BLOC_v1) {
      // Scalar-at-1 sensitivity; the risk value is unchanged at s = 1.
      Var s = tape.leaf(scalar_mat(1.0));
      risk = mean(bce_with_logits(scale(logits, s), batches[e].y));
      auto gs = grad(risk, {s}, true);
      v1_sens.push_back(square(gs[0]));
    } else {
      risk = mean(bce_with_logits(logits, batches[e].y));
    }
    gph.risks.push_back(risk);
    auto g = grad(risk, {gph.w_star, gph.b_star}, true);
    star_grads.push_back(g);
    gph.stationarity.push_back(add(squared_norm(g[0]), squared_norm(g[1])));
  }

  Var total = sum_vars(gph.risks);
  if (gamma_t != 0.0) {
    Var pen;
    switch (variant) {
      case Method::BLOC:
        pen = sum_vars(gph.stationarity);
        break;
      case Method::BLOC_v1:
        pen = sum_vars(v1_sens);
        break;
      case Method::BLOC_REx:
        pen = population_variance(tape, gph.risks);
        break;
      case Method::BLOC_Fishr:
        pen = gradient_variance(star_grads);
        break;
      default:
        throw InvalidConfig("not a BLOC variant");
    }
    total = add(total, scalar_mul(gamma_t, pen));
  }
  gph.upper = total;
  return gph;
}

StepDiagnostics bloc_irm_step(PredictorParams& params,
                              std::span<const envgen::Batcher::Batch> batches,
                              BlocState& state, double gamma_t,
                              const MethodConfig& cfg, long batch_size,
                              Method variant) {
  Tape tape;
  std::vector<EnvBatch> eb;
  for (const auto& b : batches) {
    eb.push_back({tape.constant(b.x), tape.constant(b.y)});
  }
  BlocGraph gph = build_bloc_graph(tape, params, eb, gamma_t, cfg, variant, &state);

  const double scale_div = std::max(1.0, gamma_t);
  Var upper = scale_div > 1.0 ? scalar_mul(1.0 / scale_div, gph.upper) : gph.upper;
  auto grads = grad_values(upper, std::span<const Var>(gph.mv.extractor_vars()));
  auto tensors = model::extractor_tensors(params);
  state.upper_opt.step(tensors, grads, batch_size);

  // Projection: every head becomes the consensus value.
  const Mat w_star = gph.w_star.value();
  const Mat b_star = gph.b_star.value();
  for (auto& h : params.heads) {
    h.w = w_star;
    h.b = b_star;
  }

  StepDiagnostics diag;
  for (const Var& r : gph.risks) diag.per_env_risk.push_back(r.scalar());
  double pen = 0.0;
  for (const Var& s : gph.stationarity) {
    diag.per_env_stationarity.push_back(s.scalar());
    pen += s.scalar();
  }
  diag.penalty_value = pen;
  diag.objective = gph.upper.scalar();
  diag.consensus_drift = head_drift(params);
  return diag;
}

// ---------------------------------------------------------------------------

uint64_t epoch_seed(uint64_t run_seed, int env, int epoch) {
  return run_seed + 1000003ull * static_cast<uint64_t>(epoch) +
         7919ull * static_cast<uint64_t>(env);
}

EpochDiagnostics compute_diagnostics(const PredictorParams& params,
                                     const MethodConfig& cfg,
                                     std::span<const envgen::Batcher::Batch> batches,
                                     double gamma_t) {
  EpochDiagnostics out;
  out.effective_gamma = gamma_t;
  const int n_env = static_cast<int>(batches.size());

  Tape t;
  ModelVars mv = model::bind(t, params);

  // Evaluation head: the mean head for PerEnv modes, otherwise the model's
  // own classifier (the frozen scalar for IRMv1).
  Var head_w, head_b;
  if (params.head_mode == HeadMode::PerEnv) {
    Mat w = Mat::Zero(params.heads[0].w.rows(), 1);
    Mat b = Mat::Zero(1, 1);
    for (const auto& h : params.heads) {
      w += h.w;
      b += h.b;
    }
    w /= params.n_heads();
    b /= params.n_heads();
    head_w = t.leaf(w);
    head_b = t.leaf(b);
  }

  std::vector<std::vector<Mat>> env_grads;
  for (int e = 0; e < n_env; ++e) {
    Var x = t.constant(batches[e].x);
    Var y = t.constant(batches[e].y);
    Var risk;
    std::vector<Var> wrt;
    if (params.head_mode == HeadMode::PerEnv) {
      risk = mean(bce_with_logits(model::logit_with_head(mv, head_w, head_b, x), y));
      wrt = {head_w, head_b};
    } else if (params.head_mode == HeadMode::ScalarFrozen) {
      risk = model::env_risk(mv, -1, x, y);
      wrt = {mv.frozen_scalar};
    } else {
      risk = model::env_risk(mv, -1, x, y);
      wrt = mv.head_vars(0);
    }
    out.per_env_risk.push_back(risk.scalar());
    auto g = grad_values(risk, std::span<const Var>(wrt));
    double stat = 0.0;
    for (const Mat& gi : g) stat += gi.squaredNorm();
    out.per_env_stationarity.push_back(stat);
    env_grads.push_back(std::move(g));
  }

  switch (cfg.method) {
    case Method::REx:
    case Method::BLOC_REx: {
      double meanr = 0.0;
      for (double r : out.per_env_risk) meanr += r;
      meanr /= n_env;
      double var = 0.0;
      for (double r : out.per_env_risk) var += (r - meanr) * (r - meanr);
      out.penalty_value = var / n_env;
      break;
    }
    case Method::Fishr:
    case Method::BLOC_Fishr: {
      double pen = 0.0;
      for (size_t k = 0; k < env_grads[0].size(); ++k) {
        Mat meang = Mat::Zero(env_grads[0][k].rows(), env_grads[0][k].cols());
        for (int e = 0; e < n_env; ++e) meang += env_grads[e][k];
        meang /= n_env;
        for (int e = 0; e < n_env; ++e) pen += (env_grads[e][k] - meang).squaredNorm();
      }
      out.penalty_value = pen / n_env;
      break;
    }
    case Method::ERM:
    case Method::IRMGame:
      out.penalty_value = 0.0;
      break;
    default: {
      double pen = 0.0;
      for (double s : out.per_env_stationarity) pen += s;
      out.penalty_value = pen;
      break;
    }
  }
  out.consensus_drift = head_drift(params);
  double obj = 0.0;
  for (double r : out.per_env_risk) obj += r;
  out.objective = obj;
  return out;
}

TrainResult train(const MethodConfig& cfg, PredictorParams params,
                  const std::vector<envgen::EnvDataset>& envs, uint64_t run_seed,
                  const EvalHook& hook) {
  cfg.validate();
  if (envs.empty()) throw NoEnvironments("train needs at least one environment");
  if (params.head_mode != head_mode_for(cfg.method)) {
    throw HeadModeMismatch(std::string("method ") + method_name(cfg.method) +
                           " needs a different head mode");
  }
  if (params.head_mode == HeadMode::PerEnv &&
      params.n_heads() != static_cast<int>(envs.size())) {
    throw InvalidConfig("PerEnv model must carry one head per environment");
  }

  const int n_env = static_cast<int>(envs.size());
  const bool sam = cfg.optimizer.kind == optim::OptKind::SAM;
  optim::OptimizerConfig applied = cfg.optimizer;
  if (sam) {
    applied = cfg.optimizer.sam_inner ? *cfg.optimizer.sam_inner : [&] {
      optim::OptimizerConfig inner;
      inner.kind = optim::OptKind::Adam;
      inner.base_lr = cfg.optimizer.base_lr;
      return inner;
    }();
  }

  const bool game = cfg.method == Method::IRMGame;
  const bool bloc = is_bloc(cfg.method);

  std::unique_ptr<GameState> game_state;
  std::unique_ptr<BlocState> bloc_state;
  std::unique_ptr<optim::Optimizer> single_opt;
  const size_t n_extractor = model::extractor_tensors(params).size();
  if (game) {
    game_state = std::make_unique<GameState>(
        GameState{optim::Optimizer(applied, n_extractor), {}});
    for (int e = 0; e < n_env; ++e) {
      game_state->head_opts.emplace_back(applied, 2);
    }
  } else if (bloc) {
    bloc_state = std::make_unique<BlocState>(BlocState{
        optim::Optimizer(applied, n_extractor), {}, {}, 0});
    bloc_state->head_m.resize(2 * n_env);
    bloc_state->head_v.resize(2 * n_env);
  } else {
    single_opt = std::make_unique<optim::Optimizer>(
        applied, model::all_trainable_tensors(params).size());
  }

  TrainResult result;
  long global_step = 0;
  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const double gamma_t = epoch < cfg.warmup_epochs ? 0.0 : cfg.gamma;

    std::vector<envgen::Batcher> batchers;
    long steps_per_epoch = 0;
    for (int e = 0; e < n_env; ++e) {
      const long bs = std::min<long>(cfg.batch_size, envs[e].n());
      batchers.emplace_back(envs[e], bs, epoch_seed(run_seed, e, epoch));
      steps_per_epoch = std::max(steps_per_epoch, batchers.back().count());
    }

    std::vector<envgen::Batcher::Batch> step_batches(n_env);
    double epoch_drift = 0.0;  // max over the epoch's steps (post-projection for BLOC)
    for (long k = 0; k < steps_per_epoch; ++k) {
      for (int e = 0; e < n_env; ++e) {
        step_batches[e] = batchers[e].get(k % batchers[e].count());
      }
      try {
        if (game) {
          if (sam) {
            // SAM wraps the extractor update only; head sub-steps stay plain.
            StepDiagnostics d;
            for (int e = 0; e < n_env; ++e) {
              Tape t;
              ModelVars mv = model::bind(t, params);
              Var x = t.constant(step_batches[e].x);
              Var y = t.constant(step_batches[e].y);
              Var risk = mean(bce_with_logits(model::ensemble_logit(mv, x), y));
              auto g = grad_values(risk, std::span<const Var>(mv.head_vars(e)));
              auto tensors = model::head_tensors(params, e);
              game_state->head_opts[e].step(tensors, g, cfg.batch_size);
            }
            auto grad_fn = [&]() {
              Tape t;
              ModelVars mv = model::bind(t, params);
              std::vector<Var> risks;
              for (int e = 0; e < n_env; ++e) {
                Var x = t.constant(step_batches[e].x);
                Var y = t.constant(step_batches[e].y);
                risks.push_back(mean(bce_with_logits(model::ensemble_logit(mv, x), y)));
              }
              return grad_values(sum_vars(risks),
                                 std::span<const Var>(mv.extractor_vars()));
            };
            auto tensors = model::extractor_tensors(params);
            optim::sam_step(game_state->theta_opt, tensors, grad_fn,
                            cfg.optimizer.sam_rho, cfg.batch_size);
            epoch_drift = std::max(epoch_drift, head_drift(params));
          } else {
            StepDiagnostics d =
                irm_game_step(params, step_batches, *game_state, cfg.batch_size);
            epoch_drift = std::max(epoch_drift, d.consensus_drift);
          }
        } else if (bloc) {
          StepDiagnostics d = bloc_irm_step(params, step_batches, *bloc_state,
                                            gamma_t, cfg, cfg.batch_size, cfg.method);
          epoch_drift = std::max(epoch_drift, d.consensus_drift);
        } else {
          const double scale_div = std::max(1.0, gamma_t);
          auto grad_fn = [&]() {
            Tape t;
            ModelVars mv = model::bind(t, params);
            std::vector<EnvBatch> eb;
            for (int e = 0; e < n_env; ++e) {
              eb.push_back({t.constant(step_batches[e].x), t.constant(step_batches[e].y)});
            }
            Var obj = build_objective(cfg.method, mv, eb, gamma_t, cfg, nullptr);
            if (scale_div > 1.0) obj = scalar_mul(1.0 / scale_div, obj);
            return grad_values(obj, std::span<const Var>(mv.all_trainable_vars()));
          };
          auto tensors = model::all_trainable_tensors(params);
          if (sam) {
            optim::sam_step(*single_opt, tensors, grad_fn, cfg.optimizer.sam_rho,
                            cfg.batch_size);
          } else {
            single_opt->step(tensors, grad_fn(), cfg.batch_size);
          }
        }
      } catch (const FiniteViolation& e) {
        throw DivergenceError(global_step,
                              "divergence at epoch " + std::to_string(epoch) +
                                  " step " + std::to_string(global_step) + ": " +
                                  e.what());
      }
      ++global_step;
    }

    EpochDiagnostics diag = compute_diagnostics(params, cfg, step_batches, gamma_t);
    diag.epoch = epoch;
    diag.consensus_drift = std::max(diag.consensus_drift, epoch_drift);
    result.history.push_back(diag);
    if (hook) hook(epoch, params, diag);
  }

  result.params = std::move(params);
  return result;
}

}  // namespace irm::methods
