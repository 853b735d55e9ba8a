#pragma once

#include "irmkit/env.hpp"
#include "irmkit/model.hpp"
#include "irmkit/optim.hpp"

#include <functional>
#include <string>
#include <vector>

namespace irm::methods {

enum class Method {
  ERM,
  IRMv1,
  IRMv0,
  REx,
  Fishr,
  IRMGame,
  BLOC,
  BLOC_v1,
  BLOC_REx,
  BLOC_Fishr,
};

const char* method_name(Method m);
Method method_from_name(const std::string& name);
model::HeadMode head_mode_for(Method m);
bool is_bloc(Method m);
model::InferenceMode inference_mode_for(Method m);

struct MethodConfig {
  Method method = Method::IRMv1;
  double gamma = 1e6;
  int warmup_epochs = 0;
  int total_epochs = 1;
  long batch_size = 1024;
  int K = 1;              // lower-level gradient steps (BLOC)
  double lower_lr = 2e-3;
  bool bloc_adam_lower = false;    // unrolled Adam-style lower step, state detached
  bool fishr_full_params = false;  // gradient variance over all trainables, not just the head
  optim::OptimizerConfig optimizer;

  void validate() const;
};

struct StepDiagnostics {
  std::vector<double> per_env_risk;
  std::vector<double> per_env_stationarity;  // |∇_head risk_e|² at the shared/consensus head
  double penalty_value = 0.0;                // unweighted penalty term
  double consensus_drift = 0.0;              // max pairwise head distance (PerEnv)
  double objective = 0.0;
};

struct EpochDiagnostics : StepDiagnostics {
  int epoch = 0;
  double effective_gamma = 0.0;
};

struct EnvBatch {
  ad::Var x;
  ad::Var y;
};

// --- single-level objectives --------------------------------------------
// Values follow the formulas exactly; with gamma == 0 the penalty subgraph
// is not built, so the objective coincides bitwise with its ERM reduction.

ad::Var objective_erm(const model::ModelVars& mv, std::span<const EnvBatch> batches,
                      StepDiagnostics* diag = nullptr);
ad::Var objective_irmv1(const model::ModelVars& mv, std::span<const EnvBatch> batches,
                        double gamma, StepDiagnostics* diag = nullptr);
ad::Var objective_irmv0(const model::ModelVars& mv, std::span<const EnvBatch> batches,
                        double gamma, StepDiagnostics* diag = nullptr);
ad::Var objective_rex(const model::ModelVars& mv, std::span<const EnvBatch> batches,
                      double gamma, StepDiagnostics* diag = nullptr);
ad::Var objective_fishr(const model::ModelVars& mv, std::span<const EnvBatch> batches,
                        double gamma, bool full_params = false,
                        StepDiagnostics* diag = nullptr);

ad::Var build_objective(Method m, const model::ModelVars& mv,
                        std::span<const EnvBatch> batches, double gamma,
                        const MethodConfig& cfg, StepDiagnostics* diag = nullptr);

// --- per-step drivers -----------------------------------------------------

struct GameState {
  optim::Optimizer theta_opt;
  std::vector<optim::Optimizer> head_opts;
};

/// Round-robin best response: each head takes one optimizer step on its own
/// environment's risk under the ensemble logits (heads updated in fixed
/// order, each seeing the previous updates), then the extractor takes one
/// step on the summed ensemble risks.
StepDiagnostics irm_game_step(model::PredictorParams& params,
                              std::span<const envgen::Batcher::Batch> batches,
                              GameState& state, long batch_size);

struct BlocState {
  optim::Optimizer upper_opt;
  // Detached Adam state for the unrolled lower step (bloc_adam_lower).
  std::vector<Mat> head_m, head_v;
  long lower_t = 0;
};

/// One BLOC iteration: K recorded gradient-descent steps per head, average
/// consensus projection, then an extractor update whose gradient flows
/// through the unrolled heads. `variant` picks the upper-level penalty
/// (BLOC: per-env stationarity; BLOC_v1/REx/Fishr: that method's penalty
/// evaluated at the consensus head).
StepDiagnostics bloc_irm_step(model::PredictorParams& params,
                              std::span<const envgen::Batcher::Batch> batches,
                              BlocState& state, double gamma_t,
                              const MethodConfig& cfg, long batch_size,
                              Method variant);

/// Pieces of the recorded BLOC graph, exposed so tests can differentiate the
/// upper objective directly.
struct BlocGraph {
  model::ModelVars mv;
  ad::Var w_star, b_star;
  std::vector<ad::Var> risks;
  std::vector<ad::Var> stationarity;  // |∇_{w*} risk_e|², always recorded
  ad::Var upper;                      // Σ risk + gamma · penalty(variant)
};

BlocGraph build_bloc_graph(ad::Tape& tape, const model::PredictorParams& params,
                           std::span<const EnvBatch> batches, double gamma_t,
                           const MethodConfig& cfg, Method variant,
                           BlocState* state);

// --- training loop ---------------------------------------------------------

struct TrainResult {
  model::PredictorParams params;
  std::vector<EpochDiagnostics> history;
};

using EvalHook =
    std::function<void(int epoch, const model::PredictorParams&, const EpochDiagnostics&)>;

/// Epoch-driven training: gamma is 0 during warm-up then jumps to the
/// configured value; the step loss is divided by max(1, gamma_t) following
/// the reference recipe; non-finite losses abort with DivergenceError.
TrainResult train(const MethodConfig& cfg, model::PredictorParams params,
                  const std::vector<envgen::EnvDataset>& envs, uint64_t run_seed,
                  const EvalHook& hook = {});

/// Deterministic derivation of the per-epoch shuffling seed.
uint64_t epoch_seed(uint64_t run_seed, int env, int epoch);

/// Risk, stationarity, penalty and drift of the current parameters on the
/// given batches, evaluated at the shared head (or the mean head for PerEnv
/// modes). Used for the per-epoch diagnostics stream.
EpochDiagnostics compute_diagnostics(const model::PredictorParams& params,
                                     const MethodConfig& cfg,
                                     std::span<const envgen::Batcher::Batch> batches,
                                     double gamma_t);

}  // namespace irm::methods
