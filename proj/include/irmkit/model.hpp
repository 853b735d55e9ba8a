#pragma once

#include "irmkit/ops.hpp"

#include <vector>

namespace irm::model {

using ad::Tape;
using ad::Var;

enum class HeadMode { Shared, ScalarFrozen, PerEnv };

enum class InferenceMode { Shared, EnsembleMeanLogit, ConsensusHead };

struct DenseLayer {
  Mat W;  // in×out
  Mat b;  // 1×out
};

struct Head {
  Mat w;  // d×1
  Mat b;  // 1×1
};

/// MLP feature extractor plus classifier head(s). For ScalarFrozen the
/// final d→1 linear layer belongs to the extractor parameters and the
/// classifier is the literal scalar 1.0.
struct PredictorParams {
  std::vector<DenseLayer> layers;
  std::vector<Head> heads;  // 1 (Shared), N (PerEnv), 0 (ScalarFrozen)
  HeadMode head_mode = HeadMode::Shared;
  int input_dim = 0;
  int hidden_dim = 0;
  int depth = 0;

  int n_heads() const { return static_cast<int>(heads.size()); }
};

/// Uniform(−1/√fan_in, 1/√fan_in) weights, zero biases. PerEnv heads are
/// drawn once and copied, so consensus holds at step 0.
PredictorParams init(int input_dim, int hidden_dim, int depth, HeadMode mode,
                     int n_envs, uint64_t seed);

// --- tape bindings -----------------------------------------------------

struct BoundLayer {
  Var W, b;
};
struct BoundHead {
  Var w, b;
};

struct ModelVars {
  std::vector<BoundLayer> layers;
  std::vector<BoundHead> heads;
  Var frozen_scalar;  // ScalarFrozen only; leaf with value 1.0
  HeadMode head_mode = HeadMode::Shared;
  int depth = 0;

  /// Extractor leaves in declaration order (W0, b0, W1, b1, ...), including
  /// the final linear layer under ScalarFrozen.
  std::vector<Var> extractor_vars() const;
  std::vector<Var> head_vars(int env) const;  // {w, b}
  std::vector<Var> all_trainable_vars() const;
};

ModelVars bind(Tape& tape, const PredictorParams& params);

/// Mutable views over the stored tensors, same order as the bound vars.
std::vector<Mat*> extractor_tensors(PredictorParams& params);
std::vector<Mat*> head_tensors(PredictorParams& params, int env);
std::vector<Mat*> all_trainable_tensors(PredictorParams& params);

Var features(const ModelVars& mv, Var x);

/// env selects the PerEnv head; ignored for Shared and ScalarFrozen.
Var logit(const ModelVars& mv, int env, Var x);
Var ensemble_logit(const ModelVars& mv, Var x);

/// Logit of x under an explicitly provided head (used with consensus heads
/// that live on the tape rather than in the parameter struct).
Var logit_with_head(const ModelVars& mv, Var head_w, Var head_b, Var x);

/// Mean binary cross-entropy with logits over one batch.
Var env_risk(const ModelVars& mv, int env, Var x, Var y);

// --- tape-free inference ------------------------------------------------

Mat eval_features(const PredictorParams& params, const Mat& x);
Mat eval_logits(const PredictorParams& params, const Mat& x, InferenceMode mode);

}  // namespace irm::model
