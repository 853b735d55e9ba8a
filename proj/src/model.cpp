#include "irmkit/model.hpp"

#include <cmath>

namespace irm::model {

using namespace irm::ad;

PredictorParams init(int input_dim, int hidden_dim, int depth, HeadMode mode,
                     int n_envs, uint64_t seed) {
  if (input_dim < 1 || hidden_dim < 1 || depth < 1) {
    throw InvalidConfig("model dimensions must be positive");
  }
  if (mode == HeadMode::PerEnv && n_envs < 1) {
    throw InvalidConfig("PerEnv head mode needs at least one environment");
  }

  PredictorParams p;
  p.head_mode = mode;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  p.depth = depth;

  Rng rng(seed);
  auto uniform_mat = [&](int r, int c, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    return m;
  };

  int in = input_dim;
  for (int l = 0; l < depth; ++l) {
    p.layers.push_back({uniform_mat(in, hidden_dim, in), Mat::Zero(1, hidden_dim)});
    in = hidden_dim;
  }
  if (mode == HeadMode::ScalarFrozen) {
    p.layers.push_back({uniform_mat(hidden_dim, 1, hidden_dim), Mat::Zero(1, 1)});
  } else {
    Head h{uniform_mat(hidden_dim, 1, hidden_dim), Mat::Zero(1, 1)};
    const int count = mode == HeadMode::PerEnv ? n_envs : 1;
    for (int e = 0; e < count; ++e) p.heads.push_back(h);
  }
  return p;
}

ModelVars bind(Tape& tape, const PredictorParams& params) {
  ModelVars mv;
  mv.head_mode = params.head_mode;
  mv.depth = params.depth;
  for (const DenseLayer& l : params.layers) {
    mv.layers.push_back({tape.leaf(l.W), tape.leaf(l.b)});
  }
  for (const Head& h : params.heads) {
    mv.heads.push_back({tape.leaf(h.w), tape.leaf(h.b)});
  }
  if (params.head_mode == HeadMode::ScalarFrozen) {
    mv.frozen_scalar = tape.leaf(scalar_mat(1.0));
  }
  return mv;
}

std::vector<Var> ModelVars::extractor_vars() const {
  std::vector<Var> out;
  for (const BoundLayer& l : layers) {
    out.push_back(l.W);
    out.push_back(l.b);
  }
  return out;
}

std::vector<Var> ModelVars::head_vars(int env) const {
  if (env < 0 || env >= static_cast<int>(heads.size())) {
    throw BadEnvIndex("head index out of range");
  }
  return {heads[env].w, heads[env].b};
}

std::vector<Var> ModelVars::all_trainable_vars() const {
  std::vector<Var> out = extractor_vars();
  for (const BoundHead& h : heads) {
    out.push_back(h.w);
    out.push_back(h.b);
  }
  return out;
}

std::vector<Mat*> extractor_tensors(PredictorParams& params) {
  std::vector<Mat*> out;
  for (DenseLayer& l : params.layers) {
    out.push_back(&l.W);
    out.push_back(&l.b);
  }
  return out;
}

std::vector<Mat*> head_tensors(PredictorParams& params, int env) {
  if (env < 0 || env >= params.n_heads()) throw BadEnvIndex("head index out of range");
  return {&params.heads[env].w, &params.heads[env].b};
}

std::vector<Mat*> all_trainable_tensors(PredictorParams& params) {
  std::vector<Mat*> out = extractor_tensors(params);
  for (Head& h : params.heads) {
    out.push_back(&h.w);
    out.push_back(&h.b);
  }
  return out;
}

Var features(const ModelVars& mv, Var x) {
  Var h = x;
  for (int l = 0; l < mv.depth; ++l) {
    h = relu(add_rowvec(matmul(h, mv.layers[l].W), mv.layers[l].b));
  }
  return h;
}

Var logit_with_head(const ModelVars& mv, Var head_w, Var head_b, Var x) {
  Var z = features(mv, x);
  return add_rowvec(matmul(z, head_w), head_b);
}

Var logit(const ModelVars& mv, int env, Var x) {
  switch (mv.head_mode) {
    case HeadMode::Shared:
      return logit_with_head(mv, mv.heads.at(0).w, mv.heads.at(0).b, x);
    case HeadMode::ScalarFrozen: {
      Var z = features(mv, x);
      const BoundLayer& last = mv.layers.back();
      Var raw = add_rowvec(matmul(z, last.W), last.b);
      return scale(raw, mv.frozen_scalar);
    }
    case HeadMode::PerEnv: {
      if (env < 0 || env >= static_cast<int>(mv.heads.size())) {
        throw BadEnvIndex("env index out of range for PerEnv heads");
      }
      return logit_with_head(mv, mv.heads[env].w, mv.heads[env].b, x);
    }
  }
  throw HeadModeMismatch("unknown head mode");
}

Var ensemble_logit(const ModelVars& mv, Var x) {
  if (mv.head_mode != HeadMode::PerEnv) {
    throw HeadModeMismatch("ensemble logits need PerEnv heads");
  }
  Var z = features(mv, x);
  Var acc;
  for (const BoundHead& h : mv.heads) {
    Var l = add_rowvec(matmul(z, h.w), h.b);
    acc = acc.on_tape() ? add(acc, l) : l;
  }
  return scalar_mul(1.0 / static_cast<double>(mv.heads.size()), acc);
}

Var env_risk(const ModelVars& mv, int env, Var x, Var y) {
  return mean(bce_with_logits(logit(mv, env, x), y));
}

Mat eval_features(const PredictorParams& params, const Mat& x) {
  if (x.cols() != params.input_dim) throw ShapeError("input dimension mismatch");
  Mat h = x;
  for (int l = 0; l < params.depth; ++l) {
    Mat z = h * params.layers[l].W;
    z.rowwise() += params.layers[l].b.row(0);
    h = z.cwiseMax(0.0);
  }
  return h;
}

Mat eval_logits(const PredictorParams& params, const Mat& x, InferenceMode mode) {
  const Mat z = eval_features(params, x);
  switch (mode) {
    case InferenceMode::Shared: {
      if (params.head_mode == HeadMode::ScalarFrozen) {
        const DenseLayer& last = params.layers.back();
        Mat out = z * last.W;
        out.rowwise() += last.b.row(0);
        return out;
      }
      if (params.head_mode != HeadMode::Shared) {
        throw HeadModeMismatch("Shared inference needs a shared or frozen head");
      }
      Mat out = z * params.heads[0].w;
      out.array() += params.heads[0].b(0, 0);
      return out;
    }
    case InferenceMode::EnsembleMeanLogit: {
      if (params.head_mode != HeadMode::PerEnv) {
        throw HeadModeMismatch("ensemble inference needs PerEnv heads");
      }
      Mat out = Mat::Zero(x.rows(), 1);
      for (const Head& h : params.heads) {
        Mat l = z * h.w;
        l.array() += h.b(0, 0);
        out += l;
      }
      return out / static_cast<double>(params.heads.size());
    }
    case InferenceMode::ConsensusHead: {
      if (params.head_mode != HeadMode::PerEnv) {
        throw HeadModeMismatch("consensus inference needs PerEnv heads");
      }
      Mat w = Mat::Zero(params.heads[0].w.rows(), 1);
      double b = 0.0;
      for (const Head& h : params.heads) {
        w += h.w;
        b += h.b(0, 0);
      }
      w /= static_cast<double>(params.heads.size());
      b /= static_cast<double>(params.heads.size());
      Mat out = z * w;
      out.array() += b;
      return out;
    }
  }
  throw HeadModeMismatch("unknown inference mode");
}

}  // namespace irm::model
