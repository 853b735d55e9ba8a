#include "irmkit/finite_diff.hpp"

#include <algorithm>
#include <cmath>

namespace irm::ad {

double finite_diff_check(const GraphFn& fn, const std::vector<Mat>& inputs,
                         double epsilon) {
  const double eps = std::clamp(epsilon, 1e-7, 1e-3);

  ForwardResult fr = forward(fn, inputs);
  std::vector<Mat> analytic = grad_values(fr.output, std::span<const Var>(fr.inputs));

  const auto eval_at = [&](const std::vector<Mat>& pts) {
    ForwardResult r = forward(fn, pts);
    return r.output.scalar();
  };

  double max_rel = 0.0;
  std::vector<Mat> probe = inputs;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double orig = probe[k].data()[i];
      probe[k].data()[i] = orig + eps;
      const double fp = eval_at(probe);
      probe[k].data()[i] = orig - eps;
      const double fm = eval_at(probe);
      probe[k].data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k].data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace irm::ad
