#pragma once

#include "irmkit/ops.hpp"

namespace irm::ad {

/// Central-difference check of grad() for a scalar graph function.
/// Returns the max relative error over all input coordinates, with
/// denominator max(|analytic|, |numeric|, 1e-8). Diagnostic only; epsilon
/// is clamped into [1e-7, 1e-3].
double finite_diff_check(const GraphFn& fn, const std::vector<Mat>& inputs,
                         double epsilon);

}  // namespace irm::ad
