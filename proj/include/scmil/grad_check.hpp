#pragma once

#include <functional>
#include <vector>

#include "scmil/tape.hpp"

namespace scmil {

// Builds a scalar loss on the given tape from leaf nodes registered for the
// parameter tensors, in order. Must be deterministic in the parameter values.
using ScalarGraphFn = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

// Max over all parameter coordinates of
//   |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)
// where g_fd is the central difference (f(x+eps) - f(x-eps)) / (2 eps).
double finite_diff_check(const ScalarGraphFn& f, const std::vector<Tensor>& params,
                         double eps);

}  // namespace scmil
