#include "scmil/grad_check.hpp"

#include <cmath>
#include <string>

namespace scmil {

namespace {

double evaluate(const ScalarGraphFn& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<NodeId> ids;
  ids.reserve(params.size());
  for (const Tensor& p : params) ids.push_back(tape.input(p));
  NodeId loss = f(tape, ids);
  const Tensor& v = tape.value(loss);
  if (!v.is_scalar()) {
    throw ShapeError("finite_diff_check: function output must be scalar, got " +
                     v.shape_str());
  }
  double out = v.values[0];
  if (!std::isfinite(out)) {
    throw NumericError("finite_diff_check: non-finite function value");
  }
  return out;
}

}  // namespace

double finite_diff_check(const ScalarGraphFn& f, const std::vector<Tensor>& params,
                         double eps) {
  if (!(eps > 0.0)) {
    throw NumericError("finite_diff_check: eps must be positive, got " +
                       std::to_string(eps));
  }

  Tape tape;
  std::vector<NodeId> ids;
  ids.reserve(params.size());
  for (const Tensor& p : params) ids.push_back(tape.input(p));
  NodeId loss = f(tape, ids);
  if (!tape.value(loss).is_scalar()) {
    throw ShapeError("finite_diff_check: function output must be scalar, got " +
                     tape.value(loss).shape_str());
  }
  if (!std::isfinite(tape.value(loss).values[0])) {
    throw NumericError("finite_diff_check: non-finite function value");
  }
  GradMap grads = tape.backward(loss);

  std::vector<Tensor> work = params;
  double max_rel = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    const Tensor& g_ad = grads.at(ids[p]);
    for (size_t c = 0; c < params[p].numel(); ++c) {
      double saved = work[p].values[c];
      work[p].values[c] = saved + eps;
      double f_plus = evaluate(f, work);
      work[p].values[c] = saved - eps;
      double f_minus = evaluate(f, work);
      work[p].values[c] = saved;
      double g_fd = (f_plus - f_minus) / (2.0 * eps);
      double g = g_ad.values[c];
      double rel = std::abs(g - g_fd) / std::max(1e-12, std::abs(g) + std::abs(g_fd));
      if (rel > max_rel) max_rel = rel;
    }
  }
  return max_rel;
}

}  // namespace scmil
