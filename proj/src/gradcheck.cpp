#include "pco/gradcheck.hpp"

#include <cmath>

namespace pco::ad {

namespace {

Tensor with_entry(const Tensor& t, std::size_t index, double value) {
  std::vector<double> values(t.data().begin(), t.data().end());
  values[index] = value;
  return Tensor(t.shape(), std::move(values));
}

double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& params) {
  const Tensor v = f(params);
  if (v.size() != 1) {
    throw TapeError("finite_difference_check: f must return a scalar, got shape " +
                    shape_str(v.shape()));
  }
  const double x = v.item();
  if (!std::isfinite(x)) throw NonFiniteError("finite_difference_check: f returned non-finite");
  return x;
}

}  // namespace

double finite_difference_check(const ScalarFn& f, const std::vector<Tensor>& params,
                               double step) {
  if (step <= 0.0) throw DomainError("finite_difference_check: step must be positive");

  Tape tape;
  std::vector<Tensor> bound;
  bound.reserve(params.size());
  for (const Tensor& p : params) bound.push_back(tape.leaf(p));
  const Tensor root = f(bound);
  if (root.size() != 1) {
    throw TapeError("finite_difference_check: f must return a scalar, got shape " +
                    shape_str(root.shape()));
  }
  if (!std::isfinite(root.item())) {
    throw NonFiniteError("finite_difference_check: f returned non-finite");
  }
  const GradMap grads = tape.backward(root);

  double max_rel = 0.0;
  std::vector<Tensor> probe = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor analytic = grads.at(bound[pi]);
    const auto base = params[pi].data();
    for (std::size_t j = 0; j < base.size(); ++j) {
      probe[pi] = with_entry(params[pi], j, base[j] + step);
      const double hi = eval_scalar(f, probe);
      probe[pi] = with_entry(params[pi], j, base[j] - step);
      const double lo = eval_scalar(f, probe);
      const double fd = (hi - lo) / (2.0 * step);
      const double a = analytic.data()[j];
      const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
      max_rel = std::max(max_rel, rel);
    }
    probe[pi] = params[pi];
  }
  return max_rel;
}

}  // namespace pco::ad
