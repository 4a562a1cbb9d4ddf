#pragma once

#include <functional>
#include <vector>

#include "pco/tape.hpp"

namespace pco::ad {

// A deterministic scalar-valued function of a parameter list, expressed with
// the ops above. The checker calls it with tape-bound leaves to get analytic
// gradients and with plain constants for the finite-difference evaluations.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Central-difference gradient check. Returns
//   max over parameter entries of |analytic - fd| / max(1, |analytic|).
// Throws if f produces a non-finite or non-scalar value.
double finite_difference_check(const ScalarFn& f, const std::vector<Tensor>& params,
                               double step);

}  // namespace pco::ad
