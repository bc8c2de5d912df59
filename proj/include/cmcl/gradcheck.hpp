#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcl/autodiff.hpp"

namespace cmcl {

// |a - n| / max(|a|, |n|, 1e-7)
double relative_error(double analytic, double numeric);

struct ParamCheck {
  std::string name;
  bool frozen = false;
  std::size_t checked = 0;
  // Elements whose +/- perturbation changed a non-smooth decision (relu side,
  // argmax index, hinge activity) and therefore have no valid central difference.
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
};

struct GradReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool pass = false;
};

nlohmann::json to_json(const GradReport& report);

struct GradCheckOptions {
  // Five-point central stencil, truncation error O(h^4).
  double step = 3e-4;
  double tolerance = 1e-4;
  // Parameters above this many elements are checked on a seeded random subsample.
  std::size_t max_elements = 10000;
  std::uint64_t seed = 0;
};

// Loss value and branch signature of one evaluation.
struct Probe {
  double value;
  std::uint64_t signature;
};

// d/dx of eval() at the current value of `x` with the five-point stencil.
// Returns nullopt when a non-smooth decision differs from `base_signature`
// at any stencil point. `x` is restored before returning.
std::optional<double> numeric_derivative(const std::function<Probe()>& eval, double& x, std::uint64_t base_signature,
                                         double step);

// Builds a scalar loss on the given tape. Must be deterministic.
using LossFn = std::function<Var(Tape&)>;

// Compares reverse-mode gradients of `loss` against central finite differences
// for every element of every listed parameter. Frozen parameters are not
// perturbed; their analytic gradient must be exactly zero.
GradReport grad_check(const LossFn& loss, std::span<Parameter* const> params, const GradCheckOptions& opts = {});

}  // namespace cmcl
