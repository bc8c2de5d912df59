#include "cmcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cmcl/error.hpp"

namespace cmcl {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
  return std::abs(analytic - numeric) / denom;
}

nlohmann::json to_json(const GradReport& report) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : report.params) {
    params.push_back({{"name", p.name},
                      {"frozen", p.frozen},
                      {"checked", p.checked},
                      {"skipped", p.skipped},
                      {"max_rel_error", p.max_rel_error},
                      {"max_abs_analytic", p.max_abs_analytic}});
  }
  return {{"pass", report.pass},
          {"tolerance", report.tolerance},
          {"max_rel_error", report.max_rel_error},
          {"checked", report.checked},
          {"skipped", report.skipped},
          {"params", params}};
}

namespace {

Probe evaluate(const LossFn& loss) {
  Tape tape;
  Var v = loss(tape);
  const double value = v.item();
  if (!std::isfinite(value)) throw NumericalError("grad_check: non-finite loss at perturbed point");
  return {value, tape.branch_signature()};
}

}  // namespace

std::optional<double> numeric_derivative(const std::function<Probe()>& eval, double& x, std::uint64_t base_signature,
                                         double step) {
  const double saved = x;
  double f[4];  // at +2h, +h, -h, -2h
  static constexpr double kOffsets[4] = {2.0, 1.0, -1.0, -2.0};
  for (int k = 0; k < 4; ++k) {
    x = saved + kOffsets[k] * step;
    const Probe p = eval();
    if (p.signature != base_signature) {
      x = saved;
      return std::nullopt;
    }
    f[k] = p.value;
  }
  x = saved;
  // Differences of symmetric pairs first, so a flat direction gives exactly 0.
  return (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * step);
}

GradReport grad_check(const LossFn& loss, std::span<Parameter* const> params, const GradCheckOptions& opts) {
  if (!(opts.step > 0.0)) throw ValidationError("grad_check: step must be positive");

  Tape base;
  Var root = loss(base);
  const std::uint64_t base_signature = base.branch_signature();
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  // Bind every parameter before backward so frozen ones resolve to constants.
  std::vector<Var> leaves;
  for (Parameter* p : params) leaves.push_back(base.param(*p));
  base.backward(root);
  for (const Var& v : leaves) analytic.push_back(base.grad(v));

  GradReport report;
  report.tolerance = opts.tolerance;
  std::mt19937_64 rng(opts.seed);

  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    ParamCheck check;
    check.name = p.name;
    check.frozen = !p.trainable;
    const Tensor& a = analytic[k];
    for (double g : a.values()) check.max_abs_analytic = std::max(check.max_abs_analytic, std::abs(g));

    if (check.frozen) {
      // Leaf not in the graph: anything other than exact zero is a failure.
      check.max_rel_error = check.max_abs_analytic == 0.0 ? 0.0 : 1.0;
      report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
      report.params.push_back(check);
      continue;
    }

    std::vector<std::size_t> elements(p.value.size());
    std::iota(elements.begin(), elements.end(), std::size_t{0});
    if (elements.size() > opts.max_elements) {
      std::shuffle(elements.begin(), elements.end(), rng);
      elements.resize(opts.max_elements);
      std::sort(elements.begin(), elements.end());
    }

    for (std::size_t e : elements) {
      const auto numeric = numeric_derivative([&] { return evaluate(loss); }, p.value[e], base_signature, opts.step);
      if (!numeric) {
        ++check.skipped;
        continue;
      }
      check.max_rel_error = std::max(check.max_rel_error, relative_error(a[e], *numeric));
      ++check.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.checked += check.checked;
    report.skipped += check.skipped;
    report.params.push_back(check);
  }
  report.pass = report.max_rel_error < opts.tolerance;
  return report;
}

}  // namespace cmcl
