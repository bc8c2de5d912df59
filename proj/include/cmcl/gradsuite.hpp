#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcl/gradcheck.hpp"

namespace cmcl {

// Finite-difference checks of every loss term on one seeded random
// configuration (small model, random batch, random tau and class counts).
struct TermCheck {
  std::string term;  // ce, lcl, licl_hardest, licl_all, cmcl, objective
  GradReport report;
};

struct GradSuiteResult {
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<TermCheck> terms;
  bool pass = false;
  double max_rel_error = 0.0;
};

GradSuiteResult gradient_suite(std::uint64_t seed, const GradCheckOptions& opts = {});
nlohmann::json to_json(const GradSuiteResult& r);

// Applied (routed) gradient of one hinge term against its designated groups.
struct RoutingCheck {
  int lower_layer = 1;  // 1: hinge(1->2), 2: hinge(2->3)
  double hinge_value = 0.0;
  // Largest |applied gradient| over parameters outside the route; must be 0.
  double max_abs_outside = 0.0;
  std::size_t outside_elements = 0;
  // Relative error of applied gradient vs central differences inside the route.
  double max_rel_inside = 0.0;
  std::size_t inside_checked = 0;
  std::size_t inside_skipped = 0;
  bool pass = false;
};

std::vector<RoutingCheck> routing_audit(std::uint64_t seed, const GradCheckOptions& opts = {});
nlohmann::json to_json(const RoutingCheck& r);

}  // namespace cmcl
