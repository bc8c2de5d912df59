#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcl/autodiff.hpp"
#include "cmcl/model.hpp"
#include "cmcl/params.hpp"

namespace cmcl {

enum class ClFlavor { kLcl, kLicl };
// kHardest: Neg_ICL uses the most similar wrong label. kAll: sum over every
// wrong label, without the temperature (literal form).
enum class NegativeMode { kHardest, kAll };

std::string_view to_string(NegativeMode m);
NegativeMode parse_negative_mode(std::string_view s);

struct CLConfig {
  double tau = 1.0;
  double eta = 0.02;
  double lambda = 0.4;
  ClFlavor flavor = ClFlavor::kLicl;
  NegativeMode negatives = NegativeMode::kHardest;

  void validate() const;
};

// Ablation rows.
enum class Variant {
  kBaseline,     // B
  kLicl1,        // B + LICL^1
  kLicl2,        // B + LICL^2
  kLicl3,        // B + LICL^3
  kLicl123,      // B + LICL^{1~3}
  kCe123,        // B + CE^{1~3}
  kCmclLcl,      // B + CMCL(LCL)
  kCmclLicl,     // B + CMCL(LICL)
};

inline constexpr std::array<Variant, 8> kAllVariants = {Variant::kBaseline, Variant::kCmclLicl, Variant::kLicl1,
                                                        Variant::kLicl2,    Variant::kLicl3,    Variant::kLicl123,
                                                        Variant::kCe123,    Variant::kCmclLcl};

std::string_view to_string(Variant v);
// Accepts the names produced by to_string ("b", "b_licl1", ..., "b_cmcl_licl").
Variant parse_variant(std::string_view s);

struct VariantSpec {
  Variant variant = Variant::kCmclLicl;
  // Weight of a standalone contrastive term per layer (index 0 = layer 1).
  std::array<double, 3> layer_lambda = {0.4, 0.4, 0.4};

  static VariantSpec with_lambda(Variant v, double lambda) { return {v, {lambda, lambda, lambda}}; }

  // Layers whose contrastive head the variant needs.
  std::vector<int> contrastive_layers() const;
  bool uses_aux_heads() const { return variant == Variant::kCe123; }
  bool is_cmcl() const { return variant == Variant::kCmclLcl || variant == Variant::kCmclLicl; }
  ClFlavor flavor() const { return variant == Variant::kCmclLcl ? ClFlavor::kLcl : ClFlavor::kLicl; }
};

// gamma_c = mean(|D|) / |D_c|
struct ClassWeights {
  std::vector<double> gamma;
};

ClassWeights class_weights(std::span<const std::size_t> counts);

// Per-layer contrastive heads (W^mu, label table) and auxiliary CE classifiers.
// Only the heads a variant touches are instantiated.
class Heads {
 public:
  // dims[k] is the representation width of layer k+1.
  Heads(std::array<std::size_t, 3> dims, std::size_t num_classes);

  void add_contrastive(int layer, std::mt19937_64& rng);
  void add_aux(int layer, std::mt19937_64& rng);
  bool has_contrastive(int layer) const;
  bool has_aux(int layer) const;

  Parameter& w_mu(int layer);
  Parameter& labels(int layer);
  Parameter& aux_w(int layer);
  Parameter& aux_b(int layer);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t dim(int layer) const { return dims_.at(static_cast<std::size_t>(layer - 1)); }
  std::size_t num_classes() const { return num_classes_; }

  static ParamGroup head_group(int layer);
  static ParamGroup aux_group(int layer);

 private:
  std::array<std::size_t, 3> dims_;
  std::size_t num_classes_;
  ParamStore params_;
};

// Builds the heads a variant needs, seeded.
Heads make_heads(const ModelConfig& mc, const VariantSpec& spec, std::uint64_t seed);

// mu = [h0, s0] W^mu. Row inputs (1 x d) or stacked rows (N x d).
Var instance_repr(Var h0, Var s0, Var w_mu);

// Per-instance numerator/denominator terms, each 1 x N.
struct ContrastiveParts {
  Var pos_lcl;  // exp(Sim(L_y, mu_i)/tau), label-centered view
  Var neg_lcl;  // sum over B(y_i) of exp(Sim(L_y, mu_x)/tau)
  Var pos_icl;  // exp(Sim(L_y, mu_i)/tau), instance-centered view
  Var neg_icl;  // hardest or all-label negative
  std::vector<std::size_t> active;  // instances with a non-empty B(y_i)
  std::vector<std::size_t> hardest;  // c* per active instance (hardest mode)
};

// Requires a batch with at least two distinct labels; see contrastive_loss for
// the single-class case.
ContrastiveParts contrastive_parts(Var mu, Var label_table, std::span<const std::size_t> labels, double tau,
                                   NegativeMode mode);

struct ContrastiveLoss {
  Var loss;
  std::size_t skipped = 0;  // instances with empty B(y_i), excluded from the sum
};

ContrastiveLoss loss_lcl(Var mu, Var label_table, std::span<const std::size_t> labels, const ClassWeights& gamma,
                         double tau);
ContrastiveLoss loss_licl(Var mu, Var label_table, std::span<const std::size_t> labels, const ClassWeights& gamma,
                          double tau, NegativeMode mode);
ContrastiveLoss contrastive_loss(ClFlavor flavor, Var mu, Var label_table, std::span<const std::size_t> labels,
                                 const ClassWeights& gamma, const CLConfig& cfg);

// argmax over c != y of sims[c]; ties go to the lowest class id.
std::size_t hardest_negative_label(std::span<const double> sims, std::size_t true_label);

struct CmclLoss {
  Var total;
  std::vector<Var> hinges;  // hinge k = max(0, l_{k+1} - l_k - eta)
};

// With detach_lower the lower-layer loss inside each hinge is a constant.
CmclLoss loss_cmcl(std::span<const Var> layer_losses, double eta, bool detach_lower = false);

struct CrossEntropy {
  Var loss;  // batch mean of -log p(y)
  std::size_t clamped = 0;  // p(y) < 1e-300
};

// probs: N x |C|
CrossEntropy cross_entropy(Var probs, std::span<const std::size_t> labels);
// Softmax classifier on [h0, s0] with the auxiliary head of `layer`.
Var aux_probs(Var h0, Var s0, Var w, Var b);

struct LossBreakdown {
  double ce = 0.0;
  std::array<std::optional<double>, 3> cl;  // LICL (or LCL) per layer
  std::optional<double> hinge12;
  std::optional<double> hinge23;
  std::array<std::optional<double>, 3> aux_ce;
  double total = 0.0;
  std::size_t skipped = 0;
  std::size_t clamped = 0;
};

// Per-term gradient routing: `term`'s gradient is applied only to parameters
// whose group is in `mask`.
struct RoutedTerm {
  Var term;
  GroupMask mask;
};

struct JointLoss {
  LossBreakdown breakdown;
  Var total;  // un-routed objective (plain sum), for gradient checks
  std::vector<RoutedTerm> routed;
};

// Everything joint_loss needs from a batch forward pass.
struct BatchOutputs {
  std::vector<ForwardResult> per_instance;
  std::vector<std::size_t> labels;
};

JointLoss joint_loss(Tape& tape, const BatchOutputs& batch, Heads& heads, const CLConfig& cfg,
                     const VariantSpec& spec, const ClassWeights& gamma);

// Groups a hinge term may update: fusion + head 2 for 1->2, aggregation + head 3 for 2->3.
GroupMask hinge_route(int lower_layer);

}  // namespace cmcl
