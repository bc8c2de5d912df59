#include "cmcl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmcl/corpus.hpp"
#include "cmcl/error.hpp"

namespace cmcl {

std::string_view to_string(NegativeMode m) { return m == NegativeMode::kHardest ? "hardest" : "all"; }

NegativeMode parse_negative_mode(std::string_view s) {
  if (s == "hardest") return NegativeMode::kHardest;
  if (s == "all") return NegativeMode::kAll;
  throw ValidationError("unknown negative mode '" + std::string(s) + "' (expected hardest|all)");
}

void CLConfig::validate() const {
  if (!(tau > 0.0)) throw ValidationError("CLConfig: tau must be > 0");
  if (!(eta >= 0.0)) throw ValidationError("CLConfig: eta must be >= 0");
  if (!(lambda >= 0.0)) throw ValidationError("CLConfig: lambda must be >= 0");
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "b";
    case Variant::kLicl1: return "b_licl1";
    case Variant::kLicl2: return "b_licl2";
    case Variant::kLicl3: return "b_licl3";
    case Variant::kLicl123: return "b_licl_123";
    case Variant::kCe123: return "b_ce_123";
    case Variant::kCmclLcl: return "b_cmcl_lcl";
    case Variant::kCmclLicl: return "b_cmcl_licl";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == s) return v;
  }
  throw ValidationError("unknown variant '" + std::string(s) +
                        "' (expected b|b_licl1|b_licl2|b_licl3|b_licl_123|b_ce_123|b_cmcl_lcl|b_cmcl_licl)");
}

std::vector<int> VariantSpec::contrastive_layers() const {
  switch (variant) {
    case Variant::kBaseline:
    case Variant::kCe123: return {};
    case Variant::kLicl1: return {1};
    case Variant::kLicl2: return {2};
    case Variant::kLicl3: return {3};
    case Variant::kLicl123:
    case Variant::kCmclLcl:
    case Variant::kCmclLicl: return {1, 2, 3};
  }
  return {};
}

ClassWeights class_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw ValidationError("class_weights: no classes");
  double total = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw ValidationError("class_weights: class " + std::to_string(c) + " has no training instances");
    total += static_cast<double>(counts[c]);
  }
  const double mean = total / static_cast<double>(counts.size());
  ClassWeights w;
  for (std::size_t c : counts) w.gamma.push_back(mean / static_cast<double>(c));
  return w;
}

// ---------------------------------------------------------------------------
// Heads

Heads::Heads(std::array<std::size_t, 3> dims, std::size_t num_classes) : dims_(dims), num_classes_(num_classes) {}

ParamGroup Heads::head_group(int layer) {
  switch (layer) {
    case 1: return ParamGroup::kHead1;
    case 2: return ParamGroup::kHead2;
    case 3: return ParamGroup::kHead3;
  }
  throw ValidationError("unknown layer " + std::to_string(layer));
}

ParamGroup Heads::aux_group(int layer) {
  switch (layer) {
    case 1: return ParamGroup::kAux1;
    case 2: return ParamGroup::kAux2;
    case 3: return ParamGroup::kAux3;
  }
  throw ValidationError("unknown layer " + std::to_string(layer));
}

namespace {

std::string head_name(int layer, const char* what) { return "head" + std::to_string(layer) + "." + what; }
std::string aux_name(int layer, const char* what) { return "aux" + std::to_string(layer) + "." + what; }

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

void Heads::add_contrastive(int layer, std::mt19937_64& rng) {
  const ParamGroup g = head_group(layer);
  const std::size_t d = dim(layer);
  params_.add(head_name(layer, "w_mu"), g, true, uniform({2 * d, d}, 0.1, rng));
  Tensor table = uniform({num_classes_, d}, 0.1, rng);
  for (std::size_t c = 0; c < num_classes_; ++c) {
    double norm = 0.0;
    for (std::size_t k = 0; k < d; ++k) norm += table.at(c, k) * table.at(c, k);
    norm = std::sqrt(norm);
    if (norm < 1e-3) {
      const double s = norm > 0.0 ? 1e-3 / norm : 0.0;
      for (std::size_t k = 0; k < d; ++k) table.at(c, k) = s > 0.0 ? table.at(c, k) * s : (k == 0 ? 1e-3 : 0.0);
    }
  }
  params_.add(head_name(layer, "labels"), g, true, std::move(table));
}

void Heads::add_aux(int layer, std::mt19937_64& rng) {
  const ParamGroup g = aux_group(layer);
  const std::size_t d = dim(layer);
  params_.add(aux_name(layer, "w"), g, true, uniform({2 * d, num_classes_}, 0.1, rng));
  params_.add(aux_name(layer, "b"), g, true, Tensor({1, num_classes_}, 0.0));
}

bool Heads::has_contrastive(int layer) const { return params_.find(head_name(layer, "w_mu")) != nullptr; }
bool Heads::has_aux(int layer) const { return params_.find(aux_name(layer, "w")) != nullptr; }
Parameter& Heads::w_mu(int layer) { return params_.get(head_name(layer, "w_mu")); }
Parameter& Heads::labels(int layer) { return params_.get(head_name(layer, "labels")); }
Parameter& Heads::aux_w(int layer) { return params_.get(aux_name(layer, "w")); }
Parameter& Heads::aux_b(int layer) { return params_.get(aux_name(layer, "b")); }

Heads make_heads(const ModelConfig& mc, const VariantSpec& spec, std::uint64_t seed) {
  Heads heads({mc.d1, mc.d2, mc.agg_dim()}, mc.num_classes);
  std::mt19937_64 rng(mix_seed(seed, 0x4ead5));
  for (int layer : spec.contrastive_layers()) heads.add_contrastive(layer, rng);
  if (spec.uses_aux_heads()) {
    for (int layer = 1; layer <= 3; ++layer) heads.add_aux(layer, rng);
  }
  return heads;
}

// ---------------------------------------------------------------------------
// Losses

Var instance_repr(Var h0, Var s0, Var w_mu) {
  if (h0.cols() != s0.cols() || w_mu.rows() != 2 * h0.cols()) {
    throw ShapeError("instance_repr: incompatible shapes h0 " + shape_str(h0.shape()) + ", s0 " +
                     shape_str(s0.shape()) + ", W_mu " + shape_str(w_mu.shape()));
  }
  return ad::matmul(ad::concat({h0, s0}, 1), w_mu);
}

std::size_t hardest_negative_label(std::span<const double> sims, std::size_t true_label) {
  if (sims.size() < 2) throw ValidationError("hardest_negative_label: need at least 2 classes");
  std::size_t best = sims.size();
  for (std::size_t c = 0; c < sims.size(); ++c) {
    if (c == true_label) continue;
    if (best == sims.size() || sims[c] > sims[best]) best = c;
  }
  return best;
}

namespace {

void check_labels(Var mu, Var table, std::span<const std::size_t> labels) {
  if (mu.rows() != labels.size()) {
    throw ShapeError("contrastive loss: " + std::to_string(labels.size()) + " labels for mu of shape " +
                     shape_str(mu.shape()));
  }
  if (mu.cols() != table.cols()) {
    throw ShapeError("contrastive loss: mu " + shape_str(mu.shape()) + " vs label table " + shape_str(table.shape()));
  }
  if (table.rows() < 2) throw ValidationError("contrastive loss: need at least 2 classes");
  for (std::size_t y : labels) {
    if (y >= table.rows()) throw ValidationError("contrastive loss: label " + std::to_string(y) + " out of range");
  }
}

bool single_class(std::span<const std::size_t> labels) {
  return std::all_of(labels.begin(), labels.end(), [&](std::size_t y) { return y == labels.front(); });
}

// -(1/|C|) sum_i gamma_{y_i} * (log num_i - log den_i) over active instances.
Var weighted_log_ratio(Tape& tape, Var num, Var den, std::span<const std::size_t> active,
                       std::span<const std::size_t> labels, const ClassWeights& gamma, std::size_t num_classes) {
  if (gamma.gamma.size() != num_classes) {
    throw ValidationError("contrastive loss: " + std::to_string(gamma.gamma.size()) + " class weights for " +
                          std::to_string(num_classes) + " classes");
  }
  Tensor w({1, active.size()});
  for (std::size_t k = 0; k < active.size(); ++k) {
    w[k] = gamma.gamma[labels[active[k]]] / static_cast<double>(num_classes);
  }
  Var diff = ad::sub(ad::log(den), ad::log(num));
  return ad::sum(ad::mul(diff, tape.constant(std::move(w))));
}

}  // namespace

ContrastiveParts contrastive_parts(Var mu, Var table, std::span<const std::size_t> labels, double tau,
                                   NegativeMode mode) {
  check_labels(mu, table, labels);
  if (!(tau > 0.0)) throw ValidationError("contrastive loss: tau must be > 0");
  Tape& tape = *mu.tape();
  const std::size_t n = labels.size(), classes = table.rows();

  ContrastiveParts parts;
  for (std::size_t i = 0; i < n; ++i) {
    const bool has_negative =
        std::any_of(labels.begin(), labels.end(), [&](std::size_t y) { return y != labels[i]; });
    if (has_negative) parts.active.push_back(i);
  }
  if (parts.active.empty()) throw ValidationError("contrastive_parts: batch contains a single class");

  // Label-centered view: rows are labels, columns instances.
  Var e_lcl = ad::exp(ad::scale(ad::cosine_similarity(table, mu), 1.0 / tau));
  Tensor not_own({classes, n}, 0.0);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t x = 0; x < n; ++x) not_own.at(c, x) = labels[x] != c ? 1.0 : 0.0;
  Var neg_by_label = ad::sum_axis(ad::mul(e_lcl, tape.constant(std::move(not_own))), 1);  // classes x 1

  std::vector<std::size_t> pos_ids, label_ids;
  for (std::size_t i : parts.active) {
    pos_ids.push_back(labels[i] * n + i);
    label_ids.push_back(labels[i]);
  }
  parts.pos_lcl = ad::gather(e_lcl, pos_ids);
  parts.neg_lcl = ad::gather(neg_by_label, label_ids);

  // Instance-centered view: rows are instances, columns labels.
  Var sim_icl = ad::cosine_similarity(mu, table);
  Var e_icl = ad::exp(ad::scale(sim_icl, 1.0 / tau));
  std::vector<std::size_t> own_ids;
  for (std::size_t i : parts.active) own_ids.push_back(i * classes + labels[i]);
  parts.pos_icl = ad::gather(e_icl, own_ids);

  if (mode == NegativeMode::kHardest) {
    Tensor exclude({n, classes}, 0.0);
    for (std::size_t i = 0; i < n; ++i) exclude.at(i, labels[i]) = -1e6;
    Var best = ad::max_axis(ad::add(sim_icl, tape.constant(std::move(exclude))), 1);  // n x 1
    parts.neg_icl = ad::gather(ad::exp(ad::scale(best, 1.0 / tau)), parts.active);
    const Tensor& s = sim_icl.value();
    for (std::size_t i : parts.active) {
      parts.hardest.push_back(
          hardest_negative_label(std::span<const double>(s.values().data() + i * classes, classes), labels[i]));
    }
  } else {
    Tensor other({n, classes}, 1.0);
    for (std::size_t i = 0; i < n; ++i) other.at(i, labels[i]) = 0.0;
    Var all = ad::sum_axis(ad::mul(ad::exp(sim_icl), tape.constant(std::move(other))), 1);  // n x 1
    parts.neg_icl = ad::gather(all, parts.active);
  }
  return parts;
}

ContrastiveLoss loss_lcl(Var mu, Var table, std::span<const std::size_t> labels, const ClassWeights& gamma,
                         double tau) {
  check_labels(mu, table, labels);
  Tape& tape = *mu.tape();
  if (single_class(labels)) return {tape.constant(Tensor::scalar(0.0)), labels.size()};
  ContrastiveParts parts = contrastive_parts(mu, table, labels, tau, NegativeMode::kHardest);
  Var loss = weighted_log_ratio(tape, parts.pos_lcl, parts.neg_lcl, parts.active, labels, gamma, table.rows());
  return {loss, labels.size() - parts.active.size()};
}

ContrastiveLoss loss_licl(Var mu, Var table, std::span<const std::size_t> labels, const ClassWeights& gamma,
                          double tau, NegativeMode mode) {
  check_labels(mu, table, labels);
  Tape& tape = *mu.tape();
  if (single_class(labels)) return {tape.constant(Tensor::scalar(0.0)), labels.size()};
  ContrastiveParts parts = contrastive_parts(mu, table, labels, tau, mode);
  Var num = ad::scale(ad::add(parts.pos_lcl, parts.pos_icl), 0.5);
  Var den = ad::add(parts.neg_lcl, parts.neg_icl);
  Var loss = weighted_log_ratio(tape, num, den, parts.active, labels, gamma, table.rows());
  return {loss, labels.size() - parts.active.size()};
}

ContrastiveLoss contrastive_loss(ClFlavor flavor, Var mu, Var table, std::span<const std::size_t> labels,
                                 const ClassWeights& gamma, const CLConfig& cfg) {
  return flavor == ClFlavor::kLcl ? loss_lcl(mu, table, labels, gamma, cfg.tau)
                                  : loss_licl(mu, table, labels, gamma, cfg.tau, cfg.negatives);
}

CmclLoss loss_cmcl(std::span<const Var> layer_losses, double eta, bool detach_lower) {
  if (layer_losses.size() < 2) throw ValidationError("loss_cmcl: need at least two layer losses");
  CmclLoss out;
  for (std::size_t k = 0; k + 1 < layer_losses.size(); ++k) {
    Var lower = detach_lower ? ad::detach(layer_losses[k]) : layer_losses[k];
    out.hinges.push_back(ad::hinge(ad::add_scalar(ad::sub(layer_losses[k + 1], lower), -eta)));
  }
  out.total = out.hinges[0];
  for (std::size_t k = 1; k < out.hinges.size(); ++k) out.total = ad::add(out.total, out.hinges[k]);
  return out;
}

CrossEntropy cross_entropy(Var probs, std::span<const std::size_t> labels) {
  if (probs.rows() != labels.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for probs " +
                     shape_str(probs.shape()));
  }
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= probs.cols()) throw ValidationError("cross_entropy: label out of range");
    ids.push_back(i * probs.cols() + labels[i]);
  }
  Var picked = ad::gather(probs, ids);
  CrossEntropy out;
  for (double p : picked.value().values()) {
    if (p < 1e-300) ++out.clamped;
  }
  out.loss = ad::scale(ad::sum(ad::log(ad::clamp_min(picked, 1e-300))), -1.0 / static_cast<double>(labels.size()));
  return out;
}

Var aux_probs(Var h0, Var s0, Var w, Var b) {
  return ad::softmax(ad::add(ad::matmul(ad::concat({h0, s0}, 1), w), b), 1);
}

GroupMask hinge_route(int lower_layer) {
  switch (lower_layer) {
    case 1: return groups(ParamGroup::kFusion, ParamGroup::kHead2);
    case 2: return groups(ParamGroup::kAggregation, ParamGroup::kHead3);
  }
  throw ValidationError("hinge_route: no hinge above layer " + std::to_string(lower_layer));
}

JointLoss joint_loss(Tape& tape, const BatchOutputs& batch, Heads& heads, const CLConfig& cfg,
                     const VariantSpec& spec, const ClassWeights& gamma) {
  cfg.validate();
  const std::size_t n = batch.per_instance.size();
  if (n == 0 || batch.labels.size() != n) throw ValidationError("joint_loss: empty batch or label count mismatch");
  std::span<const std::size_t> labels(batch.labels);

  auto stack = [&](auto&& pick) {
    std::vector<Var> rows;
    rows.reserve(n);
    for (const auto& fr : batch.per_instance) rows.push_back(pick(fr));
    return rows.size() == 1 ? rows[0] : ad::concat(std::span<const Var>(rows), 0);
  };
  auto layer_rows = [&](int layer) {
    std::vector<Var> h, s;
    for (const auto& fr : batch.per_instance) {
      DuPair p = fr.reprs.pair(layer);
      h.push_back(p.h0);
      s.push_back(p.s0);
    }
    return DuPair{n == 1 ? h[0] : ad::concat(std::span<const Var>(h), 0),
                  n == 1 ? s[0] : ad::concat(std::span<const Var>(s), 0)};
  };

  JointLoss out;
  LossBreakdown& bd = out.breakdown;
  CrossEntropy ce = cross_entropy(stack([](const ForwardResult& fr) { return fr.probs; }), labels);
  bd.ce = ce.loss.item();
  bd.clamped = ce.clamped;
  Var total = ce.loss;

  std::array<Var, 3> cl{};
  const ClFlavor flavor = spec.variant == Variant::kCmclLcl ? ClFlavor::kLcl : cfg.flavor;
  for (int layer : spec.contrastive_layers()) {
    if (!heads.has_contrastive(layer)) {
      throw ValidationError("joint_loss: variant " + std::string(to_string(spec.variant)) +
                            " needs a contrastive head for layer " + std::to_string(layer));
    }
    DuPair rows = layer_rows(layer);
    Var mu = instance_repr(rows.h0, rows.s0, tape.param(heads.w_mu(layer)));
    ContrastiveLoss l = contrastive_loss(flavor, mu, tape.param(heads.labels(layer)), labels, gamma, cfg);
    cl[layer - 1] = l.loss;
    bd.cl[layer - 1] = l.loss.item();
    bd.skipped += l.skipped;
  }

  switch (spec.variant) {
    case Variant::kBaseline:
      break;
    case Variant::kLicl1:
    case Variant::kLicl2:
    case Variant::kLicl3:
    case Variant::kLicl123:
      for (int layer : spec.contrastive_layers()) {
        total = ad::add(total, ad::scale(cl[layer - 1], spec.layer_lambda[layer - 1]));
      }
      break;
    case Variant::kCe123:
      for (int layer = 1; layer <= 3; ++layer) {
        if (!heads.has_aux(layer)) {
          throw ValidationError("joint_loss: variant b_ce_123 needs an auxiliary head for layer " +
                                std::to_string(layer));
        }
        DuPair rows = layer_rows(layer);
        CrossEntropy aux =
            cross_entropy(aux_probs(rows.h0, rows.s0, tape.param(heads.aux_w(layer)), tape.param(heads.aux_b(layer))),
                          labels);
        bd.aux_ce[layer - 1] = aux.loss.item();
        bd.clamped += aux.clamped;
        total = ad::add(total, aux.loss);
      }
      break;
    case Variant::kCmclLcl:
    case Variant::kCmclLicl: {
      CmclLoss plain = loss_cmcl(cl, cfg.eta, false);
      CmclLoss routed = loss_cmcl(cl, cfg.eta, true);
      bd.hinge12 = plain.hinges[0].item();
      bd.hinge23 = plain.hinges[1].item();
      Var anchored = ad::add(ce.loss, ad::scale(cl[0], spec.layer_lambda[0]));
      total = ad::add(anchored, plain.total);
      out.routed.push_back({anchored, kAllGroups});
      out.routed.push_back({routed.hinges[0], hinge_route(1)});
      out.routed.push_back({routed.hinges[1], hinge_route(2)});
      break;
    }
  }
  if (out.routed.empty()) out.routed.push_back({total, kAllGroups});
  out.total = total;
  bd.total = total.item();
  return out;
}

}  // namespace cmcl
