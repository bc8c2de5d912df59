#include "cmcl/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>

#include "cmcl/corpus.hpp"
#include "cmcl/error.hpp"
#include "cmcl/losses.hpp"
#include "cmcl/model.hpp"

namespace cmcl {

namespace {

struct Fixture {
  ModelConfig mc;
  CLConfig cl;
  std::unique_ptr<Model> model;
  std::unique_ptr<Heads> heads;
  Split batch;
  std::vector<std::size_t> labels;
  ClassWeights gamma;
  std::uint64_t attempts = 1;
  double min_mu_norm = 0.0;

  std::vector<Parameter*> all_params() {
    std::vector<Parameter*> out;
    for (auto& p : model->params()) out.push_back(&p);
    for (auto& p : heads->params()) out.push_back(&p);
    return out;
  }
};

std::unique_ptr<Fixture> draw_fixture(std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x9c));
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  auto f = std::make_unique<Fixture>();
  ModelConfig& mc = f->mc;
  mc.heads = 2;
  mc.d2 = 2 * pick(2, 3);
  mc.d1 = mc.d2 + 2 * pick(0, 2);
  mc.d3 = pick(2, 3);
  mc.max_ngram = pick(1, 3);
  mc.ff_dim = pick(4, 8);
  mc.num_classes = pick(2, 5);
  mc.vocab = 24;
  const std::size_t max_du = mc.max_ngram + 4;
  mc.max_len = 2 * max_du + 2;
  mc.validate();

  f->cl.tau = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
  f->model = std::make_unique<Model>(mc, mix_seed(seed, 1));
  f->heads = std::make_unique<Heads>(make_heads(mc, VariantSpec{Variant::kCmclLicl, {0.4, 0.4, 0.4}}, mix_seed(seed, 2)));
  // Random biases too, so that ReLU and max-over-time outputs are not all zero.
  std::uniform_real_distribution<double> weight(-0.3, 0.3);
  for (Parameter* p : f->all_params()) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = weight(rng);
  }

  const std::size_t n = pick(3, 6);
  for (std::size_t i = 0; i < n; ++i) {
    Instance inst;
    inst.id = static_cast<std::int64_t>(i);
    inst.label = i < 2 ? i : pick(0, mc.num_classes - 1);
    inst.du1.resize(pick(mc.max_ngram + 1, max_du));
    inst.du2.resize(pick(mc.max_ngram + 1, max_du));
    for (auto& t : inst.du1) t = pick(kFirstContentToken, mc.vocab - 1);
    for (auto& t : inst.du2) t = pick(kFirstContentToken, mc.vocab - 1);
    f->labels.push_back(inst.label);
    f->batch.push_back(std::move(inst));
  }
  std::vector<std::size_t> counts(mc.num_classes);
  for (auto& c : counts) c = pick(1, 20);
  f->gamma = class_weights(counts);
  return f;
}

struct BatchForward {
  BatchOutputs outputs;
  std::array<DuPair, 3> rows;
};

BatchForward forward_batch(Tape& tape, Fixture& f) {
  BatchForward bf;
  for (const auto& inst : f.batch) bf.outputs.per_instance.push_back(f.model->forward(tape, inst));
  bf.outputs.labels = f.labels;
  for (int layer = 1; layer <= 3; ++layer) {
    std::vector<Var> h, s;
    for (const auto& fr : bf.outputs.per_instance) {
      DuPair p = fr.reprs.pair(layer);
      h.push_back(p.h0);
      s.push_back(p.s0);
    }
    bf.rows[layer - 1] = {ad::concat(std::span<const Var>(h), 0), ad::concat(std::span<const Var>(s), 0)};
  }
  return bf;
}

Var layer_mu(Tape& tape, Fixture& f, const BatchForward& bf, int layer) {
  const DuPair& r = bf.rows[layer - 1];
  return instance_repr(r.h0, r.s0, tape.param(f.heads->w_mu(layer)));
}

std::array<Var, 3> layer_losses(Tape& tape, Fixture& f, const BatchForward& bf, ClFlavor flavor, NegativeMode mode) {
  std::array<Var, 3> out;
  for (int layer = 1; layer <= 3; ++layer) {
    Var mu = layer_mu(tape, f, bf, layer);
    Var table = tape.param(f.heads->labels(layer));
    out[layer - 1] = flavor == ClFlavor::kLcl ? loss_lcl(mu, table, f.labels, f.gamma, f.cl.tau).loss
                                              : loss_licl(mu, table, f.labels, f.gamma, f.cl.tau, mode).loss;
  }
  return out;
}

// Smallest row norm of mu over the three layers. Cosine similarity has
// curvature ~1/|mu|^2, so near-zero rows make finite differences unreliable.
double min_mu_norm(Fixture& f) {
  Tape tape;
  BatchForward bf = forward_batch(tape, f);
  double out = std::numeric_limits<double>::infinity();
  for (int layer = 1; layer <= 3; ++layer) {
    const Tensor& mu = layer_mu(tape, f, bf, layer).value();
    for (std::size_t r = 0; r < mu.rows(); ++r) {
      double sq = 0.0;
      for (std::size_t c = 0; c < mu.cols(); ++c) sq += mu.at(r, c) * mu.at(r, c);
      out = std::min(out, std::sqrt(sq));
    }
  }
  return out;
}

constexpr double kMinMuNorm = 0.05;

// Redraws until every mu row is away from the origin.
std::unique_ptr<Fixture> make_fixture(std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    auto f = draw_fixture(attempt == 0 ? seed : mix_seed(seed, 1000 + attempt));
    f->attempts = attempt + 1;
    f->min_mu_norm = min_mu_norm(*f);
    if (f->min_mu_norm >= kMinMuNorm || attempt == 49) return f;
  }
}

Var sum3(const std::array<Var, 3>& v) { return ad::add(ad::add(v[0], v[1]), v[2]); }

// eta that keeps every hinge active by at least 0.05.
double active_eta(Fixture& f) {
  Tape tape;
  BatchForward bf = forward_batch(tape, f);
  auto l = layer_losses(tape, f, bf, ClFlavor::kLicl, NegativeMode::kHardest);
  const double d12 = l[1].item() - l[0].item();
  const double d23 = l[2].item() - l[1].item();
  return std::min(d12, d23) - 0.05;
}

}  // namespace

GradSuiteResult gradient_suite(std::uint64_t seed, const GradCheckOptions& opts) {
  auto f = make_fixture(seed);
  Fixture& fx = *f;
  const double eta = active_eta(fx);

  GradSuiteResult result;
  result.seed = seed;
  result.config = {{"model", fx.mc}, {"tau", fx.cl.tau}, {"batch", fx.batch.size()}, {"eta", eta},
                   {"gamma", fx.gamma.gamma},
                   {"attempts", fx.attempts}, {"min_mu_norm", fx.min_mu_norm}};

  std::vector<std::pair<std::string, LossFn>> terms;
  terms.emplace_back("ce", [&](Tape& t) {
    BatchForward bf = forward_batch(t, fx);
    std::vector<Var> probs;
    for (const auto& fr : bf.outputs.per_instance) probs.push_back(fr.probs);
    return cross_entropy(ad::concat(std::span<const Var>(probs), 0), fx.labels).loss;
  });
  terms.emplace_back("lcl", [&](Tape& t) {
    BatchForward bf = forward_batch(t, fx);
    return sum3(layer_losses(t, fx, bf, ClFlavor::kLcl, NegativeMode::kHardest));
  });
  terms.emplace_back("licl_hardest", [&](Tape& t) {
    BatchForward bf = forward_batch(t, fx);
    return sum3(layer_losses(t, fx, bf, ClFlavor::kLicl, NegativeMode::kHardest));
  });
  terms.emplace_back("licl_all", [&](Tape& t) {
    BatchForward bf = forward_batch(t, fx);
    return sum3(layer_losses(t, fx, bf, ClFlavor::kLicl, NegativeMode::kAll));
  });
  terms.emplace_back("cmcl", [&](Tape& t) {
    BatchForward bf = forward_batch(t, fx);
    auto l = layer_losses(t, fx, bf, ClFlavor::kLicl, NegativeMode::kHardest);
    return loss_cmcl(l, eta).total;
  });
  terms.emplace_back("objective", [&](Tape& t) {
    BatchForward bf = forward_batch(t, fx);
    CLConfig cfg = fx.cl;
    cfg.eta = 0.0;
    return joint_loss(t, bf.outputs, *fx.heads, cfg, VariantSpec{Variant::kCmclLicl, {0.4, 0.4, 0.4}}, fx.gamma)
        .total;
  });

  const auto params = fx.all_params();
  result.pass = true;
  for (auto& [name, fn] : terms) {
    GradCheckOptions o = opts;
    o.seed = mix_seed(opts.seed ^ seed, result.terms.size());
    GradReport r = grad_check(fn, params, o);
    result.pass = result.pass && r.pass;
    result.max_rel_error = std::max(result.max_rel_error, r.max_rel_error);
    result.terms.push_back({name, std::move(r)});
  }
  return result;
}

nlohmann::json to_json(const GradSuiteResult& r) {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& t : r.terms) {
    terms.push_back({{"term", t.term}, {"report", to_json(t.report)}});
  }
  return {{"seed", r.seed}, {"pass", r.pass}, {"max_rel_error", r.max_rel_error}, {"config", r.config},
          {"terms", terms}};
}

std::vector<RoutingCheck> routing_audit(std::uint64_t seed, const GradCheckOptions& opts) {
  auto f = make_fixture(seed);
  Fixture& fx = *f;
  const double eta = active_eta(fx);
  const auto params = fx.all_params();
  std::vector<RoutingCheck> out;

  for (int lower = 1; lower <= 2; ++lower) {
    auto hinge_of = [&](Tape& t, bool detach) {
      BatchForward bf = forward_batch(t, fx);
      auto l = layer_losses(t, fx, bf, ClFlavor::kLicl, NegativeMode::kHardest);
      return loss_cmcl(l, eta, detach).hinges[static_cast<std::size_t>(lower - 1)];
    };

    RoutingCheck rc;
    rc.lower_layer = lower;
    const GroupMask route = hinge_route(lower);
    for (Parameter* p : params) p->grad = Tensor(p->value.shape(), 0.0);
    Tape tape;
    Var h = hinge_of(tape, true);
    rc.hinge_value = h.item();
    const std::uint64_t base_signature = tape.branch_signature();
    tape.backward(h, route);
    tape.accumulate_param_grads(route);

    std::mt19937_64 rng(mix_seed(opts.seed ^ seed, static_cast<std::uint64_t>(lower)));
    for (Parameter* p : params) {
      const bool inside = p->trainable && (group_bit(p->group) & route) != 0;
      if (!inside) {
        for (double g : p->grad.values()) rc.max_abs_outside = std::max(rc.max_abs_outside, std::abs(g));
        rc.outside_elements += p->grad.size();
        continue;
      }
      std::vector<std::size_t> elements(p->value.size());
      std::iota(elements.begin(), elements.end(), std::size_t{0});
      if (elements.size() > opts.max_elements) {
        std::shuffle(elements.begin(), elements.end(), rng);
        elements.resize(opts.max_elements);
      }
      for (std::size_t e : elements) {
        auto eval = [&] {
          Tape t;
          Var v = hinge_of(t, false);
          return Probe{v.item(), t.branch_signature()};
        };
        const auto numeric = numeric_derivative(eval, p->value[e], base_signature, opts.step);
        if (!numeric) {
          ++rc.inside_skipped;
          continue;
        }
        rc.max_rel_inside = std::max(rc.max_rel_inside, relative_error(p->grad[e], *numeric));
        ++rc.inside_checked;
      }
    }
    rc.pass = rc.max_abs_outside == 0.0 && rc.max_rel_inside < opts.tolerance && rc.inside_checked > 0;
    out.push_back(rc);
  }
  for (Parameter* p : params) p->grad = Tensor(p->value.shape(), 0.0);
  return out;
}

nlohmann::json to_json(const RoutingCheck& r) {
  return {{"lower_layer", r.lower_layer},       {"hinge_value", r.hinge_value},
          {"max_abs_outside", r.max_abs_outside}, {"outside_elements", r.outside_elements},
          {"max_rel_inside", r.max_rel_inside},   {"inside_checked", r.inside_checked},
          {"inside_skipped", r.inside_skipped},   {"pass", r.pass}};
}

}  // namespace cmcl
