#include "cmcl/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "cmcl/checkpoint.hpp"
#include "cmcl/error.hpp"

namespace cmcl {

namespace {

std::string_view flavor_name(ClFlavor f) { return f == ClFlavor::kLcl ? "lcl" : "licl"; }

ClFlavor parse_flavor(std::string_view s) {
  if (s == "lcl") return ClFlavor::kLcl;
  if (s == "licl") return ClFlavor::kLicl;
  throw ValidationError("unknown contrastive flavor '" + std::string(s) + "' (expected lcl or licl)");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write " + path.string());
  f << text;
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  data.validate(model.max_ngram);
  cl.validate();
  auto fail = [](const std::string& m) { throw ValidationError("TrainConfig: " + m); };
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
  if (epochs == 0) fail("epochs must be at least 1");
  if (batch_size < 2) fail("batch_size must be at least 2");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be non-negative");
  if (data.num_classes != model.num_classes) fail("data.num_classes and model.num_classes differ");
  if (data.vocab > model.vocab) fail("data.vocab exceeds model.vocab");
  if (2 * data.max_du_len + 2 > model.max_len) {
    fail("model.max_len must be at least 2 * data.max_du_len + 2 = " + std::to_string(2 * data.max_du_len + 2));
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", c.model},
       {"data", c.data},
       {"cl",
        {{"tau", c.cl.tau},
         {"eta", c.cl.eta},
         {"lambda", c.cl.lambda},
         {"flavor", flavor_name(c.cl.flavor)},
         {"negatives", to_string(c.cl.negatives)}}},
       {"variant", to_string(c.variant)},
       {"lr", c.lr},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ValidationError("config: expected a JSON object");
  static const char* known[] = {"model", "data", "cl", "variant", "lr", "epochs", "batch_size", "seed", "clip_norm"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ValidationError("config: unknown key '" + key + "'");
    }
  }
  try {
    if (j.contains("model")) {
      nlohmann::json merged = c.model;
      merged.update(j.at("model"));
      c.model = merged.get<ModelConfig>();
    }
    if (j.contains("data")) {
      nlohmann::json merged = c.data;
      merged.update(j.at("data"));
      c.data = merged.get<GeneratorConfig>();
    }
    if (j.contains("cl")) {
      const auto& cl = j.at("cl");
      c.cl.tau = cl.value("tau", c.cl.tau);
      c.cl.eta = cl.value("eta", c.cl.eta);
      c.cl.lambda = cl.value("lambda", c.cl.lambda);
      if (cl.contains("flavor")) c.cl.flavor = parse_flavor(cl.at("flavor").get<std::string>());
      if (cl.contains("negatives")) c.cl.negatives = parse_negative_mode(cl.at("negatives").get<std::string>());
    }
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: bad value (") + e.what() + ")");
  }
}

// ---------------------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr > 0.0)) throw ValidationError("Adam: lr must be positive");
}

void Adam::step(ParamStore& store) {
  if (t_ == 0) throw Error("Adam::step: call tick() first");
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& p : store) {
    if (!p.trainable) continue;
    auto& mo = moments_[p.name];
    const std::size_t n = p.value.size();
    if (mo.m.empty()) {
      mo.m.assign(n, 0.0);
      mo.v.assign(n, 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double g = p.grad[i];
      mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * g;
      mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * g * g;
      const double mhat = mo.m[i] / c1;
      const double vhat = mo.v[i] / c2;
      p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

nlohmann::json Adam::state() const {
  nlohmann::json moments = nlohmann::json::object();
  for (const auto& [name, mo] : moments_) moments[name] = {{"m", mo.m}, {"v", mo.v}};
  return {{"t", t_}, {"lr", lr_}, {"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_}, {"moments", moments}};
}

void Adam::load_state(const nlohmann::json& j) {
  try {
    t_ = j.at("t").get<std::uint64_t>();
    lr_ = j.at("lr").get<double>();
    beta1_ = j.at("beta1").get<double>();
    beta2_ = j.at("beta2").get<double>();
    eps_ = j.at("eps").get<double>();
    moments_.clear();
    for (const auto& [name, mo] : j.at("moments").items()) {
      moments_[name] = {mo.at("m").get<std::vector<double>>(), mo.at("v").get<std::vector<double>>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: bad optimizer state (") + e.what() + ")");
  }
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> predict_labels(Model& model, const Split& split) {
  std::vector<std::size_t> out;
  out.reserve(split.size());
  for (const auto& inst : split) {
    Tape tape;
    const auto probs = model.forward(tape, inst).probs.value().values();
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.size(); ++c) {
      if (probs[c] > probs[best]) best = c;
    }
    out.push_back(best);
  }
  return out;
}

ConfusionMatrix confusion(Model& model, const Split& split) {
  std::vector<std::size_t> gold;
  gold.reserve(split.size());
  for (const auto& inst : split) gold.push_back(inst.label);
  const auto pred = predict_labels(model, split);
  return ConfusionMatrix::from_predictions(gold, pred, model.config().num_classes);
}

Evaluation evaluate(Model& model, const Split& split) {
  const ConfusionMatrix m = confusion(model, split);
  return {accuracy(m), macro_f1(m), per_class_f1(m)};
}

// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& config, const Corpus& corpus)
    : config_((config.validate(), config)),
      corpus_(corpus),
      model_(config.model, mix_seed(config.seed, 1)),
      heads_(make_heads(config.model, config.spec(), mix_seed(config.seed, 2))),
      gamma_(class_weights(class_counts(corpus.train, config.model.num_classes))),
      adam_(config.lr) {
  if (corpus.train.size() < 2) throw ValidationError("Trainer: training split needs at least two instances");
  if (corpus.dev.empty()) throw ValidationError("Trainer: dev split is empty");
}

LossBreakdown Trainer::compute_gradients(std::span<const std::size_t> batch) {
  model_.params().zero_grad();
  heads_.params().zero_grad();
  Tape tape;
  BatchOutputs bo;
  for (std::size_t idx : batch) {
    const Instance& inst = corpus_.train.at(idx);
    bo.per_instance.push_back(model_.forward(tape, inst));
    bo.labels.push_back(inst.label);
  }
  JointLoss jl = joint_loss(tape, bo, heads_, config_.cl, config_.spec(), gamma_);
  for (std::size_t k = 0; k < jl.routed.size(); ++k) {
    const RoutedTerm& rt = jl.routed[k];
    if (!tape.requires_grad(rt.term.id())) continue;
    // An inactive hinge contributes nothing.
    if (k > 0 && rt.term.item() <= 0.0) continue;
    tape.zero_grad();
    tape.backward(rt.term, rt.mask);
    tape.accumulate_param_grads(rt.mask);
  }
  return jl.breakdown;
}

LossBreakdown Trainer::train_step(std::span<const std::size_t> batch) {
  LossBreakdown bd = compute_gradients(batch);
  if (!std::isfinite(bd.total)) throw NumericalError("training diverged: non-finite loss at step " +
                                                     std::to_string(adam_.steps() + 1));
  double sq = 0.0;
  for (ParamStore* store : {&model_.params(), &heads_.params()}) {
    for (const auto& p : *store) {
      if (!p.trainable) continue;
      for (double g : p.grad.values()) sq += g * g;
    }
  }
  if (!std::isfinite(sq)) {
    throw NumericalError("training diverged: non-finite gradient at step " + std::to_string(adam_.steps() + 1));
  }
  if (config_.clip_norm > 0.0 && std::sqrt(sq) > config_.clip_norm) {
    const double s = config_.clip_norm / std::sqrt(sq);
    for (ParamStore* store : {&model_.params(), &heads_.params()}) {
      for (auto& p : *store) {
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] *= s;
      }
    }
  }
  adam_.tick();
  adam_.step(model_.params());
  adam_.step(heads_.params());
  steps_.push_back({static_cast<std::size_t>(adam_.steps()), bd});
  return bd;
}

EpochRecord Trainer::train_epoch() {
  const std::size_t epoch = history_.size() + 1;
  const auto batches = make_batches(corpus_.train.size(), config_.batch_size, config_.seed, epoch);
  double loss_sum = 0.0;
  for (const auto& b : batches) loss_sum += train_step(b).total;
  const Evaluation dev = evaluate(model_, corpus_.dev);
  EpochRecord rec{epoch, loss_sum / static_cast<double>(batches.size()), dev.accuracy, dev.macro_f1};
  history_.push_back(rec);
  if (dev.macro_f1 > best_f1_) {
    best_f1_ = dev.macro_f1;
    best_epoch_ = epoch;
    best_model_ = model_.params();
  }
  return rec;
}

void Trainer::fit(const std::optional<std::filesystem::path>& out_dir) {
  if (out_dir) std::filesystem::create_directories(*out_dir);
  while (history_.size() < config_.epochs) {
    train_epoch();
    if (out_dir) {
      write_text(*out_dir / "metrics.csv", metrics_csv(history_));
      write_text(*out_dir / "losses.csv", losses_csv(steps_));
      write_json(checkpoint(), *out_dir / "last.json");
    }
  }
  restore_best();
  if (out_dir) {
    nlohmann::json best = {{"config", config_},
                           {"epoch", best_epoch_},
                           {"best_dev_f1", best_f1_},
                           {"model", params_to_json(model_.params())}};
    write_json(best, *out_dir / "best.json");
  }
}

void Trainer::restore_best() {
  if (!best_model_) return;
  for (std::size_t i = 0; i < model_.params().size(); ++i) model_.params()[i].value = (*best_model_)[i].value;
}

nlohmann::json Trainer::checkpoint() const {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : history_) {
    history.push_back({r.epoch, r.train_loss, r.dev_accuracy, r.dev_macro_f1});
  }
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : steps_) {
    const auto& l = s.losses;
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
    steps.push_back({s.step, l.ce, opt(l.cl[0]), opt(l.cl[1]), opt(l.cl[2]), opt(l.hinge12), opt(l.hinge23), l.total});
  }
  nlohmann::json j = {{"config", config_},
                      {"epoch", history_.size()},
                      {"model", params_to_json(model_.params())},
                      {"heads", params_to_json(heads_.params())},
                      {"adam", adam_.state()},
                      {"history", history},
                      {"steps", steps},
                      {"best_epoch", best_epoch_},
                      {"best_dev_f1", best_f1_}};
  j["best_model"] = best_model_ ? params_to_json(*best_model_) : nlohmann::json();
  return j;
}

void Trainer::resume(const nlohmann::json& ckpt) {
  try {
    const TrainConfig saved = ckpt.at("config").get<TrainConfig>();
    if (nlohmann::json(saved) != nlohmann::json(config_)) {
      throw ValidationError("resume: checkpoint was written with a different configuration");
    }
    params_from_json(ckpt.at("model"), model_.params());
    params_from_json(ckpt.at("heads"), heads_.params());
    adam_.load_state(ckpt.at("adam"));
    history_.clear();
    for (const auto& r : ckpt.at("history")) {
      history_.push_back({r.at(0).get<std::size_t>(), r.at(1).get<double>(), r.at(2).get<double>(),
                          r.at(3).get<double>()});
    }
    steps_.clear();
    for (const auto& s : ckpt.at("steps")) {
      StepRecord rec;
      rec.step = s.at(0).get<std::size_t>();
      auto opt = [](const nlohmann::json& v) { return v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()); };
      rec.losses.ce = s.at(1).get<double>();
      for (int k = 0; k < 3; ++k) rec.losses.cl[k] = opt(s.at(2 + k));
      rec.losses.hinge12 = opt(s.at(5));
      rec.losses.hinge23 = opt(s.at(6));
      rec.losses.total = s.at(7).get<double>();
      steps_.push_back(rec);
    }
    best_epoch_ = ckpt.at("best_epoch").get<std::size_t>();
    best_f1_ = ckpt.at("best_dev_f1").get<double>();
    if (ckpt.at("best_model").is_null()) {
      best_model_.reset();
    } else {
      best_model_ = model_.params();
      params_from_json(ckpt.at("best_model"), *best_model_);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("resume: malformed checkpoint (") + e.what() + ")");
  }
}

std::size_t Trainer::trainable_parameters() const {
  return model_.params().trainable_elements() + heads_.params().trainable_elements();
}

std::size_t Trainer::inference_parameters() const {
  return model_.params().trainable_elements(Model::kInferenceGroups);
}

// ---------------------------------------------------------------------------

std::string metrics_csv(std::span<const EpochRecord> history) {
  std::string out = "epoch,train_loss,dev_accuracy,dev_macro_f1\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + fmt(r.train_loss) + "," + fmt(r.dev_accuracy) + "," +
           fmt(r.dev_macro_f1) + "\n";
  }
  return out;
}

std::string losses_csv(std::span<const StepRecord> steps) {
  std::string out = "step,ce,licl1,licl2,licl3,hinge12,hinge23,total\n";
  for (const auto& s : steps) {
    const auto& l = s.losses;
    out += std::to_string(s.step) + "," + fmt(l.ce) + "," + fmt_opt(l.cl[0]) + "," + fmt_opt(l.cl[1]) + "," +
           fmt_opt(l.cl[2]) + "," + fmt_opt(l.hinge12) + "," + fmt_opt(l.hinge23) + "," + fmt(l.total) + "\n";
  }
  return out;
}

std::vector<SweepRow> lambda_sweep(const TrainConfig& base, const Corpus& corpus, std::size_t count, double step) {
  if (count == 0 || !(step > 0.0)) throw ValidationError("lambda_sweep: need count >= 1 and step > 0");
  std::vector<SweepRow> rows;
  for (std::size_t k = 1; k <= count; ++k) {
    TrainConfig cfg = base;
    cfg.cl.lambda = static_cast<double>(k) * step;
    Trainer t(cfg, corpus);
    t.fit();
    const Evaluation dev = evaluate(t.model(), corpus.dev);
    rows.push_back({cfg.cl.lambda, dev.accuracy, dev.macro_f1});
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = "lambda,dev_accuracy,dev_macro_f1\n";
  for (const auto& r : rows) out += fmt(r.lambda) + "," + fmt(r.dev_accuracy) + "," + fmt(r.dev_macro_f1) + "\n";
  return out;
}

std::vector<AblationRow> run_ablation(const TrainConfig& base, const Corpus& corpus,
                                      std::span<const Variant> variants) {
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    TrainConfig cfg = base;
    cfg.variant = v;
    const auto t0 = std::chrono::steady_clock::now();
    Trainer t(cfg, corpus);
    t.fit();
    AblationRow row;
    row.variant = v;
    row.dev = evaluate(t.model(), corpus.dev);
    row.test = evaluate(t.model(), corpus.test);
    row.trainable_parameters = t.trainable_parameters();
    row.inference_parameters = t.inference_parameters();
    row.best_epoch = t.best_epoch();
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "ablation: " << to_string(v) << " test macro-F1 " << row.test.macro_f1 << " (" << row.seconds
              << " s)\n";
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json ablation_json(std::span<const AblationRow> rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    auto eval = [](const Evaluation& e) {
      return nlohmann::json{{"accuracy", e.accuracy}, {"macro_f1", e.macro_f1}, {"per_class_f1", e.per_class_f1}};
    };
    out.push_back({{"variant", to_string(r.variant)},
                   {"dev", eval(r.dev)},
                   {"test", eval(r.test)},
                   {"trainable_parameters", r.trainable_parameters},
                   {"inference_parameters", r.inference_parameters},
                   {"best_epoch", r.best_epoch},
                   {"seconds", r.seconds}});
  }
  return out;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::string out =
      "variant,dev_accuracy,dev_macro_f1,test_accuracy,test_macro_f1,trainable_parameters,inference_parameters,"
      "best_epoch";
  const std::size_t classes = rows.empty() ? 0 : rows[0].test.per_class_f1.size();
  for (std::size_t c = 0; c < classes; ++c) out += ",test_f1_c" + std::to_string(c);
  out += "\n";
  for (const auto& r : rows) {
    out += std::string(to_string(r.variant)) + "," + fmt(r.dev.accuracy) + "," + fmt(r.dev.macro_f1) + "," +
           fmt(r.test.accuracy) + "," + fmt(r.test.macro_f1) + "," + std::to_string(r.trainable_parameters) + "," +
           std::to_string(r.inference_parameters) + "," + std::to_string(r.best_epoch);
    for (double f : r.test.per_class_f1) out += "," + fmt(f);
    out += "\n";
  }
  return out;
}

}  // namespace cmcl
