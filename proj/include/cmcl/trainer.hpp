#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcl/corpus.hpp"
#include "cmcl/losses.hpp"
#include "cmcl/metrics.hpp"
#include "cmcl/model.hpp"

namespace cmcl {

struct TrainConfig {
  ModelConfig model;
  GeneratorConfig data;
  CLConfig cl;
  Variant variant = Variant::kCmclLicl;
  double lr = 0.001;
  std::size_t epochs = 50;
  std::size_t batch_size = 24;
  std::uint64_t seed = 999;
  // Global gradient-norm clipping; 0 disables it.
  double clip_norm = 0.0;

  VariantSpec spec() const { return VariantSpec::with_lambda(variant, cl.lambda); }
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Missing keys keep their current values, so a partial file overrides defaults.
void from_json(const nlohmann::json& j, TrainConfig& c);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // One update of every trainable parameter in `store` from its .grad.
  void step(ParamStore& store);
  // Call once per optimisation step, before step() on each store.
  void tick() { ++t_; }
  std::uint64_t steps() const { return t_; }
  double lr() const { return lr_; }

  nlohmann::json state() const;
  void load_state(const nlohmann::json& j);

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;  // mean batch total
  double dev_accuracy = 0.0;
  double dev_macro_f1 = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct StepRecord {
  std::size_t step = 0;
  LossBreakdown losses;
};

struct Evaluation {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
};

std::vector<std::size_t> predict_labels(Model& model, const Split& split);
ConfusionMatrix confusion(Model& model, const Split& split);
Evaluation evaluate(Model& model, const Split& split);

class Trainer {
 public:
  Trainer(const TrainConfig& config, const Corpus& corpus);

  const TrainConfig& config() const { return config_; }
  Model& model() { return model_; }
  Heads& heads() { return heads_; }
  const ClassWeights& gamma() const { return gamma_; }
  Adam& optimizer() { return adam_; }

  // Forward + routed backward on the given training instances. Parameter
  // gradients are zeroed first and hold the summed routed gradient afterwards.
  LossBreakdown compute_gradients(std::span<const std::size_t> batch);
  LossBreakdown train_step(std::span<const std::size_t> batch);
  EpochRecord train_epoch();

  // Trains up to config().epochs, keeping the parameters of the epoch with
  // the best dev macro-F1 (earliest epoch on ties). When `out_dir` is set,
  // metrics.csv, losses.csv, last.json and best.json are written there.
  void fit(const std::optional<std::filesystem::path>& out_dir = std::nullopt);

  std::size_t epochs_done() const { return history_.size(); }
  const std::vector<EpochRecord>& history() const { return history_; }
  const std::vector<StepRecord>& steps() const { return steps_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_dev_f1() const { return best_f1_; }
  // Copies the best-epoch parameters into the live model.
  void restore_best();

  nlohmann::json checkpoint() const;
  // Restores parameters, optimizer state and history written by checkpoint().
  void resume(const nlohmann::json& ckpt);

  std::size_t trainable_parameters() const;
  std::size_t inference_parameters() const;

 private:
  TrainConfig config_;
  const Corpus& corpus_;
  Model model_;
  Heads heads_;
  ClassWeights gamma_;
  Adam adam_;
  std::vector<EpochRecord> history_;
  std::vector<StepRecord> steps_;
  std::size_t best_epoch_ = 0;
  double best_f1_ = -1.0;
  std::optional<ParamStore> best_model_;
};

std::string metrics_csv(std::span<const EpochRecord> history);
std::string losses_csv(std::span<const StepRecord> steps);

struct SweepRow {
  double lambda = 0.0;
  double dev_accuracy = 0.0;
  double dev_macro_f1 = 0.0;
};

// lambda = k * step for k = 1..count, computed from the integer k.
std::vector<SweepRow> lambda_sweep(const TrainConfig& base, const Corpus& corpus, std::size_t count = 10,
                                   double step = 0.1);
std::string sweep_csv(std::span<const SweepRow> rows);

struct AblationRow {
  Variant variant = Variant::kBaseline;
  Evaluation dev;
  Evaluation test;
  std::size_t trainable_parameters = 0;
  std::size_t inference_parameters = 0;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
};

std::vector<AblationRow> run_ablation(const TrainConfig& base, const Corpus& corpus,
                                      std::span<const Variant> variants);
nlohmann::json ablation_json(std::span<const AblationRow> rows);
std::string ablation_csv(std::span<const AblationRow> rows);

}  // namespace cmcl
