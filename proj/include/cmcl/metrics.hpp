#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcl/instance.hpp"

namespace cmcl {

class Model;

// Rows are gold labels, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);
  static ConfusionMatrix from_predictions(std::span<const std::size_t> gold, std::span<const std::size_t> predicted,
                                          std::size_t num_classes);

  void add(std::size_t gold, std::size_t predicted, std::size_t count = 1);
  std::size_t at(std::size_t gold, std::size_t predicted) const { return counts_[gold * n_ + predicted]; }
  std::size_t num_classes() const { return n_; }
  std::size_t total() const { return total_; }

 private:
  std::size_t n_;
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
};

double accuracy(const ConfusionMatrix& m);
// Classes with no gold and no predicted instances count as F1 = 0 and stay in the mean.
double macro_f1(const ConfusionMatrix& m);
std::vector<double> per_class_f1(const ConfusionMatrix& m);
// Binary F1 with `positive` against all other classes merged.
double one_vs_all_f1(const ConfusionMatrix& m, std::size_t positive);

// {"accuracy":..., "macro_f1":..., "per_class_f1": {"0":..., ...}}
nlohmann::json metrics_report(const ConfusionMatrix& m);

// Principal axes of a point set. Each component is a unit vector whose
// largest-magnitude entry is positive.
struct Pca {
  std::vector<double> mean;
  std::vector<std::vector<double>> components;
  std::vector<double> variances;

  std::vector<double> project(std::span<const double> x) const;
};

Pca fit_pca(const std::vector<std::vector<double>>& points, std::size_t k = 2);

struct Silhouette {
  double score = 0.0;
  // Points whose a and b distances were both zero (identical representations).
  std::size_t degenerate = 0;
};

// Mean silhouette coefficient with cosine distance 1 - cos(u, v).
// Throws ValidationError when fewer than two classes are present.
Silhouette silhouette_cosine(const std::vector<std::vector<double>>& points, std::span<const std::size_t> labels);

struct ReprRow {
  std::int64_t id = 0;
  std::size_t label = 0;
  std::vector<double> vec;  // [s0, h0]
  std::optional<std::array<double, 2>> pca;
};

struct ReprDump {
  int layer = 0;
  std::vector<ReprRow> rows;

  std::vector<std::vector<double>> vectors() const;
  std::vector<std::size_t> labels() const;
};

// Pair representation of every instance at one layer (1, 2 or 3).
ReprDump collect_representations(Model& model, const Split& split, int layer);
void add_pca_columns(ReprDump& dump);
// Header row: id,label,layer,v0..v{n-1}[,pca0,pca1]
std::string repr_csv(const ReprDump& dump);
// One CSV per layer, named reprs_layer<k>.csv; returns the written paths.
std::vector<std::filesystem::path> export_representations(Model& model, const Split& split, std::span<const int> layers,
                                                          const std::filesystem::path& dir, bool with_pca = true);

}  // namespace cmcl
