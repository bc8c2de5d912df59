#include "cmcl/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "cmcl/error.hpp"
#include "cmcl/model.hpp"

namespace cmcl {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : n_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw ValidationError("ConfusionMatrix: need at least one class");
}

ConfusionMatrix ConfusionMatrix::from_predictions(std::span<const std::size_t> gold,
                                                  std::span<const std::size_t> predicted, std::size_t num_classes) {
  if (gold.size() != predicted.size()) throw ValidationError("ConfusionMatrix: gold/prediction length mismatch");
  ConfusionMatrix m(num_classes);
  for (std::size_t i = 0; i < gold.size(); ++i) m.add(gold[i], predicted[i]);
  return m;
}

void ConfusionMatrix::add(std::size_t gold, std::size_t predicted, std::size_t count) {
  if (gold >= n_ || predicted >= n_) throw ValidationError("ConfusionMatrix: class id out of range");
  counts_[gold * n_ + predicted] += count;
  total_ += count;
}

namespace {

void require_nonempty(const ConfusionMatrix& m, const char* who) {
  if (m.total() == 0) throw ValidationError(std::string(who) + ": empty confusion matrix");
}

double binary_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace

double accuracy(const ConfusionMatrix& m) {
  require_nonempty(m, "accuracy");
  std::size_t diag = 0;
  for (std::size_t c = 0; c < m.num_classes(); ++c) diag += m.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(m.total());
}

double one_vs_all_f1(const ConfusionMatrix& m, std::size_t positive) {
  if (positive >= m.num_classes()) throw ValidationError("one_vs_all_f1: class id out of range");
  std::size_t tp = m.at(positive, positive), fp = 0, fn = 0;
  for (std::size_t k = 0; k < m.num_classes(); ++k) {
    if (k == positive) continue;
    fp += m.at(k, positive);
    fn += m.at(positive, k);
  }
  return binary_f1(tp, fp, fn);
}

std::vector<double> per_class_f1(const ConfusionMatrix& m) {
  std::vector<double> out;
  for (std::size_t c = 0; c < m.num_classes(); ++c) out.push_back(one_vs_all_f1(m, c));
  return out;
}

double macro_f1(const ConfusionMatrix& m) {
  require_nonempty(m, "macro_f1");
  const auto f1 = per_class_f1(m);
  double s = 0.0;
  for (double v : f1) s += v;
  return s / static_cast<double>(f1.size());
}

nlohmann::json metrics_report(const ConfusionMatrix& m) {
  nlohmann::json per = nlohmann::json::object();
  const auto f1 = per_class_f1(m);
  for (std::size_t c = 0; c < f1.size(); ++c) per[std::to_string(c)] = f1[c];
  return {{"accuracy", accuracy(m)}, {"macro_f1", macro_f1(m)}, {"per_class_f1", per}};
}

// ---------------------------------------------------------------------------

std::vector<double> Pca::project(std::span<const double> x) const {
  if (x.size() != mean.size()) throw ShapeError("Pca::project: dimension mismatch");
  std::vector<double> out;
  for (const auto& comp : components) {
    double s = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) s += (x[d] - mean[d]) * comp[d];
    out.push_back(s);
  }
  return out;
}

Pca fit_pca(const std::vector<std::vector<double>>& points, std::size_t k) {
  if (points.size() < 2) throw ValidationError("fit_pca: need at least two points");
  const std::size_t n = points.size(), dim = points[0].size();
  Eigen::MatrixXd x(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    if (points[i].size() != dim) throw ShapeError("fit_pca: ragged input");
    for (std::size_t d = 0; d < dim; ++d) x(i, d) = points[i][d];
  }
  Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericalError("fit_pca: eigen-decomposition failed");

  Pca pca;
  pca.mean.assign(mean.data(), mean.data() + dim);
  // Eigenvalues come back ascending.
  for (std::size_t j = 0; j < std::min(k, dim); ++j) {
    const Eigen::Index col = static_cast<Eigen::Index>(dim - 1 - j);
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    pca.components.emplace_back(v.data(), v.data() + dim);
    pca.variances.push_back(solver.eigenvalues()(col));
  }
  return pca;
}

Silhouette silhouette_cosine(const std::vector<std::vector<double>>& points, std::span<const std::size_t> labels) {
  if (points.size() != labels.size()) throw ValidationError("silhouette: point/label count mismatch");
  std::size_t num_classes = 0;
  for (std::size_t y : labels) num_classes = std::max(num_classes, y + 1);
  std::vector<std::size_t> class_size(num_classes, 0);
  for (std::size_t y : labels) ++class_size[y];
  const auto present = std::count_if(class_size.begin(), class_size.end(), [](std::size_t s) { return s > 0; });
  if (present < 2) throw ValidationError("silhouette: need at least two classes present");

  const std::size_t n = points.size();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : points[i]) s += v * v;
    norms[i] = std::sqrt(s);
  }
  auto distance = [&](std::size_t i, std::size_t j) {
    if (norms[i] == 0.0 || norms[j] == 0.0) return 0.0;
    double dot = 0.0;
    for (std::size_t d = 0; d < points[i].size(); ++d) dot += points[i][d] * points[j][d];
    return std::max(0.0, 1.0 - dot / (norms[i] * norms[j]));
  };

  Silhouette out;
  double total = 0.0;
  std::vector<double> sums(num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sums[labels[j]] += distance(i, j);
    }
    const std::size_t own = labels[i];
    if (class_size[own] < 2) continue;  // singleton cluster: s_i = 0
    const double a = sums[own] / static_cast<double>(class_size[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (c != own && class_size[c] > 0) b = std::min(b, sums[c] / static_cast<double>(class_size[c]));
    }
    const double denom = std::max(a, b);
    if (denom <= 0.0) {
      ++out.degenerate;
      continue;
    }
    total += (b - a) / denom;
  }
  if (out.degenerate > 0) {
    std::cerr << "warning: silhouette: " << out.degenerate << " points with zero intra- and inter-class distance\n";
  }
  out.score = total / static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<double>> ReprDump::vectors() const {
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.vec);
  return out;
}

std::vector<std::size_t> ReprDump::labels() const {
  std::vector<std::size_t> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.label);
  return out;
}

ReprDump collect_representations(Model& model, const Split& split, int layer) {
  if (layer < 1 || layer > 3) throw ValidationError("export: unknown layer id " + std::to_string(layer));
  ReprDump dump;
  dump.layer = layer;
  for (const auto& inst : split) {
    Tape tape;
    ForwardResult fr = model.forward(tape, inst);
    DuPair p = fr.reprs.pair(layer);
    ReprRow row{inst.id, inst.label, {}, std::nullopt};
    row.vec = p.s0.value().values();
    const auto& h = p.h0.value().values();
    row.vec.insert(row.vec.end(), h.begin(), h.end());
    dump.rows.push_back(std::move(row));
  }
  return dump;
}

void add_pca_columns(ReprDump& dump) {
  const Pca pca = fit_pca(dump.vectors(), 2);
  for (auto& row : dump.rows) {
    auto proj = pca.project(row.vec);
    proj.resize(2, 0.0);
    row.pca = std::array<double, 2>{proj[0], proj[1]};
  }
}

std::string repr_csv(const ReprDump& dump) {
  std::string out = "id,label,layer";
  const std::size_t dim = dump.rows.empty() ? 0 : dump.rows[0].vec.size();
  for (std::size_t d = 0; d < dim; ++d) out += ",v" + std::to_string(d);
  const bool pca = !dump.rows.empty() && dump.rows[0].pca.has_value();
  if (pca) out += ",pca0,pca1";
  out += '\n';
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out += ',';
    out += buf;
  };
  for (const auto& r : dump.rows) {
    out += std::to_string(r.id) + "," + std::to_string(r.label) + "," + std::to_string(dump.layer);
    for (double v : r.vec) num(v);
    if (pca) {
      num((*r.pca)[0]);
      num((*r.pca)[1]);
    }
    out += '\n';
  }
  return out;
}

std::vector<std::filesystem::path> export_representations(Model& model, const Split& split, std::span<const int> layers,
                                                          const std::filesystem::path& dir, bool with_pca) {
  for (int layer : layers) {
    if (layer < 1 || layer > 3) throw ValidationError("export: unknown layer id " + std::to_string(layer));
  }
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (int layer : layers) {
    ReprDump dump = collect_representations(model, split, layer);
    if (with_pca && dump.rows.size() >= 2) add_pca_columns(dump);
    const auto path = dir / ("reprs_layer" + std::to_string(layer) + ".csv");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("export: cannot write " + path.string());
    f << repr_csv(dump);
    written.push_back(path);
  }
  return written;
}

}  // namespace cmcl
