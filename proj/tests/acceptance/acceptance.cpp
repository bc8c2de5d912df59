// Acceptance checks. Prints one PASS/FAIL line per criterion and exits 0 only
// when every selected criterion passes. Details go to <out>/acceptance.json.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cmcl/checkpoint.hpp"
#include "cmcl/cli.hpp"
#include "cmcl/gradsuite.hpp"
#include "cmcl/losses.hpp"
#include "cmcl/metrics.hpp"
#include "cmcl/trainer.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace cmcl;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string summary;
  json details = json::object();
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cmcl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

// Small model and corpus for the protocol and determinism checks.
std::string write_small_config(const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path path = dir / "small.json";
  std::ofstream(path) << R"({"model": {"d1": 16, "d2": 8, "d3": 4, "heads": 2, "ff_dim": 8},
  "data": {"train_size": 120, "dev_size": 40, "test_size": 40}, "epochs": 1})";
  return path.string();
}

// ---------------------------------------------------------------------------

Outcome gradient_suite_check() {
  GradCheckOptions opts;
  opts.max_elements = 3;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t passed = 0;
  double worst = 0.0;
  json failures = json::array();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    opts.seed = seed;
    const GradSuiteResult r = gradient_suite(seed, opts);
    worst = std::max(worst, r.max_rel_error);
    if (r.pass) {
      ++passed;
    } else {
      failures.push_back(to_json(r));
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = passed == 100 && secs < 120.0;
  o.summary = std::to_string(passed) + "/100 configurations, max rel error " + fmt("%.2e", worst) + ", " +
              fmt("%.1f", secs) + " s";
  o.details = {{"passed", passed}, {"max_rel_error", worst}, {"seconds", secs}, {"failures", failures}};
  return o;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0}); }

double lib_loss(const oracle::Batch& b, int kind) {
  Tape tape;
  Var mu = tape.variable(oracle::to_tensor(b.mu)), table = tape.variable(oracle::to_tensor(b.table));
  const ClassWeights g{b.gamma};
  switch (kind) {
    case 0: return loss_lcl(mu, table, b.labels, g, b.tau).loss.item();
    case 1: return loss_licl(mu, table, b.labels, g, b.tau, NegativeMode::kHardest).loss.item();
    default: return loss_licl(mu, table, b.labels, g, b.tau, NegativeMode::kAll).loss.item();
  }
}

double oracle_loss(const oracle::Batch& b, int kind) {
  switch (kind) {
    case 0: return oracle::lcl(b.mu, b.table, b.labels, b.gamma, b.tau);
    case 1: return oracle::licl(b.mu, b.table, b.labels, b.gamma, b.tau, oracle::Neg::kHardest);
    default: return oracle::licl(b.mu, b.table, b.labels, b.gamma, b.tau, oracle::Neg::kAll);
  }
}

double lib_cmcl(const std::vector<double>& ls, double eta) {
  Tape tape;
  std::vector<Var> vars;
  for (double l : ls) vars.push_back(tape.variable(Tensor::scalar(l)));
  return loss_cmcl(vars, eta).total.item();
}

Outcome oracle_check() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> eta(0.0, 0.5);
  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const oracle::Batch b = oracle::random_batch(rng, 8, 11);
    std::vector<double> layer_losses;
    for (int kind = 0; kind < 3; ++kind) {
      const double v = lib_loss(b, kind);
      worst = std::max(worst, rel(v, oracle_loss(b, kind)));
      layer_losses.push_back(v);
    }
    const double e = eta(rng);
    worst = std::max(worst, rel(lib_cmcl(layer_losses, e), oracle::cmcl(layer_losses, e)));
  }
  Outcome o;
  o.pass = worst < 1e-9;
  o.summary = "500 batches, max rel deviation " + fmt("%.2e", worst);
  o.details = {{"max_rel_deviation", worst}};
  return o;
}

Outcome closed_form_check() {
  Tape tape;
  Var mu = tape.variable(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var table = tape.variable(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  const std::vector<std::size_t> labels = {0, 1};
  const ClassWeights gamma{{1.0, 1.0}};
  const double lcl = loss_lcl(mu, table, labels, gamma, 1.0).loss.item();
  const double licl = loss_licl(mu, table, labels, gamma, 1.0, NegativeMode::kHardest).loss.item();
  const double cmcl = lib_cmcl({0.3, 0.4, 0.35}, 0.02);
  const double e1 = std::abs(lcl + 1.0), e2 = std::abs(licl + (1.0 - std::log(2.0))), e3 = std::abs(cmcl - 0.08);
  Outcome o;
  o.pass = e1 < 1e-12 && e2 < 1e-12 && e3 < 1e-15;
  o.summary = "LCL " + fmt("%.15g", lcl) + ", LICL " + fmt("%.15g", licl) + ", CMCL " + fmt("%.17g", cmcl);
  o.details = {{"lcl", lcl}, {"licl", licl}, {"cmcl", cmcl}};
  return o;
}

Outcome invariant_check() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> scale(0.01, 100.0), loss(-20.0, 20.0), eta(0.0, 1.0);
  std::size_t cmcl_neg = 0, pos_mismatch = 0, order_violations = 0, compared = 0, mass_mismatch = 0;
  double scale_dev = 0.0, perm_dev = 0.0, mass_dev = 0.0;

  for (int trial = 0; trial < 500; ++trial) {
    if (lib_cmcl({loss(rng), loss(rng), loss(rng)}, eta(rng)) < 0.0) ++cmcl_neg;

    const oracle::Batch b = oracle::random_batch(rng, 8, 11);
    {
      Tape tape;
      ContrastiveParts p = contrastive_parts(tape.variable(oracle::to_tensor(b.mu)),
                                             tape.variable(oracle::to_tensor(b.table)), b.labels, b.tau,
                                             NegativeMode::kHardest);
      if (!(p.pos_icl.value() == p.pos_lcl.value())) ++pos_mismatch;
    }

    oracle::Batch s = b;
    for (auto& row : s.mu) {
      const double f = scale(rng);
      for (double& v : row) v *= f;
    }
    for (auto& row : s.table) {
      const double f = scale(rng);
      for (double& v : row) v *= f;
    }
    std::vector<std::size_t> perm(b.mu.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    oracle::Batch p = b;
    for (std::size_t k = 0; k < perm.size(); ++k) {
      p.mu[k] = b.mu[perm[k]];
      p.labels[k] = b.labels[perm[k]];
    }
    for (int kind = 0; kind < 3; ++kind) {
      const double base = lib_loss(b, kind);
      scale_dev = std::max(scale_dev, std::abs(lib_loss(s, kind) - base));
      perm_dev = std::max(perm_dev, rel(lib_loss(p, kind), base));
    }

    if (b.table.size() > 2) {
      oracle::Batch u = b;
      u.tau = 1.0;
      ++compared;
      if (lib_loss(u, 1) > lib_loss(u, 2)) ++order_violations;
    }

    std::vector<std::size_t> counts(b.table.size());
    for (auto& c : counts) c = 1 + rng() % 5000;
    const auto g = class_weights(counts).gamma;
    double weighted = 0.0, total = 0.0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
      weighted += g[c] * static_cast<double>(counts[c]);
      total += static_cast<double>(counts[c]);
    }
    // gamma_c = mean / count_c is rounded, so the identity holds to within a
    // few ulps per class rather than bit for bit.
    const double dev = std::abs(weighted - total) / total;
    mass_dev = std::max(mass_dev, dev);
    if (dev > 4.0 * static_cast<double>(counts.size()) * std::numeric_limits<double>::epsilon()) ++mass_mismatch;
  }

  Outcome o;
  // Permutations change the floating-point summation order, so equality is
  // checked to a few ulps of the loss value.
  o.pass = cmcl_neg == 0 && pos_mismatch == 0 && scale_dev < 1e-9 && perm_dev < 1e-13 && order_violations == 0 &&
           mass_mismatch == 0;
  o.summary = "CMCL<0: " + std::to_string(cmcl_neg) + ", Pos mismatch: " + std::to_string(pos_mismatch) +
              ", scale dev " + fmt("%.1e", scale_dev) + ", permutation dev " + fmt("%.1e", perm_dev) +
              ", hardest>all: " + std::to_string(order_violations) + "/" + std::to_string(compared) +
              ", class mass rel dev " + fmt("%.1e", mass_dev) +
              " (" + std::to_string(mass_mismatch) + " beyond rounding)";
  o.details = {{"cmcl_negative", cmcl_neg},       {"positive_mismatch", pos_mismatch},
               {"scale_deviation", scale_dev},    {"permutation_rel_deviation", perm_dev},
               {"order_violations", order_violations}, {"order_compared", compared},
               {"class_mass_mismatches", mass_mismatch}, {"class_mass_rel_deviation", mass_dev}};
  return o;
}

Outcome routing_check() {
  GradCheckOptions opts;
  opts.max_elements = 3;
  std::size_t audited = 0, passed = 0, active = 0;
  double outside = 0.0, inside = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    opts.seed = seed;
    for (const RoutingCheck& r : routing_audit(seed, opts)) {
      ++audited;
      passed += r.pass;
      active += r.hinge_value > 0.0;
      outside = std::max(outside, r.max_abs_outside);
      inside = std::max(inside, r.max_rel_inside);
    }
  }
  Outcome o;
  o.pass = audited > 0 && passed == audited && outside == 0.0 && inside < 1e-4;
  o.summary = std::to_string(passed) + "/" + std::to_string(audited) + " hinge audits (" + std::to_string(active) +
              " active), max |grad| outside route " + fmt("%.1e", outside) + ", max rel error inside " +
              fmt("%.2e", inside);
  o.details = {{"audited", audited}, {"passed", passed}, {"active", active}, {"max_abs_outside", outside},
               {"max_rel_inside", inside}};
  return o;
}

// Training runs shared by criteria 6 and 7.
struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> baseline;
  double baseline_f1 = 0.0;
  double baseline_seconds = 0.0;
  std::vector<EpochRecord> cmcl;
  double cmcl_f1 = 0.0;
  std::array<double, 3> silhouette{};
};

TrainConfig desk_config(Variant v, std::uint64_t seed) {
  TrainConfig c;
  c.variant = v;
  c.epochs = 15;
  c.seed = seed;
  return c;
}

json history_json(const std::vector<EpochRecord>& h) {
  json out = json::array();
  for (const auto& r : h) out.push_back({r.epoch, r.train_loss, r.dev_accuracy, r.dev_macro_f1});
  return out;
}

SeedRun train_seed(const Corpus& corpus, std::uint64_t seed, bool with_cmcl) {
  SeedRun run;
  run.seed = seed;
  {
    const auto t0 = std::chrono::steady_clock::now();
    Trainer t(desk_config(Variant::kBaseline, seed), corpus);
    t.fit();
    run.baseline_seconds = seconds_since(t0);
    run.baseline = t.history();
    run.baseline_f1 = t.best_dev_f1();
  }
  std::cerr << "seed " << seed << ": b best dev macro-F1 " << run.baseline_f1 << '\n';
  if (!with_cmcl) return run;
  Trainer t(desk_config(Variant::kCmclLicl, seed), corpus);
  t.fit();
  run.cmcl = t.history();
  run.cmcl_f1 = t.best_dev_f1();
  for (int layer = 1; layer <= 3; ++layer) {
    const ReprDump d = collect_representations(t.model(), corpus.dev, layer);
    run.silhouette[static_cast<std::size_t>(layer - 1)] = silhouette_cosine(d.vectors(), d.labels()).score;
  }
  std::cerr << "seed " << seed << ": b_cmcl_licl best dev macro-F1 " << run.cmcl_f1 << ", silhouette "
            << run.silhouette[0] << " " << run.silhouette[1] << " " << run.silhouette[2] << '\n';
  return run;
}

Outcome smoke_check(const SeedRun& run) {
  double best_acc = 0.0;
  std::size_t reached = 0;
  for (const auto& r : run.baseline) {
    best_acc = std::max(best_acc, r.dev_accuracy);
    if (!reached && r.dev_accuracy >= 0.85) reached = r.epoch;
  }
  // Baseline train loss is the cross-entropy alone.
  const auto& h = run.baseline;
  const bool decreasing = h.size() >= 3 && h[1].train_loss < h[0].train_loss && h[2].train_loss < h[1].train_loss;
  Outcome o;
  o.pass = reached > 0 && decreasing && run.baseline_seconds < 600.0;
  o.summary = "best dev accuracy " + fmt("%.3f", best_acc) + (reached ? " (>= 0.85 at epoch " + std::to_string(reached) + ")" : "") +
              ", CE " + (decreasing ? "decreasing" : "not decreasing") + " over epochs 1-3, " +
              fmt("%.0f", run.baseline_seconds) + " s";
  o.details = {{"history", history_json(run.baseline)}, {"seconds", run.baseline_seconds}, {"epoch_reached", reached}};
  return o;
}

Outcome directional_check(const std::vector<SeedRun>& runs) {
  double b = 0.0, c = 0.0;
  std::size_t ordered = 0;
  json seeds = json::array();
  for (const auto& r : runs) {
    b += r.baseline_f1;
    c += r.cmcl_f1;
    const bool mono = r.silhouette[0] <= r.silhouette[1] && r.silhouette[1] <= r.silhouette[2];
    ordered += mono;
    seeds.push_back({{"seed", r.seed},
                     {"b_dev_macro_f1", r.baseline_f1},
                     {"cmcl_dev_macro_f1", r.cmcl_f1},
                     {"silhouette", r.silhouette},
                     {"silhouette_non_decreasing", mono},
                     {"b_history", history_json(r.baseline)},
                     {"cmcl_history", history_json(r.cmcl)}});
  }
  const double n = static_cast<double>(runs.size());
  b /= n;
  c /= n;
  const bool a_ok = c >= b, b_ok = ordered >= 4;
  Outcome o;
  o.pass = a_ok && b_ok;
  o.summary = "(a) mean dev macro-F1 b_cmcl_licl " + fmt("%.4f", c) + " vs b " + fmt("%.4f", b) +
              (a_ok ? " ok" : " FAIL") + "; (b) silhouette non-decreasing in " + std::to_string(ordered) + "/" +
              std::to_string(runs.size()) + " seeds" + (b_ok ? " ok" : " FAIL");
  o.details = {{"mean_b", b}, {"mean_cmcl", c}, {"silhouette_ordered", ordered}, {"seeds", seeds}};
  return o;
}

Outcome protocol_check(const fs::path& out) {
  const std::string cfg = write_small_config(out);
  Outcome o;
  const int a = run_cli({"ablate", "--config", cfg, "--out", (out / "ablate").string()});
  const int s = run_cli({"sweep", "--config", cfg, "--out", (out / "sweep").string()});
  if (a != 0 || s != 0) {
    o.summary = "ablate exit " + std::to_string(a) + ", sweep exit " + std::to_string(s);
    return o;
  }
  const json rows = read_json(out / "ablate" / "ablation.json");
  std::set<std::string> names;
  std::size_t b_count = 0, cmcl_count = 0;
  std::set<std::size_t> inference;
  for (const auto& r : rows) {
    const std::string v = r.at("variant");
    names.insert(v);
    inference.insert(r.at("inference_parameters").get<std::size_t>());
    if (v == "b") b_count = r.at("trainable_parameters");
    if (v == "b_cmcl_licl") cmcl_count = r.at("trainable_parameters");
  }
  std::set<std::string> expected;
  for (Variant v : kAllVariants) expected.insert(std::string(to_string(v)));

  std::istringstream sweep(slurp(out / "sweep" / "sweep.csv"));
  std::string line;
  std::getline(sweep, line);
  std::vector<double> lambdas;
  while (std::getline(sweep, line)) {
    if (!line.empty()) lambdas.push_back(std::stod(line.substr(0, line.find(','))));
  }
  bool grid = lambdas.size() == 10;
  for (std::size_t k = 0; grid && k < lambdas.size(); ++k) grid = std::abs(lambdas[k] - 0.1 * double(k + 1)) < 1e-12;

  o.pass = rows.size() == 8 && names == expected && cmcl_count > b_count && inference.size() == 1 && grid;
  o.summary = std::to_string(rows.size()) + " ablation rows, params b " + std::to_string(b_count) + " < b_cmcl_licl " +
              std::to_string(cmcl_count) + ", " + std::to_string(inference.size()) +
              " distinct inference count(s); sweep rows " + std::to_string(lambdas.size()) +
              (grid ? " on 0.1..1.0" : " (grid mismatch)");
  o.details = {{"rows", rows.size()}, {"b_params", b_count}, {"cmcl_params", cmcl_count}, {"lambdas", lambdas}};
  return o;
}

Outcome determinism_check(const fs::path& out) {
  const std::string cfg = write_small_config(out);
  Outcome o;
  std::vector<std::string> files = {"manifest.json", "metrics.csv", "losses.csv"};
  for (const char* dir : {"run_a", "run_b"}) {
    if (run_cli({"train", "--config", cfg, "--epochs", "2", "--out", (out / dir).string()}) != 0) {
      o.summary = "train failed";
      return o;
    }
  }
  json m1 = read_json(out / "run_a" / "manifest.json"), m2 = read_json(out / "run_b" / "manifest.json");
  const bool same_manifest = m1.at("config") == m2.at("config") && m1.at("seed") == m2.at("seed");
  std::size_t identical = 0;
  for (const char* f : {"metrics.csv", "losses.csv"}) {
    identical += slurp(out / "run_a" / f) == slurp(out / "run_b" / f) && !slurp(out / "run_a" / f).empty();
  }
  o.pass = same_manifest && identical == 2;
  o.summary = std::string(same_manifest ? "identical manifests" : "manifests differ") + ", " +
              std::to_string(identical) + "/2 CSVs byte-identical";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string out = "acceptance_runs";
  std::vector<int> only, expect_fail;
  app.add_option("--out", out, "Directory for run artifacts");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--expect-fail", expect_fail, "Known failures that do not set the exit code")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const fs::path dir(out);
  fs::create_directories(dir);
  auto selected = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };

  json report = json::object();
  bool all = true;
  auto emit = [&](int k, const char* name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << k << " " << name << ": " << o.summary << std::endl;
    report[std::to_string(k)] = {{"name", name}, {"pass", o.pass}, {"summary", o.summary}, {"details", o.details}};
    const bool known = std::find(expect_fail.begin(), expect_fail.end(), k) != expect_fail.end();
    if (!o.pass && known) std::cout << "  (known failure " << k << ", excluded from the exit code)" << std::endl;
    all = all && (o.pass || known);
    write_json(report, dir / "acceptance.json");
  };

  if (selected(1)) emit(1, "gradient suite", gradient_suite_check());
  if (selected(2)) emit(2, "oracle equivalence", oracle_check());
  if (selected(3)) emit(3, "closed forms", closed_form_check());
  if (selected(4)) emit(4, "invariants", invariant_check());
  if (selected(5)) emit(5, "routing audit", routing_check());
  if (selected(6) || selected(7)) {
    GeneratorConfig data;  // default 4-class corpus, seed 999
    const Corpus corpus = generate(data);
    std::vector<SeedRun> runs;
    const bool directional = selected(7);
    for (std::uint64_t k = 0; k < (directional ? 5u : 1u); ++k) runs.push_back(train_seed(corpus, 999 + k, directional));
    if (selected(6)) emit(6, "end-to-end smoke", smoke_check(runs[0]));
    if (directional) emit(7, "directional reproduction", directional_check(runs));
  }
  if (selected(8)) emit(8, "protocol reproduction", protocol_check(dir / "protocol"));
  if (selected(9)) emit(9, "determinism", determinism_check(dir / "determinism"));
  return all ? 0 : 1;
}
