#include "cmcl/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cmcl/checkpoint.hpp"
#include "cmcl/corpus.hpp"
#include "cmcl/error.hpp"
#include "cmcl/gradsuite.hpp"
#include "cmcl/metrics.hpp"
#include "cmcl/trainer.hpp"

namespace cmcl {

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> data_seed;
  std::optional<double> lambda, eta, tau;
  std::optional<std::string> variant, neg_mode;
  std::optional<int> classes;
  std::optional<std::size_t> epochs;
  std::string out = ".";
  std::string data_dir;
  // command specific
  std::string checkpoint;
  std::string resume;
  std::string split = "test";
  std::vector<int> layers = {1, 2, 3};
  bool no_pca = false;
  std::size_t configs = 1;
  std::size_t count = 10;
  double step = 0.1;
  double fd_step = GradCheckOptions{}.step;
};

void add_config_flags(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config_path, "JSON file overriding TrainConfig fields")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "Training seed (default 999)");
  sub->add_option("--data-seed", o.data_seed, "Corpus generator seed (default 999)");
  sub->add_option("--lambda", o.lambda, "Weight of the layer-1 contrastive term (default 0.4; 0.3 with --classes 11)");
  sub->add_option("--eta", o.eta, "Hinge margin (default 0.02)");
  sub->add_option("--tau", o.tau, "Temperature (default 1.0)");
  sub->add_option("--variant", o.variant, "b, b_licl1, b_licl2, b_licl3, b_licl_123, b_ce_123, b_cmcl_lcl, b_cmcl_licl");
  sub->add_option("--neg-mode", o.neg_mode, "Negative set for the instance-centered term")
      ->check(CLI::IsMember({"hardest", "all"}));
  sub->add_option("--classes", o.classes, "4 or 11")->check(CLI::IsMember({4, 11}));
  sub->add_option("--epochs", o.epochs, "Maximum epochs (default 50)");
  sub->add_option("--out", o.out, "Output directory");
  sub->add_option("--data", o.data_dir, "Directory with train/dev/test.jsonl (default: generate from config)");
}

TrainConfig resolve_config(const Options& o) {
  TrainConfig cfg;
  if (o.classes && *o.classes == 11) {
    cfg.data = GeneratorConfig::eleven_way();
    cfg.model.num_classes = 11;
    cfg.cl.lambda = 0.3;
  }
  if (!o.config_path.empty()) from_json(read_json(o.config_path), cfg);
  if (o.seed) cfg.seed = *o.seed;
  if (o.data_seed) cfg.data.seed = *o.data_seed;
  if (o.lambda) cfg.cl.lambda = *o.lambda;
  if (o.eta) cfg.cl.eta = *o.eta;
  if (o.tau) cfg.cl.tau = *o.tau;
  if (o.variant) cfg.variant = parse_variant(*o.variant);
  if (o.neg_mode) cfg.cl.negatives = parse_negative_mode(*o.neg_mode);
  if (o.epochs) cfg.epochs = *o.epochs;
  cfg.validate();
  return cfg;
}

Corpus load_corpus(const Options& o, const TrainConfig& cfg) {
  if (o.data_dir.empty()) return generate(cfg.data);
  const fs::path dir(o.data_dir);
  return {load_jsonl(dir / "train.jsonl"), load_jsonl(dir / "dev.jsonl"), load_jsonl(dir / "test.jsonl")};
}

const Split& pick_split(const Corpus& c, const std::string& name) {
  if (name == "train") return c.train;
  if (name == "dev") return c.dev;
  if (name == "test") return c.test;
  throw ValidationError("unknown split '" + name + "' (expected train, dev or test)");
}

void write_manifest(const fs::path& dir, const std::string& command, const nlohmann::json& config,
                    std::uint64_t seed, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json m = {{"command", command},
                      {"version", kVersion},
                      {"seed", seed},
                      {"config", config}};
  m.update(extra);
  write_json(m, dir / "manifest.json");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write " + path.string());
  f << text;
}

nlohmann::json data_source(const Options& o) { return o.data_dir.empty() ? nlohmann::json("generated") : nlohmann::json(o.data_dir); }

struct Loaded {
  TrainConfig config;
  std::unique_ptr<Model> model;
};

Loaded load_model(const std::string& path) {
  if (path.empty()) throw ValidationError("--checkpoint is required");
  const nlohmann::json ckpt = read_json(path);
  Loaded l;
  try {
    l.config = ckpt.at("config").get<TrainConfig>();
    l.config.validate();
    l.model = std::make_unique<Model>(l.config.model, 0);
    params_from_json(ckpt.at("model"), l.model->params());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": malformed checkpoint (" + e.what() + ")");
  }
  return l;
}

int cmd_gen_data(const Options& o, std::ostream& out) {
  Options g = o;
  if (o.seed && !o.data_seed) g.data_seed = o.seed;  // --seed names the corpus seed here
  const TrainConfig cfg = resolve_config(g);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  const Corpus c = generate(cfg.data);
  save_jsonl(c.train, dir / "train.jsonl");
  save_jsonl(c.dev, dir / "dev.jsonl");
  save_jsonl(c.test, dir / "test.jsonl");
  const nlohmann::json stats = corpus_stats(c, cfg.data.num_classes);
  write_json(stats, dir / "stats.json");
  write_manifest(dir, "gen-data", cfg.data, cfg.data.seed);
  out << stats.dump() << '\n';
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  const TrainConfig cfg = resolve_config(o);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_manifest(dir, "train", cfg, cfg.seed, {{"data", data_source(o)}, {"resume", o.resume}});
  const Corpus corpus = load_corpus(o, cfg);
  Trainer t(cfg, corpus);
  if (!o.resume.empty()) t.resume(read_json(o.resume));
  t.fit(dir);
  const nlohmann::json report = {{"best_epoch", t.best_epoch()},
                                 {"dev", metrics_report(confusion(t.model(), corpus.dev))},
                                 {"test", metrics_report(confusion(t.model(), corpus.test))}};
  write_json(report, dir / "eval.json");
  out << report.dump() << '\n';
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  Loaded l = load_model(o.checkpoint);
  Options src = o;
  const Corpus corpus = load_corpus(src, l.config);
  const nlohmann::json report = metrics_report(confusion(*l.model, pick_split(corpus, o.split)));
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_json(report, dir / ("eval_" + o.split + ".json"));
  write_manifest(dir, "eval", l.config, l.config.seed,
                 {{"checkpoint", o.checkpoint}, {"split", o.split}, {"data", data_source(o)}});
  out << report.dump() << '\n';
  return 0;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const TrainConfig cfg = resolve_config(o);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_manifest(dir, "ablate", cfg, cfg.seed, {{"data", data_source(o)}});
  const Corpus corpus = load_corpus(o, cfg);
  const auto rows = run_ablation(cfg, corpus, kAllVariants);
  write_json(ablation_json(rows), dir / "ablation.json");
  const std::string csv = ablation_csv(rows);
  write_text(dir / "ablation.csv", csv);
  out << csv;
  return 0;
}

int cmd_sweep(const Options& o, std::ostream& out) {
  const TrainConfig cfg = resolve_config(o);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_manifest(dir, "sweep", cfg, cfg.seed, {{"data", data_source(o)}, {"count", o.count}, {"step", o.step}});
  const Corpus corpus = load_corpus(o, cfg);
  const std::string csv = sweep_csv(lambda_sweep(cfg, corpus, o.count, o.step));
  write_text(dir / "sweep.csv", csv);
  out << csv;
  return 0;
}

int cmd_grad_check(const Options& o, std::ostream& out) {
  const std::uint64_t seed = o.seed.value_or(999);
  if (o.configs == 0) throw ValidationError("--configs must be at least 1");
  GradCheckOptions opts;
  opts.max_elements = 3;
  opts.step = o.fd_step;
  opts.seed = seed;
  nlohmann::json suites = nlohmann::json::array();
  nlohmann::json routing = nlohmann::json::array();
  bool pass = true;
  double worst = 0.0;
  for (std::size_t k = 0; k < o.configs; ++k) {
    const std::uint64_t s = seed + k;
    const GradSuiteResult r = gradient_suite(s, opts);
    pass = pass && r.pass;
    worst = std::max(worst, r.max_rel_error);
    suites.push_back(to_json(r));
    for (const auto& rc : routing_audit(s, opts)) {
      pass = pass && rc.pass;
      routing.push_back(to_json(rc));
    }
  }
  const nlohmann::json report = {{"pass", pass},   {"tolerance", opts.tolerance}, {"max_rel_error", worst},
                                 {"seed", seed},   {"configs", o.configs},        {"suites", suites},
                                 {"routing", routing}};
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_json(report, dir / "gradreport.json");
  write_manifest(dir, "grad-check", {{"configs", o.configs}, {"step", opts.step}, {"tolerance", opts.tolerance}},
                 seed);
  out << nlohmann::json{{"pass", pass}, {"max_rel_error", worst}, {"configs", o.configs}}.dump() << '\n';
  return pass ? 0 : 2;
}

int cmd_export(const Options& o, std::ostream& out) {
  Loaded l = load_model(o.checkpoint);
  const Corpus corpus = load_corpus(o, l.config);
  const Split& split = pick_split(corpus, o.split);
  const fs::path dir(o.out);
  const auto files = export_representations(*l.model, split, o.layers, dir, !o.no_pca);
  nlohmann::json sil = nlohmann::json::object();
  for (int layer : o.layers) {
    const ReprDump d = collect_representations(*l.model, split, layer);
    sil[std::to_string(layer)] = silhouette_cosine(d.vectors(), d.labels()).score;
  }
  write_json(sil, dir / "silhouette.json");
  write_manifest(dir, "export-reprs", l.config, l.config.seed,
                 {{"checkpoint", o.checkpoint}, {"split", o.split}, {"layers", o.layers}, {"pca", !o.no_pca}});
  out << sil.dump() << '\n';
  return 0;
}

}  // namespace

int dispatch(int argc, const char* const* argv) { return dispatch(argc, argv, std::cout, std::cerr); }

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Constrained multi-layer contrastive learning for discourse-pair classification"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus as JSONL splits");
  add_config_flags(gen, o);

  auto* train = app.add_subcommand("train", "Train one variant");
  add_config_flags(train, o);
  train->add_option("--resume", o.resume, "Resume from a last.json checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "best.json or last.json")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", o.split, "train, dev or test");
  eval->add_option("--data", o.data_dir, "Directory with train/dev/test.jsonl");
  eval->add_option("--out", o.out, "Output directory");

  auto* ablate = app.add_subcommand("ablate", "Train all eight variants");
  add_config_flags(ablate, o);

  auto* sweep = app.add_subcommand("sweep", "Train once per lambda value");
  add_config_flags(sweep, o);
  sweep->add_option("--count", o.count, "Number of lambda values (default 10)");
  sweep->add_option("--step", o.step, "Lambda step (default 0.1)");

  auto* grad = app.add_subcommand("grad-check", "Finite-difference checks of every loss term");
  grad->add_option("--seed", o.seed, "First configuration seed");
  grad->add_option("--configs", o.configs, "Number of random configurations (default 1)");
  grad->add_option("--step", o.fd_step, "Finite-difference step (default 3e-4)");
  grad->add_option("--out", o.out, "Output directory");

  auto* exp = app.add_subcommand("export-reprs", "Dump per-layer pair representations");
  exp->add_option("--checkpoint", o.checkpoint, "best.json or last.json")->required()->check(CLI::ExistingFile);
  exp->add_option("--split", o.split, "train, dev or test");
  exp->add_option("--layers", o.layers, "Layer ids")->delimiter(',');
  exp->add_flag("--no-pca", o.no_pca, "Omit the 2-D PCA columns");
  exp->add_option("--data", o.data_dir, "Directory with train/dev/test.jsonl");
  exp->add_option("--out", o.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(o, out);
    if (*train) return cmd_train(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*ablate) return cmd_ablate(o, out);
    if (*sweep) return cmd_sweep(o, out);
    if (*grad) return cmd_grad_check(o, out);
    if (*exp) return cmd_export(o, out);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace cmcl
