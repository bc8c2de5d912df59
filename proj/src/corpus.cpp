#include "cmcl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "cmcl/error.hpp"

namespace cmcl {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

GeneratorConfig GeneratorConfig::eleven_way() {
  GeneratorConfig c;
  c.num_classes = 11;
  c.priors = {0.22, 0.18, 0.14, 0.11, 0.09, 0.07, 0.06, 0.05, 0.04, 0.02, 0.02};
  return c;
}

void GeneratorConfig::validate(std::size_t max_ngram) const {
  auto fail = [](const std::string& m) { throw ValidationError("GeneratorConfig: " + m); };
  if (num_classes < 2) fail("need at least 2 classes");
  if (priors.size() != num_classes) fail("priors must have one entry per class");
  double total = 0.0;
  for (double p : priors) {
    if (!(p >= 0.0)) fail("priors must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) fail("priors must sum to 1");
  if (!(signal >= 0.0 && signal <= 1.0)) fail("signal must lie in [0, 1]");
  if (vocab <= kFirstContentToken + 1) fail("vocab too small");
  if (topic_size == 0 || topic_size > vocab - kFirstContentToken) fail("topic_size out of range");
  if (min_du_len < max_ngram + 1) {
    fail("min_du_len must be at least J+1 = " + std::to_string(max_ngram + 1) + " (infeasible lengths)");
  }
  if (max_du_len < min_du_len) fail("max_du_len < min_du_len (infeasible lengths)");
  if (train_size < num_classes || dev_size < num_classes || test_size < num_classes) {
    fail("every split needs at least num_classes instances");
  }
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"num_classes", c.num_classes}, {"vocab", c.vocab},         {"priors", c.priors},
       {"signal", c.signal},           {"topic_size", c.topic_size}, {"min_du_len", c.min_du_len},
       {"max_du_len", c.max_du_len},   {"train_size", c.train_size}, {"dev_size", c.dev_size},
       {"test_size", c.test_size},     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c.num_classes = j.value("num_classes", c.num_classes);
  c.vocab = j.value("vocab", c.vocab);
  c.priors = j.value("priors", c.priors);
  c.signal = j.value("signal", c.signal);
  c.topic_size = j.value("topic_size", c.topic_size);
  c.min_du_len = j.value("min_du_len", c.min_du_len);
  c.max_du_len = j.value("max_du_len", c.max_du_len);
  c.train_size = j.value("train_size", c.train_size);
  c.dev_size = j.value("dev_size", c.dev_size);
  c.test_size = j.value("test_size", c.test_size);
  c.seed = j.value("seed", c.seed);
}

namespace {

struct TokenModel {
  std::vector<std::vector<std::size_t>> du1_topics;  // per class
  std::vector<std::vector<std::size_t>> du2_topics;
  std::discrete_distribution<std::size_t> background;  // over content tokens
};

TokenModel build_token_model(const GeneratorConfig& c) {
  std::mt19937_64 rng(mix_seed(c.seed, 0x70b1c));
  const std::size_t content = c.vocab - kFirstContentToken;
  std::vector<std::size_t> pool(content);
  std::iota(pool.begin(), pool.end(), kFirstContentToken);

  TokenModel m;
  for (std::size_t k = 0; k < c.num_classes; ++k) {
    std::shuffle(pool.begin(), pool.end(), rng);
    m.du1_topics.emplace_back(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(c.topic_size));
    std::shuffle(pool.begin(), pool.end(), rng);
    m.du2_topics.emplace_back(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(c.topic_size));
  }
  // Zipf(1) background over a seeded permutation of the content tokens.
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<double> weights(content);
  for (std::size_t r = 0; r < content; ++r) weights[pool[r] - kFirstContentToken] = 1.0 / static_cast<double>(r + 1);
  m.background = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
  return m;
}

Instance make_instance(const GeneratorConfig& c, TokenModel& m, std::int64_t id, std::uint64_t seed,
                       std::ptrdiff_t forced_label) {
  std::mt19937_64 rng(seed);
  Instance inst;
  inst.id = id;
  if (forced_label >= 0) {
    inst.label = static_cast<std::size_t>(forced_label);
  } else {
    std::discrete_distribution<std::size_t> prior(c.priors.begin(), c.priors.end());
    inst.label = prior(rng);
  }
  std::uniform_int_distribution<std::size_t> length(c.min_du_len, c.max_du_len);
  std::bernoulli_distribution from_topic(c.signal);
  std::uniform_int_distribution<std::size_t> topic_pick(0, c.topic_size - 1);
  auto fill = [&](std::vector<std::size_t>& du, const std::vector<std::size_t>& topic) {
    du.resize(length(rng));
    for (auto& t : du) t = from_topic(rng) ? topic[topic_pick(rng)] : kFirstContentToken + m.background(rng);
  };
  fill(inst.du1, m.du1_topics[inst.label]);
  fill(inst.du2, m.du2_topics[inst.label]);
  return inst;
}

}  // namespace

Corpus generate(const GeneratorConfig& config) {
  config.validate(1);
  TokenModel model = build_token_model(config);
  Corpus corpus;
  std::int64_t next_id = 0;
  auto build = [&](Split& out, std::size_t n, std::uint64_t tag) {
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      // The first |C| instances of every split cover each class once so that
      // |D_c| >= 1 holds for the class weights.
      const std::ptrdiff_t forced = i < config.num_classes ? static_cast<std::ptrdiff_t>(i) : -1;
      out.push_back(make_instance(config, model, next_id++, mix_seed(mix_seed(config.seed, tag), i), forced));
    }
  };
  build(corpus.train, config.train_size, 1);
  build(corpus.dev, config.dev_size, 2);
  build(corpus.test, config.test_size, 3);
  return corpus;
}

std::vector<std::size_t> class_counts(const Split& split, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& inst : split) {
    if (inst.label >= num_classes) {
      throw ValidationError("class_counts: label " + std::to_string(inst.label) + " of instance " +
                            std::to_string(inst.id) + " exceeds class count " + std::to_string(num_classes));
    }
    ++counts[inst.label];
  }
  return counts;
}

nlohmann::json corpus_stats(const Corpus& corpus, std::size_t num_classes) {
  nlohmann::json out = nlohmann::json::object();
  auto add = [&](const char* name, const Split& s) {
    nlohmann::json per = nlohmann::json::object();
    const auto counts = class_counts(s, num_classes);
    for (std::size_t c = 0; c < counts.size(); ++c) per[std::to_string(c)] = counts[c];
    out[name] = per;
  };
  add("train", corpus.train);
  add("dev", corpus.dev);
  add("test", corpus.test);
  return out;
}

std::string to_jsonl(const Split& split) {
  std::string out;
  for (const auto& inst : split) {
    nlohmann::json j = {{"id", inst.id}, {"du1", inst.du1}, {"du2", inst.du2}, {"label", inst.label}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_jsonl(const Split& split, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("save_jsonl: cannot open " + path.string());
  f << to_jsonl(split);
  if (!f) throw ValidationError("save_jsonl: write failed for " + path.string());
}

Split parse_jsonl(const std::string& text, const std::string& source) {
  Split out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto where = [&] { return source + ":" + std::to_string(lineno) + ": "; };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where() + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ValidationError(where() + "expected a JSON object");
    for (const char* field : {"id", "du1", "du2", "label"}) {
      if (!j.contains(field)) throw ValidationError(where() + "missing field '" + field + "'");
    }
    try {
      Instance inst;
      inst.id = j.at("id").get<std::int64_t>();
      inst.du1 = j.at("du1").get<std::vector<std::size_t>>();
      inst.du2 = j.at("du2").get<std::vector<std::size_t>>();
      inst.label = j.at("label").get<std::size_t>();
      out.push_back(std::move(inst));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where() + "bad field type (" + e.what() + ")");
    }
  }
  if (out.empty()) std::cerr << "warning: " << source << " contains no instances\n";
  return out;
}

Split load_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("load_jsonl: cannot open " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_jsonl(buf.str(), path.string());
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t split_size, std::size_t batch_size, std::uint64_t seed,
                                                   std::uint64_t epoch) {
  if (batch_size < 2) throw ValidationError("make_batches: batch size must be at least 2");
  std::vector<std::size_t> order(split_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < split_size; i += batch_size) {
    const std::size_t end = std::min(split_size, i + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace cmcl
