#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmcl/instance.hpp"

namespace cmcl {

// Synthetic discourse-pair corpus. Every class owns one topic token set for
// DU1 and one for DU2; each token is drawn from the class topic with
// probability `signal` and from a shared Zipf background otherwise.
struct GeneratorConfig {
  std::size_t num_classes = 4;
  std::size_t vocab = 200;
  std::vector<double> priors = {0.53, 0.26, 0.15, 0.06};
  double signal = 0.25;
  std::size_t topic_size = 10;
  std::size_t min_du_len = 5;
  std::size_t max_du_len = 16;
  std::size_t train_size = 4000;
  std::size_t dev_size = 500;
  std::size_t test_size = 500;
  std::uint64_t seed = 999;

  // 11-way configuration with a long-tailed prior.
  static GeneratorConfig eleven_way();

  // `max_ngram` is the model's J; DUs must be at least J+1 tokens long.
  void validate(std::size_t max_ngram = 2) const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

struct Corpus {
  Split train;
  Split dev;
  Split test;
};

Corpus generate(const GeneratorConfig& config);

// |D_c| for one split.
std::vector<std::size_t> class_counts(const Split& split, std::size_t num_classes);

// {"train": {"0": n, ...}, "dev": {...}, "test": {...}}
nlohmann::json corpus_stats(const Corpus& corpus, std::size_t num_classes);

// One JSON object per line: {"id":..., "du1":[...], "du2":[...], "label":...}
void save_jsonl(const Split& split, const std::filesystem::path& path);
std::string to_jsonl(const Split& split);
// Malformed lines raise ValidationError with the 1-based line number. An empty
// file yields an empty split and a warning on stderr.
Split load_jsonl(const std::filesystem::path& path);
Split parse_jsonl(const std::string& text, const std::string& source = "<string>");

// Epoch-seeded shuffle of [0, split_size) cut into batches; the final short
// batch is kept. Throws ValidationError for batch_size < 2.
std::vector<std::vector<std::size_t>> make_batches(std::size_t split_size, std::size_t batch_size, std::uint64_t seed,
                                                   std::uint64_t epoch);

// splitmix64 finalizer; used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace cmcl
