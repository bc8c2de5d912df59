#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>

#include <nlohmann/json.hpp>

#include "cmcl/autodiff.hpp"
#include "cmcl/instance.hpp"
#include "cmcl/params.hpp"

namespace cmcl {

struct ModelConfig {
  std::size_t d1 = 64;  // context representation width
  std::size_t d2 = 32;  // fusion width
  std::size_t d3 = 16;  // channels per convolution
  std::size_t max_ngram = 2;  // J: kernel sizes 1..J
  std::size_t heads = 4;
  std::size_t num_classes = 4;
  std::size_t vocab = 200;
  std::size_t max_len = 34;  // [CLS] + DU1 + [SEP] + DU2
  std::size_t ff_dim = 64;   // hidden width of the fusion feed-forward sublayer

  // Full-size widths (d1=768, d2=128, d3=64); heads chosen to divide both.
  static ModelConfig full_scale();

  std::size_t agg_dim() const { return max_ngram * d3; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Representative vectors (h0 for DU1, s0 for DU2) of one layer, each 1 x d.
struct DuPair {
  Var h0;
  Var s0;
};

// Outputs of the three intermediate layers for one instance.
struct LayerReprs {
  Var h1, s1;  // (M+1) x d1, (N+1) x d1
  Var h2, s2;  // (M+1) x d2, (N+1) x d2
  Var h3, s3;  // 1 x J*d3 each

  // layer in {1,2,3}. Layers 1-2 use the first row ([CLS] / [SEP]); layer 3 the whole vector.
  DuPair pair(int layer) const;
};

struct ForwardResult {
  LayerReprs reprs;
  Var logits;  // 1 x |C|
  Var probs;   // 1 x |C|
};

// Baseline architecture: frozen stand-in encoder with learnable segment
// embeddings, gated fusion layer, n-gram CNN + highway aggregation layer and
// a linear softmax prediction layer. Fusion and aggregation weights are
// shared between DU1 and DU2.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Builds [CLS] DU1 [SEP] DU2, embeds it, runs the frozen mixer and splits
  // the rows back into (H1, S1).
  std::pair<Var, Var> encode_context(Tape& tape, const Instance& inst);
  Var fuse(Tape& tape, Var x);
  Var aggregate(Tape& tape, Var x);
  Var predict_logits(Tape& tape, Var h3, Var s3);
  Var predict(Tape& tape, Var h3, Var s3);
  ForwardResult forward(Tape& tape, const Instance& inst);

  // Pieces of fuse()/aggregate(), exposed for tests.
  // Concatenated per-head attention outputs before the output projection.
  Var fusion_attention(Tape& tape, Var x);
  // g = sigmoid([residual ; sublayer] W + b);  out = g*sublayer + (1-g)*residual
  Var gated(Tape& tape, Var sublayer, Var residual, Parameter& w, Parameter& b);
  // Flattened ReLU(max-over-time(conv_j(x))) for j = 1..J, before the highway.
  Var ngram_features(Tape& tape, Var x);
  Var highway(Tape& tape, Var o);

  // Parameter groups used at inference (heads and auxiliary classifiers excluded).
  static constexpr GroupMask kInferenceGroups =
      groups(ParamGroup::kSegment, ParamGroup::kFusion, ParamGroup::kAggregation, ParamGroup::kPrediction);

 private:
  struct Ids {
    std::size_t token, position, segment;
    std::size_t mix_q, mix_k, mix_v, mix_o;
    std::size_t wq, wk, wv, wo, bo, gate_attn_w, gate_attn_b;
    std::size_t ff_w1, ff_b1, ff_w2, ff_b2, gate_ff_w, gate_ff_b;
    std::vector<std::size_t> conv_w, conv_b;
    std::size_t hw_wt, hw_bt, hw_wh, hw_bh;
    std::size_t pred_w;
  };

  Var p(Tape& tape, std::size_t id) { return tape.param(params_[id]); }
  Var self_attention(Tape& tape, Var q, Var k, Var v, std::size_t heads);

  ModelConfig config_;
  ParamStore params_;
  Ids ids_{};
};

}  // namespace cmcl
