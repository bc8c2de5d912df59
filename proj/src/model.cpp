#include "cmcl/model.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "cmcl/error.hpp"

namespace cmcl {

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.d1 = 768;
  c.d2 = 128;
  c.d3 = 64;
  c.max_ngram = 2;
  c.heads = 4;
  c.ff_dim = 256;
  c.max_len = 512;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("ModelConfig: " + m); };
  if (d1 == 0 || d2 == 0 || d3 == 0 || ff_dim == 0) fail("dimensions must be positive");
  if (d1 < d2) fail("d1 must be >= d2");
  if (heads == 0 || d2 % heads != 0) fail("d2 must be divisible by heads");
  if (d1 % heads != 0) fail("d1 must be divisible by heads (encoder mixer)");
  if (max_ngram < 1) fail("J must be >= 1");
  if (num_classes < 2) fail("need at least 2 classes");
  if (vocab <= kFirstContentToken) fail("vocab must exceed the reserved token ids");
  if (max_len < 2 * max_ngram + 4) fail("max_len too small for the minimum DU length");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d1", c.d1},       {"d2", c.d2},       {"d3", c.d3},           {"J", c.max_ngram},
       {"heads", c.heads}, {"num_classes", c.num_classes}, {"vocab", c.vocab}, {"max_len", c.max_len},
       {"ff_dim", c.ff_dim}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d1 = j.value("d1", c.d1);
  c.d2 = j.value("d2", c.d2);
  c.d3 = j.value("d3", c.d3);
  c.max_ngram = j.value("J", c.max_ngram);
  c.heads = j.value("heads", c.heads);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.vocab = j.value("vocab", c.vocab);
  c.max_len = j.value("max_len", c.max_len);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
}

DuPair LayerReprs::pair(int layer) const {
  switch (layer) {
    case 1: return {ad::slice(h1, 0, 0, 1), ad::slice(s1, 0, 0, 1)};
    case 2: return {ad::slice(h2, 0, 0, 1), ad::slice(s2, 0, 0, 1)};
    case 3: return {h3, s3};
    default: throw ValidationError("LayerReprs::pair: unknown layer " + std::to_string(layer));
  }
}

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& c = config_;
  constexpr double kInit = 0.1;
  auto frozen = [&](const char* name, Shape s, double bound) {
    return params_.add(name, ParamGroup::kFrozen, false, uniform(std::move(s), bound, rng));
  };
  auto weight = [&](const std::string& name, ParamGroup g, Shape s) {
    return params_.add(name, g, true, uniform(std::move(s), kInit, rng));
  };
  auto bias = [&](const std::string& name, ParamGroup g, std::size_t n) {
    return params_.add(name, g, true, Tensor({1, n}, 0.0));
  };

  // Stand-in for the pretrained encoder: fixed random tables and one mixer layer.
  const double mix_bound = std::sqrt(3.0 / static_cast<double>(c.d1));
  ids_.token = frozen("encoder.token", {c.vocab, c.d1}, 1.0);
  ids_.position = frozen("encoder.position", {c.max_len, c.d1}, 0.1);
  ids_.mix_q = frozen("encoder.mixer.wq", {c.d1, c.d1}, mix_bound);
  ids_.mix_k = frozen("encoder.mixer.wk", {c.d1, c.d1}, mix_bound);
  ids_.mix_v = frozen("encoder.mixer.wv", {c.d1, c.d1}, mix_bound);
  ids_.mix_o = frozen("encoder.mixer.wo", {c.d1, c.d1}, mix_bound);
  ids_.segment = weight("encoder.segment", ParamGroup::kSegment, {2, c.d1});

  const auto F = ParamGroup::kFusion;
  ids_.wq = weight("fusion.wq", F, {c.d1, c.d2});
  ids_.wk = weight("fusion.wk", F, {c.d1, c.d2});
  ids_.wv = weight("fusion.wv", F, {c.d1, c.d2});
  ids_.wo = weight("fusion.wo", F, {c.d2, c.d2});
  ids_.bo = bias("fusion.bo", F, c.d2);
  ids_.gate_attn_w = weight("fusion.gate_attn.w", F, {2 * c.d2, c.d2});
  ids_.gate_attn_b = bias("fusion.gate_attn.b", F, c.d2);
  ids_.ff_w1 = weight("fusion.ff.w1", F, {c.d2, c.ff_dim});
  ids_.ff_b1 = bias("fusion.ff.b1", F, c.ff_dim);
  ids_.ff_w2 = weight("fusion.ff.w2", F, {c.ff_dim, c.d2});
  ids_.ff_b2 = bias("fusion.ff.b2", F, c.d2);
  ids_.gate_ff_w = weight("fusion.gate_ff.w", F, {2 * c.d2, c.d2});
  ids_.gate_ff_b = bias("fusion.gate_ff.b", F, c.d2);

  const auto A = ParamGroup::kAggregation;
  for (std::size_t j = 1; j <= c.max_ngram; ++j) {
    ids_.conv_w.push_back(weight("aggregation.conv" + std::to_string(j) + ".w", A, {j * c.d2, c.d3}));
    ids_.conv_b.push_back(bias("aggregation.conv" + std::to_string(j) + ".b", A, c.d3));
  }
  ids_.hw_wt = weight("aggregation.highway.wt", A, {c.agg_dim(), c.agg_dim()});
  ids_.hw_bt = bias("aggregation.highway.bt", A, c.agg_dim());
  ids_.hw_wh = weight("aggregation.highway.wh", A, {c.agg_dim(), c.agg_dim()});
  ids_.hw_bh = bias("aggregation.highway.bh", A, c.agg_dim());

  ids_.pred_w = weight("prediction.w", ParamGroup::kPrediction, {c.num_classes, 2 * c.agg_dim()});
}

Var Model::self_attention(Tape& tape, Var q, Var k, Var v, std::size_t heads) {
  (void)tape;
  const std::size_t width = q.cols();
  const std::size_t dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = ad::slice(q, 1, h * dh, (h + 1) * dh);
    Var kh = ad::slice(k, 1, h * dh, (h + 1) * dh);
    Var vh = ad::slice(v, 1, h * dh, (h + 1) * dh);
    Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    outs.push_back(ad::matmul(ad::softmax(scores, 1), vh));
  }
  return heads == 1 ? outs[0] : ad::concat(std::span<const Var>(outs), 1);
}

std::pair<Var, Var> Model::encode_context(Tape& tape, const Instance& inst) {
  const auto& c = config_;
  const std::size_t m = inst.du1.size(), n = inst.du2.size();
  if (m == 0 || n == 0) throw ValidationError("encode_context: empty DU in instance " + std::to_string(inst.id));
  const std::size_t len = m + n + 2;
  if (len > c.max_len) {
    throw ValidationError("encode_context: instance " + std::to_string(inst.id) + " has length " + std::to_string(len) +
                          " > max_len " + std::to_string(c.max_len));
  }
  std::vector<std::size_t> tokens, positions(len), segments(len, 0);
  tokens.reserve(len);
  tokens.push_back(kClsToken);
  tokens.insert(tokens.end(), inst.du1.begin(), inst.du1.end());
  tokens.push_back(kSepToken);
  tokens.insert(tokens.end(), inst.du2.begin(), inst.du2.end());
  for (std::size_t t : tokens) {
    if (t >= c.vocab) {
      throw ValidationError("encode_context: token id " + std::to_string(t) + " out of vocabulary (size " +
                            std::to_string(c.vocab) + ") in instance " + std::to_string(inst.id));
    }
  }
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  std::fill(segments.begin() + static_cast<std::ptrdiff_t>(m + 1), segments.end(), 1);

  Var e = ad::add(ad::add(ad::embedding(p(tape, ids_.token), tokens), ad::embedding(p(tape, ids_.position), positions)),
                  ad::embedding(p(tape, ids_.segment), segments));
  Var q = ad::matmul(e, p(tape, ids_.mix_q));
  Var k = ad::matmul(e, p(tape, ids_.mix_k));
  Var v = ad::matmul(e, p(tape, ids_.mix_v));
  Var mixed = ad::add(e, ad::matmul(self_attention(tape, q, k, v, c.heads), p(tape, ids_.mix_o)));
  return {ad::slice(mixed, 0, 0, m + 1), ad::slice(mixed, 0, m + 1, len)};
}

Var Model::fusion_attention(Tape& tape, Var x) {
  if (x.cols() != config_.d1) {
    throw ShapeError("fuse: expected input width " + std::to_string(config_.d1) + ", got " + shape_str(x.shape()));
  }
  Var q = ad::matmul(x, p(tape, ids_.wq));
  Var k = ad::matmul(x, p(tape, ids_.wk));
  Var v = ad::matmul(x, p(tape, ids_.wv));
  return self_attention(tape, q, k, v, config_.heads);
}

Var Model::gated(Tape& tape, Var sublayer, Var residual, Parameter& w, Parameter& b) {
  Var g = ad::sigmoid(ad::add(ad::matmul(ad::concat({residual, sublayer}, 1), tape.param(w)), tape.param(b)));
  return ad::add(residual, ad::mul(g, ad::sub(sublayer, residual)));
}

Var Model::fuse(Tape& tape, Var x) {
  if (x.cols() != config_.d1) {
    throw ShapeError("fuse: expected input width " + std::to_string(config_.d1) + ", got " + shape_str(x.shape()));
  }
  Var q = ad::matmul(x, p(tape, ids_.wq));
  Var k = ad::matmul(x, p(tape, ids_.wk));
  Var v = ad::matmul(x, p(tape, ids_.wv));
  Var attn = self_attention(tape, q, k, v, config_.heads);
  Var a = ad::add(ad::matmul(attn, p(tape, ids_.wo)), p(tape, ids_.bo));
  // The residual path is XW^V so that both gate inputs are d2 wide.
  Var z = gated(tape, a, v, params_[ids_.gate_attn_w], params_[ids_.gate_attn_b]);
  Var hidden = ad::relu(ad::add(ad::matmul(z, p(tape, ids_.ff_w1)), p(tape, ids_.ff_b1)));
  Var f = ad::add(ad::matmul(hidden, p(tape, ids_.ff_w2)), p(tape, ids_.ff_b2));
  return gated(tape, f, z, params_[ids_.gate_ff_w], params_[ids_.gate_ff_b]);
}

Var Model::ngram_features(Tape& tape, Var x) {
  const std::size_t len = x.rows();
  if (x.cols() != config_.d2) {
    throw ShapeError("aggregate: expected input width " + std::to_string(config_.d2) + ", got " + shape_str(x.shape()));
  }
  if (len < config_.max_ngram) {
    throw ValidationError("aggregate: sequence of length " + std::to_string(len) + " is shorter than the largest kernel " +
                          std::to_string(config_.max_ngram));
  }
  std::vector<Var> pooled;
  for (std::size_t j = 1; j <= config_.max_ngram; ++j) {
    const std::size_t windows = len - j + 1;
    std::vector<Var> shifted;
    for (std::size_t s = 0; s < j; ++s) shifted.push_back(ad::slice(x, 0, s, s + windows));
    Var unfolded = j == 1 ? shifted[0] : ad::concat(std::span<const Var>(shifted), 1);
    Var conv = ad::add(ad::matmul(unfolded, p(tape, ids_.conv_w[j - 1])), p(tape, ids_.conv_b[j - 1]));
    pooled.push_back(ad::relu(ad::max_axis(conv, 0)));
  }
  return pooled.size() == 1 ? pooled[0] : ad::concat(std::span<const Var>(pooled), 1);
}

Var Model::highway(Tape& tape, Var o) {
  Var t = ad::sigmoid(ad::add(ad::matmul(o, p(tape, ids_.hw_wt)), p(tape, ids_.hw_bt)));
  Var h = ad::relu(ad::add(ad::matmul(o, p(tape, ids_.hw_wh)), p(tape, ids_.hw_bh)));
  // t*h + (1-t)*o
  return ad::add(o, ad::mul(t, ad::sub(h, o)));
}

Var Model::aggregate(Tape& tape, Var x) { return highway(tape, ngram_features(tape, x)); }

Var Model::predict_logits(Tape& tape, Var h3, Var s3) {
  Var joint = ad::concat({h3, s3}, 1);
  if (joint.cols() != 2 * config_.agg_dim()) {
    throw ShapeError("predict: expected 1 x " + std::to_string(2 * config_.agg_dim()) + " input, got " +
                     shape_str(joint.shape()));
  }
  return ad::matmul(joint, ad::transpose(p(tape, ids_.pred_w)));
}

Var Model::predict(Tape& tape, Var h3, Var s3) { return ad::softmax(predict_logits(tape, h3, s3), 1); }

ForwardResult Model::forward(Tape& tape, const Instance& inst) {
  ForwardResult r;
  std::tie(r.reprs.h1, r.reprs.s1) = encode_context(tape, inst);
  r.reprs.h2 = fuse(tape, r.reprs.h1);
  r.reprs.s2 = fuse(tape, r.reprs.s1);
  r.reprs.h3 = aggregate(tape, r.reprs.h2);
  r.reprs.s3 = aggregate(tape, r.reprs.s2);
  r.logits = predict_logits(tape, r.reprs.h3, r.reprs.s3);
  r.probs = ad::softmax(r.logits, 1);
  return r;
}

}  // namespace cmcl
