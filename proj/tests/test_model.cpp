#include <cmath>
#include <random>

#include "doctest.h"

#include "cmcl/error.hpp"
#include "cmcl/model.hpp"
#include "oracles.hpp"

using namespace cmcl;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d1 = 8;
  c.d2 = 6;
  c.d3 = 3;
  c.max_ngram = 3;
  c.heads = 2;
  c.ff_dim = 5;
  c.vocab = 30;
  c.max_len = 20;
  return c;
}

oracle::Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-1, 1);
  oracle::Mat m(r, oracle::Vec(c));
  for (auto& row : m)
    for (double& v : row) v = d(rng);
  return m;
}

// Fills every trainable parameter with noise so that biases are non-zero.
void randomize(Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  for (auto& p : m.params()) {
    if (!p.trainable) continue;
    for (double& v : p.value.values()) v = d(rng);
  }
}

oracle::Mat param(Model& m, const std::string& name) { return oracle::to_mat(m.params().get(name).value); }
oracle::Vec bias(Model& m, const std::string& name) { return param(m, name)[0]; }

Instance make_instance(std::size_t m, std::size_t n, std::size_t label = 0) {
  Instance inst;
  for (std::size_t k = 0; k < m; ++k) inst.du1.push_back(2 + k);
  for (std::size_t k = 0; k < n; ++k) inst.du2.push_back(10 + k);
  inst.label = label;
  return inst;
}

double max_diff(const oracle::Mat& a, const Tensor& b) {
  return oracle::max_abs_diff(oracle::to_tensor(a), b);
}

}  // namespace

TEST_CASE("multi-head attention matches a per-element loop") {
  Model model(small_config(), 1);
  randomize(model, 2);
  std::mt19937_64 rng(3);
  const oracle::Mat x = random_mat(5, 8, rng);
  Tape tape;
  const Tensor got = model.fusion_attention(tape, tape.constant(oracle::to_tensor(x))).value();
  const oracle::Mat want = oracle::attention(x, param(model, "fusion.wq"), param(model, "fusion.wk"),
                                             param(model, "fusion.wv"), 2);
  CHECK(max_diff(want, got) < 1e-12);
}

TEST_CASE("gated combination") {
  Model model(small_config(), 1);
  randomize(model, 4);
  std::mt19937_64 rng(5);
  const oracle::Mat sub = random_mat(4, 6, rng), res = random_mat(4, 6, rng);
  Tape tape;
  const Tensor got = model
                         .gated(tape, tape.constant(oracle::to_tensor(sub)), tape.constant(oracle::to_tensor(res)),
                                model.params().get("fusion.gate_attn.w"), model.params().get("fusion.gate_attn.b"))
                         .value();
  const oracle::Mat want =
      oracle::gated(sub, res, param(model, "fusion.gate_attn.w"), bias(model, "fusion.gate_attn.b"));
  CHECK(max_diff(want, got) < 1e-12);
}

TEST_CASE("fusion layer end to end") {
  Model model(small_config(), 1);
  randomize(model, 6);
  std::mt19937_64 rng(7);
  const oracle::Mat x = random_mat(5, 8, rng);
  Tape tape;
  const Tensor got = model.fuse(tape, tape.constant(oracle::to_tensor(x))).value();

  const oracle::Mat attn = oracle::attention(x, param(model, "fusion.wq"), param(model, "fusion.wk"),
                                             param(model, "fusion.wv"), 2);
  oracle::Mat a = oracle::matmul(attn, param(model, "fusion.wo"));
  const oracle::Vec bo = bias(model, "fusion.bo");
  for (auto& row : a)
    for (std::size_t k = 0; k < row.size(); ++k) row[k] += bo[k];
  const oracle::Mat v = oracle::matmul(x, param(model, "fusion.wv"));
  const oracle::Mat z = oracle::gated(a, v, param(model, "fusion.gate_attn.w"), bias(model, "fusion.gate_attn.b"));
  oracle::Mat hidden = oracle::matmul(z, param(model, "fusion.ff.w1"));
  const oracle::Vec b1 = bias(model, "fusion.ff.b1");
  for (auto& row : hidden)
    for (std::size_t k = 0; k < row.size(); ++k) row[k] = oracle::relu(row[k] + b1[k]);
  oracle::Mat f = oracle::matmul(hidden, param(model, "fusion.ff.w2"));
  const oracle::Vec b2 = bias(model, "fusion.ff.b2");
  for (auto& row : f)
    for (std::size_t k = 0; k < row.size(); ++k) row[k] += b2[k];
  const oracle::Mat want = oracle::gated(f, z, param(model, "fusion.gate_ff.w"), bias(model, "fusion.gate_ff.b"));
  CHECK(max_diff(want, got) < 1e-12);
}

TEST_CASE("n-gram convolution and highway match loops") {
  const ModelConfig c = small_config();
  Model model(c, 1);
  randomize(model, 8);
  std::mt19937_64 rng(9);
  const oracle::Mat x = random_mat(6, c.d2, rng);
  std::vector<oracle::Mat> ws;
  std::vector<oracle::Vec> bs;
  for (std::size_t j = 1; j <= c.max_ngram; ++j) {
    ws.push_back(param(model, "aggregation.conv" + std::to_string(j) + ".w"));
    bs.push_back(bias(model, "aggregation.conv" + std::to_string(j) + ".b"));
  }
  Tape tape;
  Var xv = tape.constant(oracle::to_tensor(x));
  const oracle::Vec feats = oracle::ngram_features(x, ws, bs);
  const Tensor got = model.ngram_features(tape, xv).value();
  CHECK(got.shape() == Shape{1, c.agg_dim()});
  CHECK(max_diff({feats}, got) < 1e-12);

  const oracle::Vec hw = oracle::highway(feats, param(model, "aggregation.highway.wt"),
                                         bias(model, "aggregation.highway.bt"),
                                         param(model, "aggregation.highway.wh"),
                                         bias(model, "aggregation.highway.bh"));
  CHECK(max_diff({hw}, model.aggregate(tape, xv).value()) < 1e-12);
}

TEST_CASE("prediction layer is a softmax over a bias-free projection") {
  const ModelConfig c = small_config();
  Model model(c, 1);
  randomize(model, 10);
  std::mt19937_64 rng(11);
  const oracle::Mat h = random_mat(1, c.agg_dim(), rng), s = random_mat(1, c.agg_dim(), rng);
  oracle::Vec joint = h[0];
  joint.insert(joint.end(), s[0].begin(), s[0].end());
  const oracle::Mat w = param(model, "prediction.w");
  oracle::Vec logits;
  for (const auto& row : w) logits.push_back(oracle::dot(row, joint));
  Tape tape;
  const Tensor got = model.predict(tape, tape.constant(oracle::to_tensor(h)), tape.constant(oracle::to_tensor(s))).value();
  CHECK(max_diff({oracle::softmax(logits)}, got) < 1e-14);
}

TEST_CASE("forward shapes and probabilities") {
  const ModelConfig c = small_config();
  Model model(c, 1);
  Tape tape;
  ForwardResult r = model.forward(tape, make_instance(4, 7));
  CHECK(r.reprs.h1.shape() == Shape{5, c.d1});
  CHECK(r.reprs.s1.shape() == Shape{8, c.d1});
  CHECK(r.reprs.h2.shape() == Shape{5, c.d2});
  CHECK(r.reprs.s2.shape() == Shape{8, c.d2});
  CHECK(r.reprs.h3.shape() == Shape{1, c.agg_dim()});
  CHECK(r.reprs.s3.shape() == Shape{1, c.agg_dim()});
  CHECK(r.probs.shape() == Shape{1, c.num_classes});
  double total = 0.0;
  for (double p : r.probs.value().values()) {
    CHECK(p > 0.0);
    total += p;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  for (int layer = 1; layer <= 3; ++layer) {
    DuPair p = r.reprs.pair(layer);
    CHECK(p.h0.rows() == 1);
    CHECK(p.s0.rows() == 1);
  }
  CHECK_THROWS_AS(r.reprs.pair(4), ValidationError);
}

TEST_CASE("forward is deterministic and seed dependent") {
  const ModelConfig c = small_config();
  Model a(c, 5), b(c, 5), other(c, 6);
  Tape ta, tb, tc;
  const Instance inst = make_instance(4, 5);
  CHECK(a.forward(ta, inst).probs.value() == b.forward(tb, inst).probs.value());
  CHECK_FALSE(a.forward(ta, inst).probs.value() == other.forward(tc, inst).probs.value());
}

TEST_CASE("segment embedding feeds the encoder") {
  const ModelConfig c = small_config();
  Model model(c, 1);
  auto& seg = model.params().get("encoder.segment");
  const Instance inst = make_instance(3, 4);
  Tape t0;
  const Tensor before = model.forward(t0, inst).reprs.s1.value();
  for (std::size_t k = 0; k < c.d1; ++k) seg.value.at(1, k) += 0.5;
  Tape t1;
  CHECK_FALSE(model.forward(t1, inst).reprs.s1.value() == before);
}

TEST_CASE("input validation") {
  const ModelConfig c = small_config();
  Model model(c, 1);
  Tape tape;
  CHECK_THROWS_AS(model.forward(tape, make_instance(0, 3)), ValidationError);
  CHECK_THROWS_AS(model.forward(tape, make_instance(10, 10)), ValidationError);
  Instance bad = make_instance(3, 3);
  bad.du2[0] = c.vocab;
  CHECK_THROWS_AS(model.forward(tape, bad), ValidationError);
  // Shorter than the largest kernel after the representative row.
  CHECK_THROWS_AS(model.forward(tape, make_instance(1, 3)), ValidationError);
  CHECK_THROWS_AS(model.fuse(tape, tape.constant(Tensor({3, c.d1 + 1}, 0.1))), ShapeError);
  CHECK_THROWS_AS(model.aggregate(tape, tape.constant(Tensor({3, c.d2 + 1}, 0.1))), ShapeError);
  CHECK_THROWS_AS(model.predict(tape, tape.constant(Tensor({1, 2}, 0.1)), tape.constant(Tensor({1, 2}, 0.1))),
                  ShapeError);

  ModelConfig odd = c;
  odd.d2 = 7;
  CHECK_THROWS_AS(Model(odd, 1), ValidationError);
  ModelConfig zero = c;
  zero.max_ngram = 0;
  CHECK_THROWS_AS(Model(zero, 1), ValidationError);
}

TEST_CASE("parameter groups") {
  const ModelConfig c = small_config();
  Model model(c, 1);
  for (const auto& p : model.params()) {
    if (p.name.rfind("encoder.", 0) == 0 && p.name != "encoder.segment") {
      CHECK(p.group == ParamGroup::kFrozen);
      CHECK_FALSE(p.trainable);
    } else {
      CHECK(p.trainable);
    }
  }
  CHECK(model.params().get("encoder.segment").group == ParamGroup::kSegment);
  CHECK(model.params().get("fusion.wq").group == ParamGroup::kFusion);
  CHECK(model.params().get("aggregation.highway.wt").group == ParamGroup::kAggregation);
  CHECK(model.params().get("prediction.w").group == ParamGroup::kPrediction);
  CHECK(model.params().trainable_elements(groups(ParamGroup::kFrozen)) == 0);
}

TEST_CASE("frozen encoder receives no gradient") {
  const ModelConfig c = small_config();
  Model model(c, 1);
  Tape tape;
  ForwardResult r = model.forward(tape, make_instance(4, 4));
  tape.backward(ad::sum(ad::log(r.probs)));
  tape.accumulate_param_grads();
  for (const auto& p : model.params()) {
    if (p.trainable) continue;
    for (double g : p.grad.values()) CHECK(g == 0.0);
  }
  double seg = 0.0;
  for (double g : model.params().get("encoder.segment").grad.values()) seg += std::abs(g);
  CHECK(seg > 0.0);
}

TEST_CASE("config json round trip") {
  ModelConfig c = small_config();
  nlohmann::json j = c;
  CHECK(j.get<ModelConfig>() == c);
  CHECK(ModelConfig::full_scale().d1 == 768);
  CHECK(ModelConfig::full_scale().d2 == 128);
  CHECK(ModelConfig::full_scale().d3 == 64);
}
