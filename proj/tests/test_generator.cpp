#include <gtest/gtest.h>

#include <cmath>

#include "cbllm/cbm_generator.hpp"
#include "cbllm/errors.hpp"

namespace cbllm {
namespace {

// Three singleton concepts (k = 3) over a tiny vocabulary.
ConceptSet toy_concepts() { return singleton_concepts({"fruit", "sea", "fire"}); }

Vocab toy_vocab() { return Vocab({"apple", "cherry", "ocean", "wave", "flame", "ash", "the", "a", "is", "red"}); }

ModelConfig toy_cfg(std::uint64_t seed = 5) {
  ModelConfig c;
  c.vocab_size = toy_vocab().size();
  c.d_model = 16;
  c.layers = 1;
  c.heads = 2;
  c.context = 12;
  c.seed = seed;
  return c;
}

GenerativeModel toy_model(bool adversarial = true, double lambda = 1e-3) {
  GeneratorOptions o;
  o.adversarial = adversarial;
  o.lambda = lambda;
  return GenerativeModel(toy_cfg(), toy_vocab(), toy_concepts(), o);
}

std::vector<std::string> toy_texts() {
  return {"the apple is red", "a cherry", "the ocean wave", "a wave is the ocean", "the flame", "ash is red flame"};
}
std::vector<int> toy_labels() { return {0, 0, 1, 1, 2, 2}; }

GenBatch toy_batch(const GenerativeModel& m) {
  auto texts = toy_texts();
  auto seqs = encode_lm_sequences(m.vocab, texts, m.config.context);
  auto cl = concept_labels_for(m.concepts, toy_labels());
  std::vector<std::size_t> idx = {0, 1, 2, 3, 4, 5};
  return make_gen_batch(seqs, cl, idx, false);
}

double grad_norm(const Param& p) {
  double s = 0.0;
  for (float g : p.grad.storage()) s += double(g) * g;
  return std::sqrt(s);
}

double grad_norm_prefix(GenerativeModel& m, const std::string& prefix) {
  double s = 0.0;
  for (Param* p : m.params.list(prefix)) s += grad_norm(*p) * grad_norm(*p);
  return std::sqrt(s);
}

TEST(Generator, ShapesAndWidths) {
  auto m = toy_model();
  EXPECT_EQ(m.k(), 3u);
  EXPECT_EQ(m.u(), 13u);  // d_model - k
  EXPECT_EQ(m.params.at("fl.w").value.rows(), m.k() + m.u());
  EXPECT_EQ(m.params.at("probe.w").value.shape(), (Shape{13, 3}));
  std::vector<int> prefix = {kBos, m.vocab.id("the"), m.vocab.id("apple")};
  StepOutput s = m.forward_step(prefix);
  EXPECT_EQ(s.logits.size(), m.vocab_size());
  ASSERT_EQ(s.activations.size(), 3u);
  for (float a : s.activations) EXPECT_GE(a, 0.0f);
  EXPECT_FALSE(toy_model(false).has_probe());
}

TEST(Generator, OverlongPrefixIsUsageError) {
  auto m = toy_model();
  std::vector<int> prefix(m.config.context + 1, m.vocab.id("the"));
  EXPECT_THROW(m.forward_step(prefix), UsageError);
  EXPECT_THROW(m.forward_step({}), UsageError);
}

TEST(Generator, CblBiasIrrelevantWhenItsUnembeddingRowsAreZero) {
  auto m = toy_model();
  Tensor& w = m.params.at("fl.w").value;
  for (std::size_t j = 0; j < m.k(); ++j)
    for (std::size_t v = 0; v < w.cols(); ++v) w.at(j, v) = 0.0f;
  std::vector<int> prefix = {kBos, m.vocab.id("ocean")};
  auto before = m.forward_step(prefix).logits;
  m.params.at("cbl.b").value = Tensor::from_rows({{3.0f, -1.0f, 7.5f}});
  EXPECT_EQ(m.forward_step(prefix).logits, before);
}

TEST(Losses, CrossEntropyExamples) {
  Tape tape;
  Var uniform = tape.constant(Tensor::from_rows({{0, 0, 0, 0}}));
  EXPECT_NEAR(tape.value(tape.cross_entropy(uniform, std::vector<int>{2}))[0], std::log(4.0), 1e-6);
  Var two = tape.constant(Tensor::from_rows({{2, 0}}));
  EXPECT_NEAR(tape.value(tape.cross_entropy(two, std::vector<int>{0}))[0], std::log1p(std::exp(-2.0)), 1e-6);
  Var sure = tape.constant(Tensor::from_rows({{60, 0, 0, 0}}));
  EXPECT_NEAR(tape.value(tape.cross_entropy(sure, std::vector<int>{0}))[0], 0.0, 1e-6);
}

TEST(Losses, NegativeEntropyExamples) {
  Tape tape;
  EXPECT_NEAR(tape.value(negative_entropy(tape, tape.constant(Tensor::from_rows({{0, 0, 0, 0}}))))[0], -std::log(4.0), 1e-6);
  EXPECT_NEAR(tape.value(negative_entropy(tape, tape.constant(Tensor::from_rows({{80, 0, 0, 0}}))))[0], 0.0, 1e-6);
  EXPECT_NEAR(tape.value(negative_entropy(tape, tape.constant(Tensor::from_rows({{0, 0, -1e4f, -1e4f}}))))[0], -std::log(2.0),
              1e-6);
  // Row mean.
  Var two_rows = tape.constant(Tensor::from_rows({{0, 0, 0, 0}, {80, 0, 0, 0}}));
  EXPECT_NEAR(tape.value(negative_entropy(tape, two_rows))[0], -std::log(4.0) / 2, 1e-6);
}

TEST(Losses, ConceptLabelOutOfRangeIsValidationError) {
  auto m = toy_model();
  GenBatch b = toy_batch(m);
  b.concept_rows[0] = 3;
  Tape tape;
  EXPECT_THROW(gen_losses(tape, m, b), ValidationError);
  EXPECT_THROW(concept_labels_for(m.concepts, std::vector<int>{0, 5}), ValidationError);
}

TEST(Losses, MissingProbeIsUsageError) {
  auto m = toy_model();
  m.drop_probe();
  GenBatch b = toy_batch(m);
  Tape tape;
  EXPECT_THROW(gen_losses(tape, m, b), UsageError);
  EXPECT_THROW(m.probe_logits(tape, tape.constant(Tensor::matrix(1, m.u())), true), UsageError);
}

TEST(Routing, DetectionLossNeverReachesTheUnsupervisedLayer) {
  auto m = toy_model();
  GenBatch b = toy_batch(m);
  zero_grads(m.params.list());
  Tape tape;
  GenLossTerms t = gen_losses(tape, m, b);
  tape.backward(t.detection);
  EXPECT_EQ(grad_norm_prefix(m, "unsup."), 0.0);
  EXPECT_EQ(grad_norm_prefix(m, "backbone."), 0.0);
  EXPECT_EQ(grad_norm_prefix(m, "cbl."), 0.0);
  EXPECT_GT(grad_norm_prefix(m, "probe."), 0.0);
}

TEST(Routing, EntropyLossNeverReachesTheProbe) {
  for (bool adv_backbone : {false, true}) {
    GeneratorOptions o;
    o.adv_backbone = adv_backbone;
    GenerativeModel m(toy_cfg(), toy_vocab(), toy_concepts(), o);
    GenBatch b = toy_batch(m);
    zero_grads(m.params.list());
    Tape tape;
    GenLossTerms t = gen_losses(tape, m, b);
    tape.backward(t.entropy);
    EXPECT_EQ(grad_norm_prefix(m, "probe."), 0.0);
    EXPECT_GT(grad_norm_prefix(m, "unsup."), 0.0);
    EXPECT_EQ(grad_norm_prefix(m, "cbl."), 0.0);
    if (adv_backbone) {
      EXPECT_GT(grad_norm_prefix(m, "backbone."), 0.0);
    } else {
      EXPECT_EQ(grad_norm_prefix(m, "backbone."), 0.0);
    }
  }
}

TEST(Routing, RegulariserTouchesOnlyTheCblRowsOfTheUnembedding) {
  auto m = toy_model();
  GenBatch b = toy_batch(m);
  zero_grads(m.params.list());
  Tape tape;
  GenLossTerms t = gen_losses(tape, m, b);
  tape.backward(t.reg);
  const Tensor& g = m.params.at("fl.w").grad;
  double cbl_rows = 0.0, unsup_rows = 0.0;
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) (r < m.k() ? cbl_rows : unsup_rows) += std::abs(g.at(r, c));
  EXPECT_GT(cbl_rows, 0.0);
  EXPECT_EQ(unsup_rows, 0.0);
}

TEST(Breakdown, TermsSumToTotal) {
  for (double lambda : {0.0, 1e-3}) {
    for (bool adv : {true, false}) {
      auto m = toy_model(adv, lambda);
      GenBatch b = toy_batch(m);
      Tape tape;
      LossBreakdown lb = read_breakdown(tape, gen_losses(tape, m, b), b.inputs.tokens());
      EXPECT_NEAR(lb.concept_loss + lb.token + lb.entropy + lb.detection + lb.reg, lb.total, 1e-6);
      if (lambda == 0.0) EXPECT_EQ(lb.reg, 0.0);
      if (!adv) {
        EXPECT_EQ(lb.entropy, 0.0);
        EXPECT_EQ(lb.detection, 0.0);
      }
      EXPECT_NEAR(lb.reg, lambda * lb.reg_raw, 1e-9);
    }
  }
}

TEST(TrainStep, NonFiniteTermAbortsWithoutUpdating) {
  auto m = toy_model();
  GenBatch b = toy_batch(m);
  GenOptimizer opt(m, GenTrainConfig{});
  m.params.at("fl.b").value[5] = std::numeric_limits<float>::infinity();
  NamedArrays before = m.params.arrays();
  std::mt19937_64 rng(1);
  EXPECT_THROW(train_step(m, b, opt, 1.0, rng), NumericFault);
  EXPECT_EQ(m.params.arrays(), before);
}

TEST(TrainStep, OverfitsAMemorisedString) {
  auto m = toy_model(false, 0.0);
  std::vector<std::string> texts = {"the apple is red"};
  auto seqs = encode_lm_sequences(m.vocab, texts, m.config.context);
  std::vector<int> cl = {0};
  std::vector<std::size_t> idx = {0};
  GenBatch b = make_gen_batch(seqs, cl, idx, false);
  GenTrainConfig cfg;
  cfg.lr = 1e-2f;
  GenOptimizer opt(m, cfg);
  std::mt19937_64 rng(2);
  LossBreakdown last;
  for (int s = 0; s < 400; ++s) last = train_step(m, b, opt, 1.0, rng);
  EXPECT_LE(last.token, 0.01);
  GenerateOptions go;
  go.temperature = 0.0f;
  go.max_tokens = 10;
  auto res = generate(m, {}, {}, go);
  EXPECT_EQ(res.text(m.vocab), "the apple is red");
  EXPECT_TRUE(res.ended_with_eos);
}

TEST(TrainGenerator, DeterministicForASeed) {
  GenTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 11;
  auto a = toy_model(), b = toy_model();
  auto ha = train_generator(a, toy_texts(), toy_labels(), cfg);
  auto hb = train_generator(b, toy_texts(), toy_labels(), cfg);
  ASSERT_EQ(ha.size(), 2u);
  EXPECT_EQ(ha.back().total, hb.back().total);
  EXPECT_EQ(a.params.arrays(), b.params.arrays());
  auto no_probe = toy_model();
  no_probe.drop_probe();
  EXPECT_THROW(train_generator(no_probe, toy_texts(), toy_labels(), cfg), UsageError);
}

TEST(Intervention, OverrideIsLocalToTheCblSlice) {
  auto m = toy_model();
  TokenBatch batch;
  batch.add(std::vector<int>{kBos, m.vocab.id("the"), m.vocab.id("flame")});
  Tape t0(false), t1(false);
  GenForward plain = m.forward(t0, batch);
  InterventionSpec iv = {{1, 100.0f}};
  GenForward steered = m.forward(t1, batch, false, nullptr, iv);
  EXPECT_EQ(t0.value(plain.unsup), t1.value(steered.unsup));
  const Tensor& a0 = t0.value(plain.cbl);
  const Tensor& a1 = t1.value(steered.cbl);
  for (std::size_t r = 0; r < a1.rows(); ++r) {
    EXPECT_EQ(a1.at(r, 1), 100.0f);
    EXPECT_EQ(a1.at(r, 0), a0.at(r, 0));
    EXPECT_EQ(a1.at(r, 2), a0.at(r, 2));
  }
}

TEST(Intervention, SteerTowardsProtocol) {
  auto spec = steer_towards(2, 4);
  ASSERT_EQ(spec.size(), 4u);
  for (const auto& iv : spec) EXPECT_EQ(iv.value, iv.neuron == 2 ? 100.0f : 0.0f);
  EXPECT_THROW(steer_towards(4, 4), ValidationError);
  EXPECT_THROW(validate_interventions({{0, std::nanf("")}}, 4), ValidationError);
}

TEST(Generate, GreedyIsDeterministicAcrossSeeds) {
  auto m = toy_model();
  GenerateOptions go;
  go.temperature = 0.0f;
  go.max_tokens = 8;
  go.seed = 1;
  auto a = generate(m, {}, {}, go);
  go.seed = 99;
  auto b = generate(m, {}, {}, go);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.trace, b.trace);
}

TEST(Generate, SampledIsDeterministicForASeedAndTraceMatchesTokens) {
  auto m = toy_model();
  GenerateOptions go;
  go.max_tokens = 20;
  go.seed = 7;
  auto a = generate(m, {}, {}, go);
  auto b = generate(m, {}, {}, go);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.trace.size(), a.tokens.size());
  for (int id : a.tokens) {
    EXPECT_NE(id, kBos);
    EXPECT_NE(id, kPad);
    EXPECT_NE(id, kUnk);
  }
  for (const auto& row : a.trace)
    for (float v : row) EXPECT_GE(v, 0.0f);
}

TEST(Generate, EmptyInterventionEqualsNone) {
  auto m = toy_model();
  GenerateOptions go;
  go.max_tokens = 12;
  go.seed = 3;
  auto a = generate(m, {}, InterventionSpec{}, go);
  auto b = generate(m, {}, {}, go);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.trace, b.trace);
}

TEST(Generate, TraceRecordsOverrideVerbatimAndRejectsBadNeuron) {
  auto m = toy_model();
  GenerateOptions go;
  go.max_tokens = 5;
  auto res = generate(m, {}, {{0, 100.0f}, {2, 0.0f}}, go);
  for (const auto& row : res.trace) {
    EXPECT_EQ(row[0], 100.0f);
    EXPECT_EQ(row[2], 0.0f);
  }
  EXPECT_THROW(generate(m, {}, {{3, 100.0f}}, go), ValidationError);
  go.max_tokens = 0;
  EXPECT_THROW(generate(m, {}, {}, go), UsageError);
}

TEST(Generate, SlidingWindowPastTheContext) {
  auto m = toy_model();
  // Make <eos> unreachable so generation runs past the context length.
  m.params.at("fl.b").value[kEos] = -1e4f;
  GenerateOptions go;
  go.max_tokens = 2 * m.config.context;
  auto res = generate(m, {}, {}, go);
  EXPECT_EQ(res.tokens.size(), go.max_tokens);
  EXPECT_FALSE(res.ended_with_eos);
}

TEST(Detect, CraftedActivationsGiveArgmax) {
  auto m = toy_model();
  m.params.at("cbl.w").value.fill(0.0f);
  m.params.at("cbl.b").value = Tensor::from_rows({{0.0f, 5.0f, 1.0f}});
  auto d = m.detect_concepts("the apple is red");
  ASSERT_EQ(d.tokens.size(), 4u);
  EXPECT_EQ(d.tokens.front(), "the");
  for (std::size_t p = 0; p < d.tokens.size(); ++p) {
    EXPECT_EQ(d.argmax[p], 1);
    EXPECT_EQ(d.activations[p], (std::vector<float>{0.0f, 5.0f, 1.0f}));
  }
  EXPECT_FALSE(d.truncated);
  EXPECT_EQ(d.to_json()["positions"].size(), 4u);
}

TEST(TopTokens, CraftedWeightRanksFirstAndReservedAreExcluded) {
  auto m = toy_model();
  Tensor& w = m.params.at("fl.w").value;
  const int ash = m.vocab.id("ash");
  w.at(1, static_cast<std::size_t>(ash)) = 10.0f;
  w.at(1, kEos) = 50.0f;  // reserved: never listed
  auto top = top_tokens_for_neuron(m, 1, 3);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].token, "ash");
  EXPECT_EQ(top[0].weight, 10.0f);
  auto all = top_tokens_for_neuron(m, 1, 1000);
  EXPECT_EQ(all.size(), m.vocab_size() - kNumReserved);
  for (const auto& t : all) EXPECT_GE(t.id, kNumReserved);
  EXPECT_THROW(top_tokens_for_neuron(m, 3, 1), UsageError);
}

TEST(Options, JsonRoundTripAndValidation) {
  GeneratorOptions o;
  o.adversarial = false;
  o.concept_loss_last_only = true;
  o.lambda = 0.5;
  auto back = GeneratorOptions::from_json(o.to_json());
  EXPECT_EQ(back.to_json(), o.to_json());
  EXPECT_EQ(o.to_json()["concept_loss_at"], "last");
  EXPECT_THROW(GeneratorOptions::from_json({{"concept_loss_at", "middle"}}), ValidationError);
  o.lambda = -1;
  EXPECT_THROW(o.validate(), ValidationError);
  GenTrainConfig c;
  c.probe_steps = 3;
  c.seed = 9;
  EXPECT_EQ(GenTrainConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Batches, TeacherForcedLayout) {
  Vocab v = toy_vocab();
  std::vector<std::string> texts = {"the apple", "", "ocean"};
  std::vector<std::uint8_t> kept;
  auto seqs = encode_lm_sequences(v, texts, 12, &kept);
  ASSERT_EQ(seqs.size(), 2u);
  EXPECT_EQ(kept, (std::vector<std::uint8_t>{1, 0, 1}));
  EXPECT_EQ(seqs[0], (std::vector<int>{kBos, v.id("the"), v.id("apple"), kEos}));
  std::vector<int> cl = {0, 1};
  std::vector<std::size_t> idx = {0, 1};
  GenBatch all = make_gen_batch(seqs, cl, idx, false);
  EXPECT_EQ(all.inputs.ids, (std::vector<int>{kBos, v.id("the"), v.id("apple"), kBos, v.id("ocean")}));
  EXPECT_EQ(all.targets, (std::vector<int>{v.id("the"), v.id("apple"), kEos, v.id("ocean"), kEos}));
  EXPECT_EQ(all.concept_rows, (std::vector<int>{0, 0, 0, 1, 1}));
  GenBatch last = make_gen_batch(seqs, cl, idx, true);
  EXPECT_EQ(last.concept_rows, (std::vector<int>{-1, -1, 0, -1, 1}));
  // Cut to context + 1 tokens.
  auto cut = encode_lm_sequences(v, std::vector<std::string>{"a a a a a a"}, 4);
  EXPECT_EQ(cut[0].size(), 5u);
}

}  // namespace
}  // namespace cbllm
