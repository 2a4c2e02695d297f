#include <gtest/gtest.h>

#include <chrono>

#include "cbllm/backbone.hpp"
#include "cbllm/corpus.hpp"
#include "cbllm/errors.hpp"

namespace cbllm {
namespace {

ModelConfig small_cfg(std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = 20;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 4;
  c.context = 12;
  c.seed = seed;
  return c;
}

Tensor hidden_of(const Backbone& b, std::vector<int> ids) {
  Tape t(false);
  TokenBatch batch;
  batch.add(ids);
  return t.value(b.forward_hidden(t, batch));
}

TEST(Backbone, OutputShape) {
  ParamStore s;
  Backbone b(small_cfg(), s);
  Tensor h = hidden_of(b, {0, 5, 6, 7});
  EXPECT_EQ(h.rows(), 4u);
  EXPECT_EQ(h.cols(), 16u);
}

TEST(Backbone, AppendingTokenLeavesEarlierPositionsUnchanged) {
  ParamStore s;
  Backbone b(small_cfg(), s);
  Tensor a = hidden_of(b, {0, 5, 6}), c = hidden_of(b, {0, 5, 6, 9});
  // Equal up to GEMM rounding: Eigen picks kernels by row count, so the
  // longer input may round differently in the last ulp.
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], c[i], 1e-5);
}

TEST(Backbone, PackedSequencesAreIndependent) {
  ParamStore s;
  Backbone b(small_cfg(), s);
  Tape t(false);
  TokenBatch batch;
  std::vector<int> x = {0, 5, 6}, y = {0, 9, 9, 4};
  batch.add(x);
  batch.add(y);
  Tensor both = t.value(b.forward_hidden(t, batch));
  Tensor alone = hidden_of(b, y);
  for (std::size_t i = 0; i < alone.size(); ++i) EXPECT_NEAR(both[3 * 16 + i], alone[i], 1e-5);
}

TEST(Backbone, SeedDeterminism) {
  ParamStore s1, s2, s3;
  Backbone a(small_cfg(1), s1), b(small_cfg(1), s2), c(small_cfg(2), s3);
  EXPECT_EQ(hidden_of(a, {0, 4, 5}), hidden_of(b, {0, 4, 5}));
  EXPECT_NE(hidden_of(a, {0, 4, 5}), hidden_of(c, {0, 4, 5}));
}

TEST(Backbone, OverlongSequenceIsUsageError) {
  ParamStore s;
  Backbone b(small_cfg(), s);
  EXPECT_THROW(hidden_of(b, std::vector<int>(13, 4)), UsageError);
}

TEST(Backbone, PoolIsLastRow) {
  ParamStore s;
  Backbone b(small_cfg(), s);
  Tape t(false);
  TokenBatch batch;
  std::vector<int> x = {0, 5, 6}, y = {0};
  batch.add(x);
  batch.add(y);
  Var h = b.forward_hidden(t, batch);
  Tensor pooled = t.value(b.pool(t, h, batch));
  ASSERT_EQ(pooled.rows(), 2u);
  for (std::size_t c = 0; c < 16; ++c) {
    EXPECT_EQ(pooled.at(0, c), t.value(h).at(2, c));
    EXPECT_EQ(pooled.at(1, c), t.value(h).at(3, c));
  }
}

TEST(Backbone, GradientReachesEveryParameter) {
  ParamStore s;
  Backbone b(small_cfg(), s);
  Tape t;
  TokenBatch batch;
  std::vector<int> x = {0, 5, 6, 7, 8}, y = {0, 9, 10};
  batch.add(x);
  batch.add(y);
  Var h = b.forward_hidden(t, batch);
  std::vector<int> targets = {5, 6, 7, 8, -1, 9, 10, -1};
  Var w = t.constant(Tensor::matrix(16, 20, 0.1f));
  // Non-uniform readout so every hidden unit matters.
  Tensor wv = Tensor::matrix(16, 20);
  for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = 0.01f * float((i * 7) % 13) - 0.06f;
  w = t.constant(wv);
  t.backward(t.cross_entropy(t.matmul(h, w), targets));
  for (Param* p : b.parameters()) {
    double n = 0;
    for (float g : p->grad.span()) n += double(g) * g;
    // pos_emb rows beyond the longest sequence legitimately get no gradient.
    EXPECT_GT(n, 0.0) << p->name;
  }
}

TEST(Backbone, ClassifierIdsTruncateFromRight) {
  std::vector<int> words = {5, 6, 7, 8, 9, 10, 11, 12, 13, 14};
  bool cut = false;
  auto ids = classifier_ids(words, 8, &cut);
  EXPECT_TRUE(cut);
  EXPECT_EQ(ids, (std::vector<int>{kBos, 5, 6, 7, 8, 9, 10, 11}));
  ids = classifier_ids(std::span<const int>(words).first(3), 8, &cut);
  EXPECT_FALSE(cut);
  EXPECT_EQ(ids.size(), 4u);
}

TEST(Backbone, ConfigValidation) {
  auto c = small_cfg();
  c.heads = 3;
  ParamStore s;
  EXPECT_THROW(Backbone(c, s), ValidationError);
  c = small_cfg();
  c.context = 4;
  EXPECT_THROW(Backbone(c, s), ValidationError);
  EXPECT_EQ(ModelConfig::from_json(small_cfg().to_json()).to_json(), small_cfg().to_json());
}

}  // namespace
}  // namespace cbllm
