#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>

#include "cbllm/checkpoint.hpp"
#include "cbllm/errors.hpp"
#include "test_util.hpp"

namespace cbllm {
namespace {

using testing::TempDir;

Vocab toy_vocab() { return Vocab({"apple", "ocean", "flame", "the", "a"}); }

ModelConfig toy_cfg() {
  ModelConfig c;
  c.vocab_size = toy_vocab().size();
  c.d_model = 8;
  c.layers = 1;
  c.heads = 2;
  c.context = 8;
  c.seed = 21;
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Manifest minus the blob file name (which follows the manifest's own name).
nlohmann::json manifest_of(const std::string& path) {
  auto j = nlohmann::json::parse(slurp(path));
  j["blob"].erase("file");
  return j;
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << bytes;
}

TEST(Checkpoint, ClassifierRoundTripIsBitExact) {
  TempDir dir;
  ClassifierModel m(toy_cfg(), toy_vocab(), ConceptSet({"x", "y"}, {{"apple", 0}, {"ocean", 1}, {"flame", 1}}));
  m.params.at("final.w").value[1] = 0.1f + 0.2f;  // a value with a long mantissa
  m.unlearn(2);
  m.meta["note"] = "trained";
  save_classifier(dir.file("c.json"), m);
  EXPECT_EQ(checkpoint_kind(dir.file("c.json")), "classifier");
  ClassifierModel back = load_classifier(dir.file("c.json"));
  EXPECT_EQ(back.params.arrays(), m.params.arrays());
  EXPECT_EQ(back.mask, m.mask);
  EXPECT_EQ(back.meta, m.meta);
  EXPECT_EQ(back.concepts.to_json(), m.concepts.to_json());
  save_classifier(dir.file("c2.json"), back);
  EXPECT_EQ(manifest_of(dir.file("c.json")), manifest_of(dir.file("c2.json")));
  EXPECT_EQ(slurp(dir.file("c.bin")), slurp(dir.file("c2.bin")));
  std::vector<std::string> texts = {"the apple", "a flame ocean"};
  EXPECT_EQ(back.activations(texts), m.activations(texts));
}

TEST(Checkpoint, InferenceGeneratorOmitsTheProbe) {
  TempDir dir;
  GenerativeModel m(toy_cfg(), toy_vocab(), singleton_concepts({"p", "q", "r"}), GeneratorOptions{});
  ASSERT_TRUE(m.has_probe());
  save_generator(dir.file("inf.json"), m);
  save_generator(dir.file("train.json"), m, true);
  GenerativeModel inf = load_generator(dir.file("inf.json"));
  GenerativeModel full = load_generator(dir.file("train.json"));
  EXPECT_FALSE(inf.has_probe());
  EXPECT_TRUE(full.has_probe());
  EXPECT_EQ(full.params.arrays(), m.params.arrays());
  NamedArrays without = m.params.arrays();
  std::erase_if(without, [](const auto& kv) { return kv.first.rfind("probe.", 0) == 0; });
  EXPECT_EQ(inf.params.arrays(), without);
  EXPECT_FALSE(nlohmann::json::parse(slurp(dir.file("inf.json"))).dump().find("probe.w") != std::string::npos);
  EXPECT_TRUE(inf.options.adversarial);
  EXPECT_EQ(inf.u(), m.u());
  std::vector<int> prefix = {kBos, 4, 5};
  EXPECT_EQ(inf.forward_step(prefix).logits, m.forward_step(prefix).logits);
  save_generator(dir.file("inf2.json"), inf);
  EXPECT_EQ(slurp(dir.file("inf.bin")), slurp(dir.file("inf2.bin")));
  EXPECT_EQ(manifest_of(dir.file("inf.json")), manifest_of(dir.file("inf2.json")));
}

TEST(Checkpoint, BaselineAndReferenceRoundTrip) {
  TempDir dir;
  BaselineClassifier b(toy_cfg(), toy_vocab(), 3);
  b.trained = true;
  save_baseline(dir.file("b.json"), b);
  BaselineClassifier bb = load_baseline(dir.file("b.json"));
  EXPECT_EQ(bb.params.arrays(), b.params.arrays());
  EXPECT_EQ(bb.n_categories, 3u);
  EXPECT_TRUE(bb.trained);
  ReferenceLM r(toy_cfg(), toy_vocab());
  save_reference_lm(dir.file("r.json"), r);
  ReferenceLM rr = load_reference_lm(dir.file("r.json"));
  EXPECT_EQ(rr.params.arrays(), r.params.arrays());
  EXPECT_EQ(rr.tokenizer().fingerprint(), r.tokenizer().fingerprint());
}

TEST(Checkpoint, WrongKindIsRefused) {
  TempDir dir;
  ClassifierModel m(toy_cfg(), toy_vocab(), ConceptSet({"x", "y"}, {{"apple", 0}, {"ocean", 1}}));
  save_classifier(dir.file("c.json"), m);
  try {
    load_generator(dir.file("c.json"));
    FAIL() << "expected a kind error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("classifier checkpoint"), std::string::npos);
  }
  EXPECT_THROW(load_baseline(dir.file("c.json")), ValidationError);
}

TEST(Checkpoint, VersionMismatchIsRefused) {
  TempDir dir;
  ReferenceLM r(toy_cfg(), toy_vocab());
  save_reference_lm(dir.file("r.json"), r);
  auto manifest = nlohmann::json::parse(slurp(dir.file("r.json")));
  manifest["checkpoint_version"] = 99;
  spit(dir.file("r.json"), manifest.dump());
  EXPECT_THROW(load_reference_lm(dir.file("r.json")), ValidationError);
}

TEST(Checkpoint, TruncatedOrCorruptBlobIsValidationError) {
  TempDir dir;
  BaselineClassifier b(toy_cfg(), toy_vocab(), 2);
  save_baseline(dir.file("b.json"), b);
  std::string blob = slurp(dir.file("b.bin"));
  spit(dir.file("b.bin"), blob.substr(0, blob.size() - 4));
  EXPECT_THROW(load_baseline(dir.file("b.json")), ValidationError);
  blob[7] ^= 0x10;
  spit(dir.file("b.bin"), blob);
  EXPECT_THROW(load_baseline(dir.file("b.json")), ValidationError);
}

TEST(Checkpoint, ConfigMismatchWithArraysIsValidationError) {
  TempDir dir;
  BaselineClassifier b(toy_cfg(), toy_vocab(), 2);
  save_baseline(dir.file("b.json"), b);
  auto manifest = nlohmann::json::parse(slurp(dir.file("b.json")));
  manifest["n_categories"] = 3;
  spit(dir.file("b.json"), manifest.dump());
  EXPECT_THROW(load_baseline(dir.file("b.json")), ValidationError);
}

// Models outlive the object they were copied or moved from (the backbone is
// rebound to the new parameter store).
TEST(Checkpoint, ModelsSurviveCopyAndMoveOfTheOriginal) {
  std::vector<std::string> texts = {"the apple", "a flame ocean"};
  std::optional<ClassifierModel> held;
  Tensor expected;
  {
    ClassifierModel m(toy_cfg(), toy_vocab(), ConceptSet({"x", "y"}, {{"apple", 0}, {"ocean", 1}}));
    expected = m.activations(texts);
    ClassifierModel copy = m;
    held = std::move(copy);
    m.params.at("backbone.pos_emb").value.fill(0.0f);
  }
  EXPECT_EQ(held->activations(texts), expected);

  std::optional<GenerativeModel> gen;
  std::vector<float> logits;
  {
    GenerativeModel g(toy_cfg(), toy_vocab(), singleton_concepts({"p", "q"}), GeneratorOptions{});
    std::vector<int> prefix = {kBos, 4};
    logits = g.forward_step(prefix).logits;
    gen = g;
  }
  std::vector<int> prefix = {kBos, 4};
  EXPECT_EQ(gen->forward_step(prefix).logits, logits);

  std::optional<ReferenceLM> ref;
  std::optional<BaselineClassifier> base;
  {
    ReferenceLM r(toy_cfg(), toy_vocab());
    ref = std::move(r);
    BaselineClassifier b(toy_cfg(), toy_vocab(), 2);
    base = b;
  }
  std::vector<int> ids = {kBos, 4, 5};
  EXPECT_EQ(ref->token_nll(ids).size(), 2u);
  EXPECT_EQ(base->predict(texts).size(), 2u);
}

}  // namespace
}  // namespace cbllm
