// Acceptance harness: runs criteria 1-11 of the spec end to end at desk scale
// and prints one PASS/FAIL line per criterion. Exit status is 0 only if every
// criterion passes.
//
//   cbllm_acceptance [--data-dir DIR] [--only N[,N...]]

#include "CLI11.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <unistd.h>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cbllm/acs.hpp"
#include "cbllm/cbm_classifier.hpp"
#include "cbllm/cbm_generator.hpp"
#include "cbllm/checkpoint.hpp"
#include "cbllm/concepts.hpp"
#include "cbllm/corpus.hpp"
#include "cbllm/errors.hpp"
#include "cbllm/eval.hpp"
#include "op_cases.hpp"

namespace fs = std::filesystem;
using namespace cbllm;

namespace {

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << x;
  return s.str();
}

double sparsity(const Tensor& w) {
  std::size_t small = 0;
  for (float x : w.span()) small += std::fabs(x) < 1e-3f;
  return double(small) / double(w.size());
}

// Desk-scale backbone shared by every trained arm.
ModelConfig desk_config(const Vocab& vocab) {
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.d_model = 64;
  mc.layers = 2;
  mc.heads = 4;
  mc.context = 64;
  mc.seed = 1;
  return mc;
}

struct Corpus {
  SynthSpec spec;
  ConceptSet concepts;
  std::vector<std::string> train_texts, test_texts;
  std::vector<int> train_labels, test_labels;
  Vocab vocab;
  std::vector<std::string> categories;
};

Corpus load_corpus(const fs::path& data_dir, const std::string& name) {
  Corpus c{load_synth_spec((data_dir / "synth" / (name + ".json")).string()),
           load_concept_set((data_dir / "concepts" / (name + ".json")).string()),
           {}, {}, {}, {}, Vocab(std::vector<std::string>{}), {}};
  Dataset all = synth_generate(c.spec);
  Dataset train = all.subset("train"), test = all.subset("test");
  c.train_texts = train.texts();
  c.train_labels = train.labels();
  c.test_texts = test.texts();
  c.test_labels = test.labels();
  c.vocab = build_vocab(c.train_texts, 5000);
  c.categories = all.category_names;
  return c;
}

// ---------------------------------------------------------------- criterion 1
Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::size_t cases = 0;
  double worst = 0.0, worst_fwd = 0.0;
  std::string worst_name;
  for (const auto& c : testing::op_cases()) {
    for (int trial = 0; trial < 100; ++trial) {
      auto d = c.make(rng);
      auto res = testing::grad_check(d.inputs, d.build, d.ref, rng);
      if (res.rel_error > worst) {
        worst = res.rel_error;
        worst_name = c.name;
      }
      worst_fwd = std::max(worst_fwd, res.forward_error);
      ++cases;
    }
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = cases >= 100 && worst <= 1e-4 && worst_fwd <= 1e-4 && t < 60.0;
  o.detail = std::to_string(cases) + " cases, worst rel error " + fmt(worst) + " (" + worst_name + "), forward " +
             fmt(worst_fwd) + ", " + fmt(t, 3) + " s";
  return o;
}

// ---------------------------------------------------------------- criterion 2
Outcome criterion_acc(const Corpus& news) {
  const ConceptSet& cs = news.concepts;
  const std::size_t rows = 10000 / cs.k() + 1, k = cs.k();
  std::mt19937_64 rng(7);
  std::normal_distribution<float> nd(0.0f, 0.5f);
  ConceptScores raw{Tensor::matrix(rows, k), false, {}};
  for (float& x : raw.scores.span()) x = nd(rng);
  // Exact zeros exercise the strict "> 0" boundary of Eq. 2.
  for (std::size_t i = 0; i < rows; i += 17) raw.scores.at(i, i % k) = 0.0f;
  std::vector<int> y(rows);
  for (auto& v : y) v = static_cast<int>(rng() % cs.n());

  const ConceptScores once = acc_correct(raw, y, cs), twice = acc_correct(once, y, cs);
  std::size_t triples = 0, mismatches = 0, support = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      // Eq. 2 by brute force: keep S iff positive and M(c_j) == y(x).
      const float s = raw.scores.at(i, j);
      const float expected = (s > 0.0f && cs.class_of_concept(j) == y[i]) ? s : 0.0f;
      mismatches += once.scores.at(i, j) != expected;
      support += once.scores.at(i, j) != 0.0f && cs.class_of_concept(j) != y[i];
      ++triples;
    }
  }
  const bool idempotent = once.scores == twice.scores && once.corrected;
  Outcome o;
  o.pass = triples >= 10000 && mismatches == 0 && support == 0 && idempotent;
  o.detail = std::to_string(triples) + " (x, j, y) triples, " + std::to_string(mismatches) + " mismatches, " +
             std::to_string(support) + " off-block non-zeros, idempotent=" + (idempotent ? "yes" : "no");
  return o;
}

// ------------------------------------------------------------ criteria 3 & 4
struct ClassifierArms {
  ClassifierModel acc_model;
  Tensor acc_train_acts;
  double acc_accuracy = 0.0, raw_accuracy = 0.0, baseline_accuracy = 0.0;
  double seconds = 0.0;
};

ClassifierArms train_classifier_arms(const Corpus& c, std::uint64_t seed) {
  const auto t0 = Clock::now();
  const ModelConfig mc = desk_config(c.vocab);
  HashTfidfBackend backend(c.train_texts, 4096);
  const ConceptScores raw = concept_scores(backend, c.concepts, c.train_texts);
  const ConceptScores acc = acc_correct(raw, c.train_labels, c.concepts);
  ClassifierTrainConfig tc;
  tc.epochs = 3;
  tc.seed = seed;

  ClassifierArms arms{ClassifierModel(mc, c.vocab, c.concepts), Tensor(), 0, 0, 0, 0};
  train_cbl(arms.acc_model, c.train_texts, acc, tc);
  arms.acc_train_acts = arms.acc_model.activations(c.train_texts);
  train_final(arms.acc_model, arms.acc_train_acts, c.train_labels, FinalTrainConfig{});
  arms.acc_accuracy = accuracy(arms.acc_model.predict(c.test_texts), c.test_labels);

  ClassifierModel raw_model(mc, c.vocab, c.concepts);
  train_cbl(raw_model, c.train_texts, raw, tc, /*allow_uncorrected=*/true);
  train_final(raw_model, raw_model.activations(c.train_texts), c.train_labels, FinalTrainConfig{});
  arms.raw_accuracy = accuracy(raw_model.predict(c.test_texts), c.test_labels);

  BaselineClassifier baseline(mc, c.vocab, c.concepts.n());
  baseline.train(c.train_texts, c.train_labels, tc);
  arms.baseline_accuracy = accuracy(baseline.predict(c.test_texts), c.test_labels);
  arms.seconds = seconds_since(t0);
  return arms;
}

Outcome criterion_classification(const Corpus& c, const ClassifierArms& a) {
  Outcome o;
  o.pass = a.acc_accuracy >= 0.90 && a.acc_accuracy >= a.baseline_accuracy - 0.03 &&
           a.acc_accuracy >= a.raw_accuracy && a.seconds < 600.0;
  o.detail = "news " + std::to_string(c.train_texts.size()) + "/" + std::to_string(c.test_texts.size()) +
             ": CB-LLM w/ ACC " + fmt(a.acc_accuracy) + ", w/o ACC " + fmt(a.raw_accuracy) + ", baseline " +
             fmt(a.baseline_accuracy) + ", " + fmt(a.seconds, 3) + " s for all three arms";
  return o;
}

Outcome criterion_sparsity(const Corpus& c, const ClassifierArms& a) {
  ClassifierModel m = a.acc_model;
  std::vector<double> sp, acc;
  for (double lambda : {0.0, 7e-4, 7e-2}) {
    FinalTrainConfig fc;
    fc.lambda = lambda;
    fc.alpha = 0.99;
    train_final(m, a.acc_train_acts, c.train_labels, fc);
    sp.push_back(sparsity(m.params.at("final.w").value));
    acc.push_back(accuracy(m.predict(c.test_texts), c.test_labels));
  }
  Outcome o;
  o.pass = sp[0] <= sp[1] && sp[1] <= sp[2] && acc[0] - acc[1] <= 0.02;
  o.detail = "sparsity " + fmt(sp[0]) + " -> " + fmt(sp[1]) + " -> " + fmt(sp[2]) + ", accuracy " + fmt(acc[0]) +
             " -> " + fmt(acc[1]) + " -> " + fmt(acc[2]);
  return o;
}

// ---------------------------------------------------------------- criterion 5
Outcome criterion_unlearning(const Corpus& sent) {
  const ModelConfig mc = desk_config(sent.vocab);
  HashTfidfBackend backend(sent.train_texts, 4096);
  const ConceptScores acc =
      acc_correct(concept_scores(backend, sent.concepts, sent.train_texts), sent.train_labels, sent.concepts);
  ClassifierTrainConfig tc;
  tc.epochs = 3;
  ClassifierModel m(mc, sent.vocab, sent.concepts);
  train_cbl(m, sent.train_texts, acc, tc);
  train_final(m, m.activations(sent.train_texts), sent.train_labels, FinalTrainConfig{});

  const int j = sent.concepts.find("overpriced expensive menu");
  if (j < 0) return {false, "target concept missing from the sentiment concept set"};
  const std::vector<std::string> injected = {"overpriced", "expensive"};
  std::vector<std::string> texts;
  for (const auto& s : synth_mixed(sent.spec, 0, injected, 200, 2, 99)) texts.push_back(s.text);

  const auto before = m.predict(texts);
  const UnlearningReport rep = unlearning_report(m, texts, static_cast<std::size_t>(j));
  m.unlearn(static_cast<std::size_t>(j));
  m.restore(static_cast<std::size_t>(j));
  const auto after = m.predict(texts);
  bool identical = before.size() == after.size();
  for (std::size_t i = 0; identical && i < before.size(); ++i) {
    identical = before[i].category == after[i].category && before[i].logits == after[i].logits;
  }
  Outcome o;
  o.pass = !rep.dominated.empty() && rep.flip_rate >= 0.70 && identical;
  o.detail = "concept '" + sent.concepts.concept_at(static_cast<std::size_t>(j)).text + "': " +
             std::to_string(rep.dominated_flipped) + "/" + std::to_string(rep.dominated.size()) +
             " dominated samples flipped (" + fmt(rep.flip_rate) + "), unlearn->restore bit-identical=" +
             (identical ? "yes" : "no");
  return o;
}

// ------------------------------------------------------------ criteria 6 - 9
struct GeneratorArm {
  double detection = 0.0, probe_unsup = 0.0, probe_cbl = 0.0, steer = 0.0;
  std::vector<std::vector<int>> steered;
};

struct GeneratorArms {
  GeneratorArm adv, noadv;
  double ppl_steered = 0.0, ppl_free = 0.0;
  double seconds = 0.0;
};

GeneratorArms train_generator_arms(const Corpus& c) {
  const auto t0 = Clock::now();
  const ModelConfig mc = desk_config(c.vocab);
  const ConceptSet cs = singleton_concepts(c.categories);
  GenTrainConfig gc;
  gc.epochs = 8;
  gc.seed = 3;
  const MarkerOracle oracle(c.spec);
  const std::size_t n_per_category = 20, tokens = 100;

  GeneratorArms out;
  ReferenceLM ref(mc, c.vocab);
  ref.train(c.train_texts, gc);
  std::vector<std::vector<int>> unsteered;

  for (bool adversarial : {true, false}) {
    GeneratorOptions opt;
    opt.adversarial = adversarial;
    GenerativeModel m(mc, c.vocab, cs, opt);
    train_generator(m, c.train_texts, c.train_labels, gc);
    GeneratorArm& arm = adversarial ? out.adv : out.noadv;
    const FinalFeatures tr = m.final_features(c.train_texts), te = m.final_features(c.test_texts);
    arm.detection = concept_detection_accuracy(te.cbl, concept_labels_for(cs, c.test_labels)).value;
    // Fresh probes, trained after the generator is frozen.
    arm.probe_unsup = probe_accuracy(tr.unsup, c.train_labels, te.unsup, c.test_labels, cs.n(), 0).value;
    arm.probe_cbl = probe_accuracy(tr.cbl, c.train_labels, te.cbl, c.test_labels, cs.n(), 0).value;
    const SteerabilityResult st = steerability_score(m, oracle, n_per_category, tokens, 5);
    arm.steer = st.mean;
    for (const auto& per : st.samples)
      for (const auto& s : per) arm.steered.push_back(s);
    if (adversarial) {
      for (std::size_t i = 0; i < cs.n() * n_per_category; ++i) {
        GenerateOptions go;
        go.seed = 1000 + i;
        go.max_tokens = tokens;
        unsteered.push_back(generate(m, {}, {}, go).tokens);
      }
    }
  }
  out.ppl_steered = perplexity(ref, out.adv.steered, c.vocab).value;
  out.ppl_free = perplexity(ref, unsteered, c.vocab).value;
  out.seconds = seconds_since(t0);
  return out;
}

Outcome criterion_detection(const GeneratorArms& g) {
  return {g.adv.detection >= 0.90,
          "adversarial generator concept detection " + fmt(g.adv.detection) + " (w/o ADV " + fmt(g.noadv.detection) + ")"};
}

Outcome criterion_disentangle(const GeneratorArms& g) {
  return {g.adv.probe_unsup <= 0.35 && g.noadv.probe_unsup >= 0.50 && g.adv.probe_cbl >= 0.90,
          "fresh probe on f_unsup: adversarial " + fmt(g.adv.probe_unsup) + ", w/o ADV " + fmt(g.noadv.probe_unsup) +
              "; on CBL " + fmt(g.adv.probe_cbl)};
}

Outcome criterion_steerability(const GeneratorArms& g) {
  const double gap = g.adv.steer - g.noadv.steer;
  return {gap >= 0.15 && g.adv.steer >= 0.80, "oracle steerability adversarial " + fmt(g.adv.steer) + ", w/o ADV " +
                                                  fmt(g.noadv.steer) + ", gap " + fmt(gap)};
}

Outcome criterion_perplexity(const GeneratorArms& g) {
  const double ratio = g.ppl_steered / g.ppl_free;
  return {ratio <= 2.0, "reference-LM perplexity steered " + fmt(g.ppl_steered) + ", unsteered " + fmt(g.ppl_free) +
                            ", ratio " + fmt(ratio) + " (generator arms: " + fmt(g.seconds, 3) + " s)"};
}

// --------------------------------------------------------------- criterion 10
double grad_abs_sum(GenerativeModel& m, const std::string& prefix) {
  double s = 0.0;
  for (Param* p : m.params.list(prefix))
    for (float g : p->grad.storage()) s += std::fabs(g);
  return s;
}

Outcome criterion_routing(const Corpus& c) {
  const ConceptSet cs = singleton_concepts(c.categories);
  ModelConfig mc = desk_config(c.vocab);
  mc.d_model = 32;
  mc.layers = 1;
  mc.context = 32;
  std::vector<std::string> texts(c.train_texts.begin(), c.train_texts.begin() + 16);
  const auto seqs = encode_lm_sequences(c.vocab, texts, mc.context);
  const auto labels = concept_labels_for(cs, std::span(c.train_labels).subspan(0, 16));
  std::vector<std::size_t> idx(16);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const GenBatch batch = make_gen_batch(seqs, labels, idx, false);

  double d_to_unsup = 0.0, e_to_probe = 0.0, worst_sum = 0.0;
  bool signal = true;
  for (bool adv_backbone : {false, true}) {
    GeneratorOptions o;
    o.adv_backbone = adv_backbone;
    o.lambda = 1e-3;
    GenerativeModel m(mc, c.vocab, cs, o);
    {
      zero_grads(m.params.list());
      Tape tape;
      const GenLossTerms t = gen_losses(tape, m, batch);
      tape.backward(t.detection);
      d_to_unsup += grad_abs_sum(m, "unsup.") + grad_abs_sum(m, "backbone.");
      signal = signal && grad_abs_sum(m, "probe.") > 0.0;
    }
    {
      zero_grads(m.params.list());
      Tape tape;
      const GenLossTerms t = gen_losses(tape, m, batch);
      tape.backward(t.entropy);
      e_to_probe += grad_abs_sum(m, "probe.");
      signal = signal && grad_abs_sum(m, "unsup.") > 0.0;
    }
    for (bool adv : {true, false}) {
      GeneratorOptions ob = o;
      ob.adversarial = adv;
      GenerativeModel mb(mc, c.vocab, cs, ob);
      Tape tape;
      const LossBreakdown lb = read_breakdown(tape, gen_losses(tape, mb, batch), batch.inputs.tokens());
      worst_sum = std::max(worst_sum, std::fabs(lb.concept_loss + lb.token + lb.entropy + lb.detection + lb.reg - lb.total));
    }
  }
  Outcome o;
  o.pass = d_to_unsup == 0.0 && e_to_probe == 0.0 && worst_sum <= 1e-6 && signal;
  o.detail = "|dL_d/dtheta3| = " + fmt(d_to_unsup) + ", |dL_e/dtheta5| = " + fmt(e_to_probe) +
             ", breakdown residual " + fmt(worst_sum) + (signal ? "" : ", a routed gradient was unexpectedly zero");
  return o;
}

// --------------------------------------------------------------- criterion 11
bool same_params(const ParamStore& a, const ParamStore& b) {
  const auto &pa = a.all(), &pb = b.all();
  if (pa.size() != pb.size()) return false;
  for (auto ia = pa.begin(), ib = pb.begin(); ia != pa.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !(ia->second.value == ib->second.value)) return false;
  }
  return true;
}

Outcome criterion_reproducibility(const Corpus& c, const ClassifierModel& trained_cls) {
  const fs::path dir = fs::temp_directory_path() / ("cbllm_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  std::vector<std::string> problems;

  // Determinism: two identical small runs give identical parameters.
  ModelConfig mc = desk_config(c.vocab);
  mc.d_model = 32;
  mc.layers = 1;
  mc.context = 32;
  std::vector<std::string> texts(c.train_texts.begin(), c.train_texts.begin() + 200);
  std::vector<int> labels(c.train_labels.begin(), c.train_labels.begin() + 200);
  HashTfidfBackend backend(texts, 1024);
  const ConceptScores acc = acc_correct(concept_scores(backend, c.concepts, texts), labels, c.concepts);
  ClassifierTrainConfig tc;
  tc.epochs = 1;
  auto train_cls = [&] {
    ClassifierModel m(mc, c.vocab, c.concepts);
    train_cbl(m, texts, acc, tc);
    train_final(m, m.activations(texts), labels, FinalTrainConfig{});
    return m;
  };
  if (!same_params(train_cls().params, train_cls().params)) problems.push_back("classifier training not deterministic");

  const ConceptSet singles = singleton_concepts(c.categories);
  GenTrainConfig gc;
  gc.epochs = 1;
  auto train_gen = [&] {
    GenerativeModel m(mc, c.vocab, singles, GeneratorOptions{});
    train_generator(m, texts, labels, gc);
    return m;
  };
  GenerativeModel g1 = train_gen(), g2 = train_gen();
  if (!same_params(g1.params, g2.params)) problems.push_back("generator training not deterministic");

  // Bit-exact save/load of the trained news classifier.
  const std::string cls_path = (dir / "cls.bin").string();
  save_classifier(cls_path, trained_cls);
  const ClassifierModel loaded = load_classifier(cls_path);
  if (!same_params(trained_cls.params, loaded.params)) problems.push_back("classifier parameters changed on load");
  const auto p0 = trained_cls.predict(c.test_texts), p1 = loaded.predict(c.test_texts);
  for (std::size_t i = 0; i < p0.size(); ++i) {
    if (p0[i].logits != p1[i].logits) {
      problems.push_back("classifier logits changed on load");
      break;
    }
  }

  // Inference checkpoints omit theta_5; the research form keeps it.
  const std::string gen_path = (dir / "gen.bin").string(), gen_probe_path = (dir / "gen_probe.bin").string();
  save_generator(gen_path, g1);
  save_generator(gen_probe_path, g1, /*with_probe=*/true);
  const GenerativeModel gi = load_generator(gen_path), gp = load_generator(gen_probe_path);
  if (gi.has_probe()) problems.push_back("inference checkpoint contains theta_5");
  if (!gp.has_probe() || !same_params(g1.params, gp.params)) problems.push_back("research checkpoint not bit-exact");
  GenerateOptions go;
  go.seed = 11;
  go.max_tokens = 30;
  if (generate(g1, {}, {}, go).tokens != generate(gi, {}, {}, go).tokens) {
    problems.push_back("generation differs after load");
  }
  std::error_code ec;
  fs::remove_all(dir, ec);

  Outcome o;
  o.pass = problems.empty();
  if (o.pass) {
    o.detail = "repeat runs identical, save/load bit-exact, inference checkpoint omits theta_5";
  } else {
    for (const auto& p : problems) o.detail += (o.detail.empty() ? "" : "; ") + p;
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CB-LLM acceptance harness (criteria 1-11)"};
  std::string data_dir = CBLLM_DEFAULT_DATA_DIR;
  std::vector<int> only;
  app.add_option("--data-dir", data_dir, "Directory holding synth/ and concepts/");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](std::initializer_list<int> ids) {
    if (only.empty()) return true;
    for (int id : ids)
      if (std::find(only.begin(), only.end(), id) != only.end()) return true;
    return false;
  };

  int failures = 0;
  auto report = [&](int id, const std::string& title, const Outcome& o) {
    std::cout << "criterion " << id << " [" << (o.pass ? "PASS" : "FAIL") << "] " << title << ": " << o.detail
              << std::endl;
    failures += !o.pass;
  };
  auto guarded = [&](int id, const std::string& title, const std::function<Outcome()>& fn) {
    try {
      report(id, title, fn());
    } catch (const std::exception& e) {
      report(id, title, {false, std::string("exception: ") + e.what()});
    }
  };

  const auto t0 = Clock::now();
  try {
    const fs::path dd(data_dir);
    if (wanted({1})) guarded(1, "finite-difference gradients", criterion_gradients);
    std::optional<Corpus> news;
    if (wanted({2, 3, 4, 6, 7, 8, 9, 10, 11})) news = load_corpus(dd, "news");
    if (wanted({2})) guarded(2, "ACC matches Eq. 2", [&] { return criterion_acc(*news); });

    std::optional<ClassifierArms> arms;
    if (wanted({3, 4, 11})) {
      try {
        arms = train_classifier_arms(*news, 0);
      } catch (const std::exception& e) {
        std::cout << "classifier arms failed: " << e.what() << std::endl;
      }
    }
    auto need_arms = [&]() -> const ClassifierArms& {
      if (!arms) throw cbllm::Error("classifier arms unavailable");
      return *arms;
    };
    if (wanted({3})) guarded(3, "classification accuracy", [&] { return criterion_classification(*news, need_arms()); });
    if (wanted({4})) guarded(4, "sparsity sweep", [&] { return criterion_sparsity(*news, need_arms()); });
    if (wanted({5})) guarded(5, "unlearning", [&] { return criterion_unlearning(load_corpus(dd, "sentiment")); });

    std::optional<GeneratorArms> gen;
    if (wanted({6, 7, 8, 9})) {
      try {
        gen = train_generator_arms(*news);
      } catch (const std::exception& e) {
        std::cout << "generator arms failed: " << e.what() << std::endl;
      }
    }
    auto need_gen = [&]() -> const GeneratorArms& {
      if (!gen) throw cbllm::Error("generator arms unavailable");
      return *gen;
    };
    if (wanted({6})) guarded(6, "concept detection", [&] { return criterion_detection(need_gen()); });
    if (wanted({7})) guarded(7, "disentanglement", [&] { return criterion_disentangle(need_gen()); });
    if (wanted({8})) guarded(8, "steerability", [&] { return criterion_steerability(need_gen()); });
    if (wanted({9})) guarded(9, "steered perplexity", [&] { return criterion_perplexity(need_gen()); });
    if (wanted({10})) guarded(10, "gradient routing and loss breakdown", [&] { return criterion_routing(*news); });
    if (wanted({11})) {
      guarded(11, "determinism and checkpoints", [&] { return criterion_reproducibility(*news, need_arms().acc_model); });
    }
  } catch (const std::exception& e) {
    std::cout << "acceptance harness aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " criterion/criteria FAILED") << " in "
            << fmt(seconds_since(t0), 4) << " s" << std::endl;
  return failures == 0 ? 0 : 1;
}
