#include "cbllm/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "cbllm/acs.hpp"
#include "cbllm/checkpoint.hpp"
#include "cbllm/errors.hpp"
#include "cbllm/eval.hpp"
#include "cbllm/server.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

using nlohmann::json;

namespace {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- flags ----

struct Common {
  std::string config;
  std::string out;
  std::string data_dir;
  std::uint64_t seed = 0;
};

struct DataFlags {
  std::string spec;
  std::string corpus;
  std::vector<std::string> categories;
};

// Defaults are the backbone module's (ModelConfig); the acceptance harness
// uses a smaller desk-scale shape.
struct ModelFlags {
  std::size_t d_model = ModelConfig{}.d_model;
  std::size_t layers = ModelConfig{}.layers;
  std::size_t heads = ModelConfig{}.heads;
  std::size_t context = ModelConfig{}.context;
  std::size_t max_vocab = 5000;
};

struct BackendFlags {
  std::string backend = "hash";
  std::string embeddings;
  std::size_t hash_dim = 4096;
};

struct Flags {
  Common common;
  DataFlags data;
  ModelFlags model;
  BackendFlags backend;
  ClassifierTrainConfig cls;
  FinalTrainConfig final_cfg;
  GeneratorOptions gen;
  GenTrainConfig gen_train;
  GenerateOptions sampler;

  std::string corpus_out, concepts, scores, model_path, baseline, reference_lm, text, concept_id, save, prompt,
      metric, ablation, probe = "oracle", probe_model, reference, csv, classifier, generator, host = "127.0.0.1",
      mask_path, mask, concept_loss_at = "all";
  std::vector<std::string> intervene, inject;
  bool no_acc = false, no_adversarial = false, with_probe = false, only = false;
  std::optional<std::size_t> neuron;
  std::size_t r = 5, top = 10, n_per_category = 50, inject_count = 200, inject_extra = 2;
  int inject_category = 0, port = 8080;
  float value = 100.0f;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.common.config, "JSON config file (flags win over its keys)");
  sub->add_option("--out", f.common.out, "Write the result JSON here instead of stdout");
  sub->add_option("--data-dir", f.common.data_dir, "Directory for relative data paths (default $CBLLM_DATA_DIR)");
  sub->add_option("--seed", f.common.seed, "Seed for every random choice of the command");
}

void add_data(CLI::App* sub, Flags& f) {
  sub->add_option("--spec", f.data.spec, "Synthetic corpus spec (generated in-process)");
  sub->add_option("--corpus", f.data.corpus, "JSONL corpus {text, label, split?}");
  sub->add_option("--categories", f.data.categories, "Category names of a --corpus (in label order)")->delimiter(',');
}

void add_model(CLI::App* sub, Flags& f) {
  sub->add_option("--d-model", f.model.d_model, "Backbone width");
  sub->add_option("--layers", f.model.layers, "Transformer blocks");
  sub->add_option("--heads", f.model.heads, "Attention heads");
  sub->add_option("--context", f.model.context, "Context length in tokens");
  sub->add_option("--max-vocab", f.model.max_vocab, "Vocabulary size cap (incl. reserved tokens)");
}

void add_backend(CLI::App* sub, Flags& f) {
  sub->add_option("--backend", f.backend.backend, "Embedding backend for concept scores: hash | file")
      ->check(CLI::IsMember({"hash", "file"}));
  sub->add_option("--embeddings", f.backend.embeddings, "Embedding manifest for --backend file");
  sub->add_option("--hash-dim", f.backend.hash_dim, "Buckets of the hashed TF-IDF backend");
  sub->add_flag("--no-acc", f.no_acc, "Skip Automatic Concept Correction (ablation arm)");
}

void add_sampler(CLI::App* sub, Flags& f) {
  sub->add_option("--prompt", f.prompt, "Prompt text (default: generate from <bos>)");
  sub->add_option("--max-tokens", f.sampler.max_tokens, "Tokens to emit at most");
  sub->add_option("--temperature", f.sampler.temperature, "Sampling temperature (0 = greedy)");
}

// Applies a flat JSON config to the options of `sub` that were not given on
// the command line.
void apply_config(CLI::App* sub, const std::string& path) {
  json cfg;
  try {
    cfg = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError("config '" + path + "': " + e.what());
  }
  if (!cfg.is_object()) throw ValidationError("config '" + path + "' must be a JSON object");
  for (const auto& [key, v] : cfg.items()) {
    if (key == "config") throw ValidationError("config '" + path + "': nested 'config' is not allowed");
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (!opt) throw ValidationError("config '" + path + "': unknown key '" + key + "' for command '" + sub->get_name() + "'");
    if (opt->count() > 0) continue;  // the flag wins
    auto text = [](const json& e) { return e.is_string() ? e.get<std::string>() : e.dump(); };
    if (v.is_array()) {
      for (const json& e : v) opt->add_result(text(e));
    } else {
      opt->add_result(text(v));
    }
    try {
      opt->run_callback();
    } catch (const CLI::ParseError& e) {
      throw ValidationError("config '" + path + "': key '" + key + "': " + e.what());
    }
  }
}

// ------------------------------------------------------------ utilities ----

struct Context {
  Flags& f;
  std::ostream& out;
  std::ostream& err;
  bool seed_given = false;

  std::string data_dir() const {
    if (!f.common.data_dir.empty()) return f.common.data_dir;
    if (const char* env = std::getenv("CBLLM_DATA_DIR"); env && *env) return env;
    return CBLLM_DEFAULT_DATA_DIR;
  }

  // Input paths resolve as given, else under the data directory.
  std::string input(const std::string& path, const char* what) const {
    if (path.empty()) throw UsageError(std::string("missing required input: ") + what);
    if (fs::exists(path)) return path;
    const fs::path alt = fs::path(data_dir()) / path;
    if (fs::exists(alt)) return alt.string();
    throw ValidationError(std::string(what) + " '" + path + "' does not exist");
  }

  void require(const std::string& value, const char* flag) const {
    if (value.empty()) throw UsageError(std::string("missing required flag ") + flag);
  }

  void log(const std::string& line) const { err << line << std::endl; }

  void emit(const json& result) const {
    const std::string text = result.dump(2) + "\n";
    if (f.common.out.empty()) {
      out << text;
    } else {
      write_file(f.common.out, text);
      log("result written to " + f.common.out);
    }
  }
};

struct Data {
  Dataset all;
  std::optional<SynthSpec> spec;

  // Tagged train split, or every sample when no split tags are present.
  Dataset train() const {
    Dataset t = all.subset("train");
    return t.samples.empty() ? all.subset("") : t;
  }
  Dataset test() const { return all.subset("test"); }
};

Data load_data(const Context& cx, const std::vector<std::string>& known_categories = {}) {
  const DataFlags& d = cx.f.data;
  if (!d.spec.empty() && !d.corpus.empty()) throw UsageError("give either --spec or --corpus, not both");
  Data data;
  if (!d.spec.empty()) {
    // The corpus follows the spec's own seed so every command sees the same
    // data; only `synth --seed` re-draws it.
    SynthSpec spec = load_synth_spec(cx.input(d.spec, "synth spec"));
    data.all = synth_generate(spec);
    data.spec = std::move(spec);
    return data;
  }
  if (d.corpus.empty()) throw UsageError("a dataset is required: --spec FILE or --corpus FILE");
  std::vector<std::string> names = d.categories.empty() ? known_categories : d.categories;
  if (names.empty()) throw UsageError("--corpus needs --categories (or a concept set / model that names them)");
  data.all.category_names = names;
  data.all.samples = load_jsonl(cx.input(d.corpus, "corpus"), names.size());
  if (data.all.samples.empty()) throw ValidationError("corpus '" + d.corpus + "' is empty");
  return data;
}

ModelConfig model_config(const Context& cx, const Vocab& vocab) {
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.d_model = cx.f.model.d_model;
  c.layers = cx.f.model.layers;
  c.heads = cx.f.model.heads;
  c.context = cx.f.model.context;
  c.seed = cx.f.common.seed;
  c.validate();
  return c;
}

std::unique_ptr<EmbeddingBackend> make_backend(const Context& cx, std::span<const std::string> fit_texts) {
  if (cx.f.backend.backend == "file") {
    return std::make_unique<FileBackend>(cx.input(cx.f.backend.embeddings, "embedding manifest (--embeddings)"));
  }
  return std::make_unique<HashTfidfBackend>(fit_texts, cx.f.backend.hash_dim, cx.f.common.seed);
}

ConceptScores score_texts(const Context& cx, const ConceptSet& concepts, const Dataset& train) {
  const auto texts = train.texts();
  auto backend = make_backend(cx, texts);
  ConceptScores raw = concept_scores(*backend, concepts, texts);
  if (cx.f.no_acc) return raw;
  const auto labels = train.labels();
  return acc_correct(raw, labels, concepts);
}

double sparsity(const Tensor& w) {
  std::size_t small = 0;
  for (float x : w.span()) small += std::fabs(x) < 1e-3f;
  return double(small) / double(w.size());
}

Intervention parse_intervention(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw UsageError("--intervene expects NEURON=VALUE, got '" + s + "'");
  try {
    std::size_t used = 0;
    const long long j = std::stoll(s.substr(0, eq), &used);
    if (used != eq || j < 0) throw std::invalid_argument("neuron");
    const std::string vs = s.substr(eq + 1);
    const float v = std::stof(vs, &used);
    if (used != vs.size()) throw std::invalid_argument("value");
    return {static_cast<std::size_t>(j), v};
  } catch (const std::logic_error&) {
    throw UsageError("--intervene expects NEURON=VALUE, got '" + s + "'");
  }
}

int parse_concept(const ConceptSet& concepts, const std::string& s) {
  int j = concepts.find(s);
  if (j >= 0) return j;
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size() && v >= 0 && static_cast<std::size_t>(v) < concepts.k()) return static_cast<int>(v);
  } catch (const std::logic_error&) {
  }
  throw LookupError("unknown concept '" + s + "'");
}

std::vector<int> concept_labels_or_throw(const GenerativeModel& m, const Dataset& d) {
  const auto labels = d.labels();
  return concept_labels_for(m.concepts, labels);
}

// ------------------------------------------------------------- commands ----

int cmd_synth(Context& cx) {
  cx.require(cx.f.corpus_out, "--corpus");
  SynthSpec spec = load_synth_spec(cx.input(cx.f.data.spec, "synth spec (--spec)"));
  if (cx.seed_given) spec.seed = cx.f.common.seed;
  Dataset d = synth_generate(spec);
  save_jsonl(cx.f.corpus_out, d.samples);
  cx.log("wrote " + std::to_string(d.samples.size()) + " samples to " + cx.f.corpus_out);
  cx.emit({{"command", "synth"},
           {"corpus", cx.f.corpus_out},
           {"categories", d.category_names},
           {"train", d.subset("train").samples.size()},
           {"test", d.subset("test").samples.size()},
           {"seed", spec.seed},
           {"corpus_hash", hex64(fnv1a(read_file(cx.f.corpus_out)))}});
  return 0;
}

int cmd_score(Context& cx) {
  cx.require(cx.f.scores, "--scores");
  ConceptSet concepts = load_concept_set(cx.input(cx.f.concepts, "concept set (--concepts)"));
  Data data = load_data(cx, concepts.category_names());
  if (data.all.n_categories() != concepts.n()) throw ValidationError("dataset and concept set disagree on the category count");
  Dataset train = data.train();
  ConceptScores s = score_texts(cx, concepts, train);
  save_scores(cx.f.scores, s);
  std::size_t nonzero = 0;
  for (float x : s.scores.span()) nonzero += x != 0.0f;
  cx.log(std::string("scored ") + std::to_string(s.scores.rows()) + " samples x " + std::to_string(s.scores.cols()) +
         " concepts" + (s.corrected ? " (ACC)" : " (uncorrected)"));
  cx.emit({{"command", "score"},
           {"scores", cx.f.scores},
           {"rows", s.scores.rows()},
           {"k", s.scores.cols()},
           {"corrected", s.corrected},
           {"backend", s.backend},
           {"nonzero_fraction", double(nonzero) / double(s.scores.size())}});
  return 0;
}

int cmd_train_cls(Context& cx) {
  Flags& f = cx.f;
  cx.require(f.model_path, "--model");
  ConceptSet concepts = load_concept_set(cx.input(f.concepts, "concept set (--concepts)"));
  Data data = load_data(cx, concepts.category_names());
  if (data.all.n_categories() != concepts.n()) throw ValidationError("dataset and concept set disagree on the category count");
  if (!f.scores.empty()) cx.input(f.scores, "score matrix (--scores)");
  f.final_cfg.validate();
  Dataset train = data.train(), test = data.test();
  const auto train_texts = train.texts();
  const auto train_labels = train.labels();

  ConceptScores scores = f.scores.empty() ? score_texts(cx, concepts, train) : load_scores(cx.input(f.scores, "scores"));
  if (scores.scores.rows() != train.samples.size() || scores.scores.cols() != concepts.k()) {
    throw ValidationError("score matrix is " + std::to_string(scores.scores.rows()) + " x " +
                          std::to_string(scores.scores.cols()) + ", expected " + std::to_string(train.samples.size()) +
                          " x " + std::to_string(concepts.k()) + " (train split x concepts)");
  }
  if (!scores.corrected) cx.log("note: training on uncorrected concept scores (the w/o-ACC ablation arm)");

  Vocab vocab = build_vocab(train_texts, f.model.max_vocab);
  ClassifierModel model(model_config(cx, vocab), vocab, concepts);
  f.cls.seed = f.common.seed;
  cx.log("step 4: training the concept bottleneck layer");
  auto trace = train_cbl(model, train_texts, scores, f.cls, /*allow_uncorrected=*/!scores.corrected);
  for (std::size_t e = 0; e < trace.size(); ++e) cx.log("  epoch " + std::to_string(e + 1) + " mean cosine " + std::to_string(trace[e]));
  cx.log("step 5: sparse final layer");
  const Tensor acts = model.activations(train_texts);
  auto objective = train_final(model, acts, train_labels, f.final_cfg);
  cx.log("  " + std::to_string(objective.size()) + " iterations, objective " + std::to_string(objective.back()));

  json result = {{"command", "train-cls"},
                 {"model", f.model_path},
                 {"acc", scores.corrected},
                 {"cbl_cosine", trace},
                 {"final_objective", objective.back()},
                 {"final_iterations", objective.size()},
                 {"sparsity", sparsity(model.params.at("final.w").value)},
                 {"train_accuracy", accuracy(model.predict(train_texts), train_labels)}};
  if (!test.samples.empty()) {
    const auto test_texts = test.texts();
    const auto test_labels = test.labels();
    result["test_accuracy"] = accuracy(model.predict(test_texts), test_labels);
  }
  model.meta = {{"acc", scores.corrected},
                {"train", f.cls.to_json()},
                {"final", f.final_cfg.to_json()},
                {"backend", scores.backend}};
  save_classifier(f.model_path, model);

  if (!f.baseline.empty()) {
    cx.log("training the black-box baseline");
    BaselineClassifier base(model.config, vocab, concepts.n());
    base.train(train_texts, train_labels, f.cls);
    base.meta = {{"train", f.cls.to_json()}};
    save_baseline(f.baseline, base);
    result["baseline"] = f.baseline;
    if (!test.samples.empty()) {
      const auto test_texts = test.texts();
      const auto test_labels = test.labels();
      result["baseline_test_accuracy"] = accuracy(base.predict(test_texts), test_labels);
    }
  }
  cx.emit(result);
  return 0;
}

int cmd_explain(Context& cx) {
  ClassifierModel model = load_classifier(cx.input(cx.f.model_path, "classifier (--model)"));
  if (cx.f.r == 0) throw UsageError("--r must be >= 1");
  if (split_words(cx.f.text).empty()) throw UsageError("--text is empty");
  cx.emit(model.explain(cx.f.text, cx.f.r).to_json());
  return 0;
}

int cmd_unlearn(Context& cx) {
  Flags& f = cx.f;
  ClassifierModel model = load_classifier(cx.input(f.model_path, "classifier (--model)"));
  cx.require(f.concept_id, "--concept");
  const int j = parse_concept(model.concepts, f.concept_id);

  std::vector<std::string> texts;
  json scenario = nullptr;
  if (!f.inject.empty()) {
    Data data = load_data(cx, model.concepts.category_names());
    if (!data.spec) throw UsageError("--inject needs a synthetic --spec");
    if (f.inject_category < 0 || static_cast<std::size_t>(f.inject_category) >= data.spec->categories.size()) {
      throw ValidationError("--inject-category out of range");
    }
    auto mixed = synth_mixed(*data.spec, f.inject_category, f.inject, f.inject_count, f.inject_extra, f.common.seed);
    for (auto& s : mixed) texts.push_back(std::move(s.text));
    scenario = {{"category", f.inject_category}, {"inject", f.inject}, {"count", f.inject_count}, {"extra", f.inject_extra}};
  } else if (!f.data.spec.empty() || !f.data.corpus.empty()) {
    Data data = load_data(cx, model.concepts.category_names());
    Dataset eval = data.test().samples.empty() ? data.train() : data.test();
    texts = eval.texts();
  }

  json result = {{"command", "unlearn"}, {"concept", model.concepts.concept_at(static_cast<std::size_t>(j)).text}, {"index", j}};
  if (!texts.empty()) {
    UnlearningReport rep = unlearning_report(model, texts, static_cast<std::size_t>(j));
    cx.log("unlearning flipped " + std::to_string(rep.dominated_flipped) + " of " + std::to_string(rep.dominated.size()) +
           " samples dominated by the concept");
    result["report"] = rep.to_json();
    result["scenario"] = scenario;
  }
  model.unlearn(static_cast<std::size_t>(j));
  json mask = json::array();
  for (auto m : model.mask) mask.push_back(m != 0);
  result["mask"] = mask;
  if (!f.save.empty()) {
    save_classifier(f.save, model);
    result["saved"] = f.save;
  }
  cx.emit(result);
  return 0;
}

int cmd_train_gen(Context& cx) {
  Flags& f = cx.f;
  cx.require(f.model_path, "--model");
  Data data = load_data(cx);
  Dataset train = data.train(), test = data.test();
  const auto train_texts = train.texts();
  const auto train_labels = train.labels();

  GeneratorOptions opts = f.gen;
  opts.adversarial = !f.no_adversarial;
  if (f.concept_loss_at != "all" && f.concept_loss_at != "last") throw UsageError("--concept-loss-at must be all or last");
  opts.concept_loss_last_only = f.concept_loss_at == "last";
  opts.validate();
  f.gen_train.seed = f.common.seed;

  Vocab vocab = build_vocab(train_texts, f.model.max_vocab);
  const ModelConfig cfg = model_config(cx, vocab);
  GenerativeModel model(cfg, vocab, singleton_concepts(data.all.category_names), opts);
  cx.log(std::string("training CB-LLM (generation), ") + (opts.adversarial ? "adversarial" : "non-adversarial") +
         ", k=" + std::to_string(model.k()) + " u=" + std::to_string(model.u()));
  auto epochs = train_generator(model, train_texts, train_labels, f.gen_train, [&](std::size_t e, const LossBreakdown& b) {
    cx.log("  epoch " + std::to_string(e + 1) + " " + b.to_json().dump());
  });
  json trace = json::array();
  for (const auto& b : epochs) trace.push_back(b.to_json());
  model.meta = {{"train", f.gen_train.to_json()}, {"dataset", data.all.category_names}};

  json result = {{"command", "train-gen"},
                 {"model", f.model_path},
                 {"options", opts.to_json()},
                 {"epochs", trace},
                 {"with_probe", f.with_probe}};
  if (!test.samples.empty()) {
    const auto texts = test.texts();
    result["test_concept_accuracy"] = concept_detection_accuracy(model, texts, test.labels()).to_json();
  }
  save_generator(f.model_path, model, f.with_probe);

  if (!f.reference_lm.empty()) {
    cx.log("training the reference LM");
    ReferenceLM ref(cfg, vocab);
    auto losses = ref.train(train_texts, f.gen_train);
    ref.meta = {{"train", f.gen_train.to_json()}};
    save_reference_lm(f.reference_lm, ref);
    result["reference_lm"] = f.reference_lm;
    result["reference_lm_loss"] = losses;
  }
  cx.emit(result);
  return 0;
}

json run_generation(Context& cx, const GenerativeModel& model, const InterventionSpec& spec) {
  GenerateOptions opts = cx.f.sampler;
  opts.seed = cx.f.common.seed;
  const std::vector<int> prompt = encode(cx.f.prompt, model.vocab);
  GenerationResult res = generate(model, prompt, spec, opts);
  json transcript = generation_transcript(model, res, opts);
  cx.log("generated: " + res.text(model.vocab));
  return transcript;
}

int cmd_generate(Context& cx) {
  GenerativeModel model = load_generator(cx.input(cx.f.model_path, "generator (--model)"));
  InterventionSpec spec;
  for (const auto& s : cx.f.intervene) spec.push_back(parse_intervention(s));
  validate_interventions(spec, model.k());
  cx.emit(run_generation(cx, model, spec));
  return 0;
}

int cmd_steer(Context& cx) {
  if (!cx.f.neuron) throw UsageError("missing required flag --neuron");
  const std::size_t neuron = *cx.f.neuron;
  GenerativeModel model = load_generator(cx.input(cx.f.model_path, "generator (--model)"));
  if (neuron >= model.k()) {
    throw ValidationError("--neuron " + std::to_string(neuron) + " out of range (k = " + std::to_string(model.k()) + ")");
  }
  InterventionSpec spec = cx.f.only ? InterventionSpec{{neuron, cx.f.value}} : steer_towards(neuron, model.k(), cx.f.value);
  validate_interventions(spec, model.k());
  json t = run_generation(cx, model, spec);
  t["steer"] = {{"neuron", neuron},
                {"value", cx.f.value},
                {"concept", model.concepts.concept_at(neuron).text},
                {"others_zeroed", !cx.f.only}};
  cx.emit(t);
  return 0;
}

// One metric for one checkpoint.
MetricsReport evaluate(Context& cx, const std::string& metric, const std::string& model_path) {
  Flags& f = cx.f;
  MetricsReport rep;
  rep.context = {{"metric", metric}, {"model", model_path}, {"seed", f.common.seed}};
  const std::string path = cx.input(model_path, "model");
  const std::string kind = checkpoint_kind(path);

  if (metric == "classification") {
    std::optional<ClassifierModel> cbm;
    std::optional<BaselineClassifier> base;
    std::vector<std::string> names;
    if (kind == "classifier") {
      cbm = load_classifier(path);
      names = cbm->concepts.category_names();
    } else if (kind == "baseline") {
      base = load_baseline(path);
    } else {
      throw ValidationError("classification needs a classifier or baseline checkpoint, got " + kind);
    }
    Data data = load_data(cx, names);
    Dataset test = data.test().samples.empty() ? data.train() : data.test();
    const auto texts = test.texts();
    const auto labels = test.labels();
    const auto preds = cbm ? cbm->predict(texts) : base->predict(texts);
    rep.set("accuracy", accuracy(preds, labels), texts.size());
    if (cbm) rep.set("sparsity", sparsity(cbm->params.at("final.w").value), cbm->params.at("final.w").value.size());
    return rep;
  }

  if (kind != "generator") throw ValidationError("metric '" + metric + "' needs a generator checkpoint, got " + kind);
  GenerativeModel model = load_generator(path);
  rep.context["adversarial"] = model.options.adversarial;

  if (metric == "detection" || metric == "probe") {
    Data data = load_data(cx, model.concepts.category_names());
    Dataset train = data.train(), test = data.test();
    if (test.samples.empty()) throw ValidationError("metric '" + metric + "' needs a test split");
    const auto test_texts = test.texts();
    const auto test_concepts = concept_labels_or_throw(model, test);
    FinalFeatures fte = model.final_features(test_texts);
    const Metric det = concept_detection_accuracy(fte.cbl, test_concepts);
    rep.set("concept_accuracy", det.value, det.count);
    if (metric == "probe") {
      const auto train_texts = train.texts();
      FinalFeatures ftr = model.final_features(train_texts);
      const auto train_concepts = concept_labels_or_throw(model, train);
      const Metric p = probe_accuracy(ftr.unsup, train_concepts, fte.unsup, test_concepts, model.k(), f.common.seed);
      rep.set("unsup_probe_accuracy", p.value, p.count, "fresh linear probe on frozen f_unsup (final position)");
    }
    return rep;
  }

  if (metric == "steerability" || metric == "perplexity") {
    std::unique_ptr<TextCategorizer> probe;
    std::optional<BaselineClassifier> probe_model;
    if (f.probe == "oracle") {
      Data data = load_data(cx, model.concepts.category_names());
      if (!data.spec) throw UsageError("--probe oracle needs the synthetic --spec");
      probe = std::make_unique<MarkerOracle>(*data.spec);
    } else if (f.probe == "learned") {
      probe_model = load_baseline(cx.input(f.probe_model, "probe classifier (--probe-model)"));
      probe = std::make_unique<LearnedProbe>(*probe_model);
    } else {
      throw UsageError("--probe must be oracle or learned");
    }
    if (probe->n_categories() != model.k()) throw ValidationError("probe and generator disagree on the category count");
    SteerabilityResult st = steerability_score(model, *probe, f.n_per_category, f.sampler.max_tokens, f.common.seed, f.value,
                                               f.sampler.temperature);
    rep.set("steerability", st.mean, st.per_category.size() * st.n_per_category);
    for (std::size_t c = 0; c < st.per_category.size(); ++c) {
      rep.set("steerability/" + model.concepts.concept_at(c).text, st.per_category[c], st.n_per_category);
    }
    rep.context["probe"] = probe->describe();
    if (metric == "perplexity") {
      ReferenceLM ref = load_reference_lm(cx.input(f.reference, "reference LM (--reference)"));
      std::vector<std::vector<int>> steered, unsteered;
      for (const auto& per : st.samples)
        for (const auto& s : per) steered.push_back(s);
      for (std::size_t i = 0; i < steered.size(); ++i) {
        GenerateOptions go = f.sampler;
        go.seed = f.common.seed + 1000003 + i;
        unsteered.push_back(generate(model, {}, {}, go).tokens);
      }
      const Metric ps = perplexity(ref, steered, model.vocab);
      const Metric pu = perplexity(ref, unsteered, model.vocab);
      rep.set("perplexity_steered", ps.value, ps.count);
      rep.set("perplexity_unsteered", pu.value, pu.count);
      rep.set("perplexity_ratio", ps.value / pu.value, steered.size());
    }
    return rep;
  }
  throw UsageError("unknown metric '" + metric + "' (classification | detection | probe | steerability | perplexity)");
}

int cmd_eval(Context& cx) {
  Flags& f = cx.f;
  cx.require(f.metric, "--metric");
  cx.require(f.model_path, "--model");
  if (!f.ablation.empty()) cx.input(f.ablation, "ablation checkpoint (--ablation)");
  cx.log("evaluating " + f.metric + " on " + f.model_path);
  MetricsReport main = evaluate(cx, f.metric, f.model_path);
  json result = {{"command", "eval"}, {"metric", f.metric}, {"model", main.to_json()}};
  std::string csv = main.to_csv();
  if (!f.ablation.empty()) {
    cx.log("evaluating " + f.metric + " on " + f.ablation);
    MetricsReport abl = evaluate(cx, f.metric, f.ablation);
    json delta = json::object();
    for (const auto& [name, m] : main.metrics) {
      if (abl.metrics.count(name)) delta[name] = m.value - abl.metrics.at(name).value;
    }
    result["ablation"] = abl.to_json();
    result["delta"] = delta;
    for (const auto& [name, d] : delta.items()) cx.log("  delta " + name + " = " + std::to_string(d.get<double>()));
  }
  if (!f.csv.empty()) write_file(f.csv, csv);
  cx.emit(result);
  return 0;
}

int cmd_report_neurons(Context& cx) {
  Flags& f = cx.f;
  const std::string path = cx.input(f.model_path, "model (--model)");
  const std::string kind = checkpoint_kind(path);
  json result = {{"command", "report-neurons"}, {"kind", kind}};
  if (kind == "generator") {
    GenerativeModel m = load_generator(path);
    json neurons = json::array();
    for (std::size_t j = 0; j < m.k(); ++j) {
      json toks = json::array();
      for (const auto& t : top_tokens_for_neuron(m, j, f.top)) toks.push_back({{"token", t.token}, {"id", t.id}, {"weight", t.weight}});
      neurons.push_back({{"neuron", j}, {"concept", m.concepts.concept_at(j).text}, {"top_tokens", toks}});
    }
    result["neurons"] = neurons;
  } else if (kind == "classifier") {
    ClassifierModel m = load_classifier(path);
    result["class_connections"] = class_connection_report(m, f.top);
    if (!f.data.spec.empty() || !f.data.corpus.empty()) {
      Data data = load_data(cx, m.concepts.category_names());
      Dataset d = data.test().samples.empty() ? data.train() : data.test();
      const auto texts = d.texts();
      const Tensor acts = m.activations(texts);
      json neurons = json::array();
      for (std::size_t j = 0; j < m.k(); ++j) {
        json top = json::array();
        for (const auto& s : top_activated_samples(acts, j, f.top)) {
          top.push_back({{"sample", s.index}, {"activation", s.activation}, {"text", texts[s.index]}});
        }
        neurons.push_back({{"neuron", j}, {"concept", m.concepts.concept_at(j).text}, {"top_samples", top}});
      }
      result["neurons"] = neurons;
    }
  } else {
    throw ValidationError("report-neurons needs a classifier or generator checkpoint, got " + kind);
  }
  cx.emit(result);
  return 0;
}

int cmd_serve(Context& cx) {
  Flags& f = cx.f;
  ServerModels models;
  if (f.classifier.empty() && f.generator.empty()) throw UsageError("serve needs --classifier and/or --generator");
  if (!f.classifier.empty()) models.classifier = load_classifier(cx.input(f.classifier, "classifier"));
  if (!f.generator.empty()) models.generator = load_generator(cx.input(f.generator, "generator"));
  if (!f.mask.empty()) {
    if (!models.classifier) throw UsageError("--mask needs --classifier");
    json doc = json::parse(read_file(cx.input(f.mask, "mask file")), nullptr, false);
    if (doc.is_discarded() || !doc.contains("mask") || !doc["mask"].is_array() || doc["mask"].size() != models.classifier->k()) {
      throw ValidationError("mask file '" + f.mask + "' does not match the classifier");
    }
    for (std::size_t j = 0; j < models.classifier->k(); ++j) models.classifier->mask[j] = doc["mask"][j].get<bool>() ? 1 : 0;
  }
  models.mask_path = f.mask_path;
  Server server(std::move(models));
  const int port = server.bind(f.host, f.port);
  if (port < 0) throw Error("cannot bind " + f.host + ":" + std::to_string(f.port));
  cx.log("listening on http://" + f.host + ":" + std::to_string(port));
  server.listen();
  return 0;
}

// --------------------------------------------------------------- wiring ----

using Handler = int (*)(Context&);

struct Command {
  CLI::App* app;
  Handler run;
};

std::vector<Command> build(CLI::App& app, Flags& f) {
  std::vector<Command> cmds;
  auto add = [&](const char* name, const char* help, Handler h) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, f);
    cmds.push_back({sub, h});
    return sub;
  };

  auto* synth = add("synth", "Generate a synthetic labelled corpus", cmd_synth);
  synth->add_option("--spec", f.data.spec, "Synthetic corpus spec");
  synth->add_option("--corpus", f.corpus_out, "Output JSONL path");

  auto* score = add("score", "Automatic Concept Scoring (+ ACC) of the train split", cmd_score);
  add_data(score, f);
  add_backend(score, f);
  score->add_option("--concepts", f.concepts, "Concept set JSON");
  score->add_option("--scores", f.scores, "Output score manifest");

  auto* tcls = add("train-cls", "Train CB-LLM (classification): CBL, then the sparse final layer", cmd_train_cls);
  add_data(tcls, f);
  add_model(tcls, f);
  add_backend(tcls, f);
  tcls->add_option("--concepts", f.concepts, "Concept set JSON");
  tcls->add_option("--scores", f.scores, "Precomputed score manifest (from `score`)");
  tcls->add_option("--model", f.model_path, "Output classifier checkpoint");
  tcls->add_option("--baseline", f.baseline, "Also train the black-box baseline and save it here");
  tcls->add_option("--epochs", f.cls.epochs, "CBL training epochs");
  tcls->add_option("--batch-size", f.cls.batch_size, "Mini-batch size");
  tcls->add_option("--lr", f.cls.lr, "Adam step size");
  tcls->add_flag("--freeze-backbone", f.cls.freeze_backbone, "Train only the CBL in step 4");
  tcls->add_option("--lambda", f.final_cfg.lambda, "Elastic-net weight of the final layer");
  tcls->add_option("--alpha", f.final_cfg.alpha, "Elastic-net L1 share");
  tcls->add_option("--max-iters", f.final_cfg.max_iters, "Final-layer solver iterations");

  auto* explain = add("explain", "Classify a text and list its top-r concept contributions", cmd_explain);
  explain->add_option("--model", f.model_path, "Classifier checkpoint");
  explain->add_option("--text", f.text, "Input text");
  explain->add_option("--r", f.r, "Number of concepts to report");

  auto* unlearn = add("unlearn", "Deactivate a concept neuron and report the prediction flips", cmd_unlearn);
  add_data(unlearn, f);
  unlearn->add_option("--model", f.model_path, "Classifier checkpoint");
  unlearn->add_option("--concept", f.concept_id, "Concept text or index");
  unlearn->add_option("--inject", f.inject, "Words injected into --inject-category samples (scenario)")->delimiter(',');
  unlearn->add_option("--inject-category", f.inject_category, "Category whose samples receive the injected words");
  unlearn->add_option("--inject-count", f.inject_count, "Scenario samples");
  unlearn->add_option("--inject-extra", f.inject_extra, "Injected words per sample");
  unlearn->add_option("--save", f.save, "Save the checkpoint with the concept unlearned");

  auto* tgen = add("train-gen", "Train CB-LLM (generation)", cmd_train_gen);
  add_data(tgen, f);
  add_model(tgen, f);
  tgen->add_option("--model", f.model_path, "Output generator checkpoint");
  tgen->add_flag("--no-adversarial", f.no_adversarial, "Drop L_e and L_d (the w/o-ADV ablation arm)");
  tgen->add_option("--concept-loss-at", f.concept_loss_at, "Concept loss positions: all | last");
  tgen->add_flag("--adv-backbone", f.gen.adv_backbone, "Route the entropy loss into the backbone too");
  tgen->add_option("--unsup-width", f.gen.unsup_width, "Width of f_unsup (0 = d_model - k)");
  tgen->add_option("--lambda", f.gen.lambda, "Elastic-net weight on the CBL rows of the unembedding");
  tgen->add_option("--alpha", f.gen.alpha, "Elastic-net L1 share");
  tgen->add_option("--epochs", f.gen_train.epochs, "Training epochs");
  tgen->add_option("--batch-size", f.gen_train.batch_size, "Sequences per step");
  tgen->add_option("--lr", f.gen_train.lr, "Adam step size (theta_1..theta_4)");
  tgen->add_option("--probe-lr", f.gen_train.probe_lr, "Adam step size of the adversarial probe");
  tgen->add_option("--probe-steps", f.gen_train.probe_steps, "Extra probe-only updates per batch");
  tgen->add_flag("--with-probe", f.with_probe, "Keep the training-only probe in the checkpoint");
  tgen->add_option("--reference-lm", f.reference_lm, "Also train the reference LM and save it here");

  auto* gen = add("generate", "Sample text, optionally with neuron interventions", cmd_generate);
  gen->add_option("--model", f.model_path, "Generator checkpoint");
  add_sampler(gen, f);
  gen->add_option("--intervene", f.intervene, "Override NEURON=VALUE (repeatable)");

  auto* steer = add("steer", "Steer generation towards one concept (section 4.2 protocol)", cmd_steer);
  steer->add_option("--model", f.model_path, "Generator checkpoint");
  add_sampler(steer, f);
  steer->add_option("--neuron", f.neuron, "Concept neuron to steer towards (required)");
  steer->add_option("--value", f.value, "Activation value for the neuron");
  steer->add_flag("--only", f.only, "Override only this neuron (do not zero the others)");

  auto* ev = add("eval", "Evaluate a checkpoint (optionally against an ablation checkpoint)", cmd_eval);
  add_data(ev, f);
  ev->add_option("--metric", f.metric, "classification | detection | probe | steerability | perplexity");
  ev->add_option("--model", f.model_path, "Checkpoint to evaluate");
  ev->add_option("--ablation", f.ablation, "Second checkpoint; reports both and the delta");
  ev->add_option("--probe", f.probe, "Steerability judge: oracle | learned");
  ev->add_option("--probe-model", f.probe_model, "Baseline checkpoint for --probe learned");
  ev->add_option("--reference", f.reference, "Reference LM checkpoint for perplexity");
  ev->add_option("--n-per-category", f.n_per_category, "Steered generations per concept");
  ev->add_option("--max-tokens", f.sampler.max_tokens, "Tokens per generation");
  ev->add_option("--temperature", f.sampler.temperature, "Sampling temperature");
  ev->add_option("--value", f.value, "Intervention value");
  ev->add_option("--csv", f.csv, "Also write a CSV summary of the main report");

  auto* rep = add("report-neurons", "Describe what each concept neuron reads or writes", cmd_report_neurons);
  add_data(rep, f);
  rep->add_option("--model", f.model_path, "Classifier or generator checkpoint");
  rep->add_option("--top", f.top, "Entries per neuron");

  auto* serve = add("serve", "HTTP service: classify/explain, unlearn, steered streaming generation", cmd_serve);
  serve->add_option("--classifier", f.classifier, "Classifier checkpoint");
  serve->add_option("--generator", f.generator, "Generator checkpoint");
  serve->add_option("--host", f.host, "Bind address");
  serve->add_option("--port", f.port, "Port (0 = any free port)");
  serve->add_option("--mask-path", f.mask_path, "File written by POST /mask/save");
  serve->add_option("--mask", f.mask, "Load a saved unlearn mask at start-up");
  return cmds;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Flags f;
  CLI::App app("Concept Bottleneck Large Language Models (CB-LLM) at desk scale", "cbllm");
  app.require_subcommand(1, 1);
  std::vector<Command> cmds = build(app, f);

  CLI::App* active = nullptr;
  try {
    app.parse(argc, argv);
    for (const auto& c : cmds)
      if (c.app->parsed()) active = c.app;
    if (!f.common.config.empty()) apply_config(active, f.common.config);
  } catch (const CLI::Success&) {
    CLI::App* target = &app;
    for (const auto& c : cmds)
      if (c.app->parsed()) target = c.app;
    out << target->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  Context cx{f, out, err};
  cx.seed_given = active->get_option("--seed")->count() > 0;
  const auto it = std::find_if(cmds.begin(), cmds.end(), [&](const Command& c) { return c.app == active; });
  try {
    return it->run(cx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const LookupError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "fault: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace cbllm
