#include "cbllm/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "cbllm/adam.hpp"
#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

using nlohmann::json;

// ---- report ----

json Metric::to_json() const { return {{"value", value}, {"count", count}, {"note", note}}; }

Metric Metric::from_json(const json& j) {
  try {
    return {j.at("value").get<double>(), j.at("count").get<std::size_t>(), j.value("note", std::string())};
  } catch (const json::exception& e) {
    throw ValidationError(std::string("metric: ") + e.what());
  }
}

void MetricsReport::set(const std::string& name, double value, std::size_t count, std::string note) {
  metrics[name] = Metric{value, count, std::move(note)};
}

const Metric& MetricsReport::at(const std::string& name) const {
  auto it = metrics.find(name);
  if (it == metrics.end()) throw LookupError("metrics report: no metric '" + name + "'");
  return it->second;
}

json MetricsReport::to_json() const {
  json m = json::object();
  for (const auto& [name, metric] : metrics) m[name] = metric.to_json();
  return {{"metrics", m}, {"context", context}};
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  if (!j.contains("metrics") || !j["metrics"].is_object()) throw ValidationError("metrics report: missing 'metrics' object");
  for (const auto& [name, m] : j["metrics"].items()) r.metrics[name] = Metric::from_json(m);
  r.context = j.value("context", json::object());
  return r;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "name,value,count,note\n";
  for (const auto& [name, m] : metrics) {
    std::string note = m.note;
    std::replace(note.begin(), note.end(), ',', ';');
    out << name << ',' << m.value << ',' << m.count << ',' << note << '\n';
  }
  return out.str();
}

// ---- steerability ----

LearnedProbe::LearnedProbe(const BaselineClassifier& model) : model_(&model) {
  if (!model.trained) throw UsageError("steerability: the learned probe classifier is untrained");
}

double success_rate(std::span<const std::uint8_t> verdicts) {
  if (verdicts.empty()) throw UsageError("success_rate: no verdicts");
  std::size_t hit = 0;
  for (auto v : verdicts) hit += v != 0;
  return double(hit) / double(verdicts.size());
}

json SteerabilityResult::to_json(bool with_samples, const Vocab* vocab) const {
  json j = {{"per_category", per_category}, {"mean", mean},     {"n_per_category", n_per_category},
            {"tokens_per_sample", tokens_per_sample}, {"seed", seed}, {"value", value}};
  if (with_samples && vocab) {
    json cats = json::array();
    for (const auto& cat : samples) {
      json texts = json::array();
      for (const auto& s : cat) {
        GenerationResult g;
        g.tokens = s;
        texts.push_back(g.text(*vocab));
      }
      cats.push_back(texts);
    }
    j["samples"] = cats;
  }
  return j;
}

SteerabilityResult steerability_score(const GenerativeModel& model, const TextCategorizer& probe, std::size_t n_per_category,
                                      std::size_t tokens_per_sample, std::uint64_t seed, float value, float temperature) {
  if (n_per_category == 0) throw UsageError("steerability: n_per_category must be >= 1");
  if (probe.n_categories() != model.concepts.n()) throw ValidationError("steerability: probe and model disagree on the category count");
  SteerabilityResult res;
  res.n_per_category = n_per_category;
  res.tokens_per_sample = tokens_per_sample;
  res.seed = seed;
  res.value = value;
  for (std::size_t c = 0; c < model.k(); ++c) {
    const int target = model.concepts.class_of_concept(c);
    std::vector<std::uint8_t> verdicts;
    res.samples.emplace_back();
    for (std::size_t s = 0; s < n_per_category; ++s) {
      GenerateOptions opts;
      opts.max_tokens = tokens_per_sample;
      opts.temperature = temperature;
      opts.seed = fnv1a(std::to_string(c) + ":" + std::to_string(s), seed ^ kFnvOffset);
      GenerationResult g = generate(model, {}, steer_towards(c, model.k(), value), opts);
      verdicts.push_back(probe.categorize(g.text(model.vocab)) == target);
      res.samples.back().push_back(std::move(g.tokens));
    }
    res.per_category.push_back(success_rate(verdicts));
  }
  double total = 0.0;
  for (double s : res.per_category) total += s;
  res.mean = total / double(res.per_category.size());
  return res;
}

// ---- reference LM and perplexity ----

ReferenceLM::ReferenceLM(const ModelConfig& cfg, Vocab v) : config(cfg), vocab(std::move(v)), params(), backbone(cfg, params) {
  if (config.vocab_size != vocab.size()) throw ValidationError("reference LM: config vocab_size does not match vocab");
  std::mt19937_64 rng(cfg.seed ^ 0xd6e8feb86659fd93ULL);
  params.add("lm.w", normal_init(cfg.d_model, cfg.vocab_size, 0.02, rng));
  params.add("lm.b", Tensor::matrix(1, cfg.vocab_size));
}

Var ReferenceLM::head(Tape& tape, Var hidden) const {
  auto& ps = const_cast<ParamStore&>(params);
  return tape.add_row(tape.matmul(hidden, tape.param(ps.at("lm.w"))), tape.param(ps.at("lm.b")));
}

std::vector<double> ReferenceLM::train(std::span<const std::string> texts, const GenTrainConfig& cfg) {
  auto seqs = encode_lm_sequences(vocab, texts, config.context);
  if (seqs.empty()) throw UsageError("reference LM: no non-empty training texts");
  std::vector<int> no_concepts(seqs.size(), -1);
  ParamList trainable = params.list();
  AdamState adam(trainable, AdamConfig{cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    std::size_t steps = 0;
    for (const auto& idx : epoch_batches(seqs.size(), cfg.batch_size, rng)) {
      GenBatch b = make_gen_batch(seqs, no_concepts, idx, false);
      zero_grads(trainable);
      Tape tape;
      Var loss = tape.cross_entropy(head(tape, backbone.forward_hidden(tape, b.inputs, true, &rng)), b.targets);
      total += tape.value(loss)[0];
      ++steps;
      tape.backward(loss);
      if (cfg.clip_norm > 0) clip_grad_norm(trainable, cfg.clip_norm);
      adam_step(trainable, adam);
    }
    trace.push_back(total / double(steps));
  }
  meta["train"] = cfg.to_json();
  meta["loss_trace"] = trace;
  return trace;
}

std::vector<double> ReferenceLM::token_nll(std::span<const int> ids) const {
  if (ids.size() < 2) throw UsageError("token_nll: need <bos> plus at least one token");
  std::vector<double> out;
  // Consecutive windows of at most `context` inputs; every target is scored once.
  const std::size_t ctx = config.context;
  std::size_t start = 0;
  while (start + 1 < ids.size()) {
    std::size_t end = std::min(ids.size(), start + ctx + 1);  // inputs [start, end-1), targets [start+1, end)
    Tape tape(false);
    TokenBatch batch;
    batch.add(ids.subspan(start, end - 1 - start));
    const Tensor& lp = tape.value(tape.log_softmax(head(tape, backbone.forward_hidden(tape, batch))));
    for (std::size_t t = start + 1; t < end; ++t) out.push_back(-double(lp.at(t - 1 - start, static_cast<std::size_t>(ids[t]))));
    start = end - 1;
  }
  return out;
}

Metric perplexity(const NextTokenModel& reference, std::span<const std::vector<int>> sequences, const Vocab& tokenizer) {
  if (reference.tokenizer().fingerprint() != tokenizer.fingerprint()) {
    throw ValidationError("perplexity: reference LM tokenizer " + hex64(reference.tokenizer().fingerprint()) +
                          " differs from the generator's " + hex64(tokenizer.fingerprint()));
  }
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& s : sequences) {
    if (s.empty()) continue;
    std::vector<int> ids = {kBos};
    ids.insert(ids.end(), s.begin(), s.end());
    for (double v : reference.token_nll(ids)) {
      nll += v;
      ++n;
    }
  }
  if (n == 0) throw UsageError("perplexity: no tokens to score");
  return {std::exp(nll / double(n)), n, "tokens"};
}

// ---- detection and probing ----

Metric concept_detection_accuracy(const Tensor& a, std::span<const int> concept_labels) {
  if (concept_labels.empty()) throw UsageError("concept detection: empty dataset");
  if (a.rows() != concept_labels.size()) throw UsageError("concept detection: one label per activation row needed");
  std::size_t hit = 0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto row = a.row(r);
    hit += (std::max_element(row.begin(), row.end()) - row.begin()) == concept_labels[r];
  }
  return {double(hit) / double(a.rows()), a.rows(), "final-position argmax"};
}

Metric concept_detection_accuracy(const GenerativeModel& model, std::span<const std::string> texts, std::span<const int> labels) {
  if (model.k() != model.concepts.n()) {
    throw ValidationError("concept detection: model has k=" + std::to_string(model.k()) + " concepts for " +
                          std::to_string(model.concepts.n()) + " categories");
  }
  if (texts.empty()) throw UsageError("concept detection: empty dataset");
  if (texts.size() != labels.size()) throw UsageError("concept detection: one label per text needed");
  return concept_detection_accuracy(model.final_features(texts).cbl, concept_labels_for(model.concepts, labels));
}

Metric probe_accuracy(const Tensor& train_x, std::span<const int> train_y, const Tensor& test_x, std::span<const int> test_y,
                      std::size_t n_categories, std::uint64_t seed) {
  if (train_x.rows() != train_y.size() || test_x.rows() != test_y.size()) throw UsageError("probe: one label per feature row needed");
  if (train_x.cols() != test_x.cols()) throw ShapeError("probe: train/test feature widths differ");
  if (test_y.empty()) throw UsageError("probe: empty test set");
  std::vector<std::size_t> per(n_categories, 0);
  for (int y : train_y) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_categories) throw ValidationError("probe: label out of range");
    ++per[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < n_categories; ++c)
    if (per[c] < 10) {
      throw UsageError("probe: category " + std::to_string(c) + " has " + std::to_string(per[c]) + " training rows, need >= 10");
    }

  using Mat = Eigen::MatrixXd;
  const auto N = Eigen::Index(train_x.rows()), D = Eigen::Index(train_x.cols()), C = Eigen::Index(n_categories);
  auto to_mat = [](const Tensor& t) {
    Mat m(Eigen::Index(t.rows()), Eigen::Index(t.cols()));
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < t.cols(); ++c) m(Eigen::Index(r), Eigen::Index(c)) = t.at(r, c);
    return m;
  };
  Mat X = to_mat(train_x), Xt = to_mat(test_x);
  Eigen::RowVectorXd mu = X.colwise().mean();
  Eigen::RowVectorXd sd = ((X.rowwise() - mu).array().square().colwise().sum() / double(N)).sqrt();
  for (Eigen::Index c = 0; c < D; ++c) sd(c) = sd(c) > 1e-8 ? sd(c) : 1.0;
  X = (X.rowwise() - mu).array().rowwise() / sd.array();
  Xt = (Xt.rowwise() - mu).array().rowwise() / sd.array();
  Mat Y = Mat::Zero(N, C);
  for (Eigen::Index r = 0; r < N; ++r) Y(r, train_y[std::size_t(r)]) = 1.0;

  // Full-batch Adam on mean cross-entropy + small L2; deterministic start.
  std::mt19937_64 rng(seed);
  Mat W(D, C);
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = 0.01 * draw_normal(rng);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(C);
  Mat mW = Mat::Zero(D, C), vW = Mat::Zero(D, C);
  Eigen::RowVectorXd mb = b, vb = b;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8, l2 = 1e-4;
  for (int it = 1; it <= 500; ++it) {
    Mat Z = X * W;
    Z.rowwise() += b;
    for (Eigen::Index r = 0; r < N; ++r) {
      double m = Z.row(r).maxCoeff();
      Z.row(r) = (Z.row(r).array() - m).exp();
      Z.row(r) /= Z.row(r).sum();
    }
    Mat G = (Z - Y) / double(N);
    Mat gW = X.transpose() * G + l2 * W;
    Eigen::RowVectorXd gb = G.colwise().sum();
    mW = b1 * mW + (1 - b1) * gW;
    vW = b2 * vW + (1 - b2) * gW.cwiseProduct(gW);
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
    const double c1 = 1 - std::pow(b1, it), c2 = 1 - std::pow(b2, it);
    W.array() -= lr * (mW.array() / c1) / ((vW.array() / c2).sqrt() + eps);
    b.array() -= lr * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
  }
  Mat Zt = Xt * W;
  Zt.rowwise() += b;
  std::size_t hit = 0;
  for (Eigen::Index r = 0; r < Zt.rows(); ++r) {
    Eigen::Index best = 0;
    Zt.row(r).maxCoeff(&best);
    hit += best == test_y[std::size_t(r)];
  }
  return {double(hit) / double(test_y.size()), test_y.size(), "fresh softmax-regression probe, held-out"};
}

// ---- unlearning ----

json UnlearningReport::to_json() const {
  return {{"concept", concept_index},       {"samples", samples},   {"dominated", dominated},
          {"dominated_flipped", dominated_flipped}, {"flip_rate", flip_rate}, {"flipped", flipped}};
}

UnlearningReport unlearning_report(ClassifierModel& model, std::span<const std::string> texts, std::size_t j) {
  const bool was = model.unlearned(j);  // range check
  if (texts.empty()) throw UsageError("unlearning report: no texts");
  model.restore(j);
  Tensor a = model.activations(texts);
  UnlearningReport rep;
  rep.concept_index = j;
  rep.samples = texts.size();
  std::vector<int> before(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    Tensor row({1, a.cols()}, std::vector<float>(a.row(i).begin(), a.row(i).end()));
    Explanation e = model.explain_activations(row, 1);
    before[i] = e.category;
    if (e.items[0].concept_index == j && e.items[0].contribution > 0.0f) rep.dominated.push_back(i);
  }
  model.unlearn(j);
  Tensor z = model.logits(a);
  if (!was) model.restore(j);
  std::vector<int> after(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto row = z.row(i);
    int best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
      if (row[c] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    after[i] = best;
    if (after[i] != before[i]) rep.flipped.push_back(i);
  }
  for (auto i : rep.dominated) rep.dominated_flipped += after[i] != before[i];
  rep.flip_rate = rep.dominated.empty() ? 0.0 : double(rep.dominated_flipped) / double(rep.dominated.size());
  return rep;
}

// The backbone addresses parameters through a pointer to the owning store,
// so copies and moves rebind it to their own `params`.
ReferenceLM::ReferenceLM(const ReferenceLM& other) : config(other.config), vocab(other.vocab), params(other.params), backbone(other.backbone), meta(other.meta) { backbone.rebind(params); }

ReferenceLM::ReferenceLM(ReferenceLM&& other) noexcept : config(std::move(other.config)), vocab(std::move(other.vocab)), params(std::move(other.params)), backbone(std::move(other.backbone)), meta(std::move(other.meta)) { backbone.rebind(params); }

ReferenceLM& ReferenceLM::operator=(const ReferenceLM& other) {
  if (this == &other) return *this;
  config = other.config;
  vocab = other.vocab;
  params = other.params;
  backbone = other.backbone;
  meta = other.meta;
  backbone.rebind(params);
  return *this;
}

ReferenceLM& ReferenceLM::operator=(ReferenceLM&& other) noexcept {
  if (this == &other) return *this;
  config = std::move(other.config);
  vocab = std::move(other.vocab);
  params = std::move(other.params);
  backbone = std::move(other.backbone);
  meta = std::move(other.meta);
  backbone.rebind(params);
  return *this;
}

}  // namespace cbllm
