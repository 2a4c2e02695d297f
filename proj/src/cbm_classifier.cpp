#include "cbllm/cbm_classifier.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "cbllm/adam.hpp"
#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

using nlohmann::json;

namespace {

constexpr std::size_t kInferenceBatch = 64;

int argmax_row(std::span<const float> row) {
  int best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

std::vector<Prediction> predictions_from_logits(const Tensor& logits) {
  std::vector<Prediction> out;
  out.reserve(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out.push_back({argmax_row(row), std::vector<float>(row.begin(), row.end())});
  }
  return out;
}

}  // namespace

// ---- configs ----

json ClassifierTrainConfig::to_json() const {
  return {{"epochs", epochs},       {"batch_size", batch_size},           {"lr", lr},
          {"clip_norm", clip_norm}, {"freeze_backbone", freeze_backbone}, {"seed", seed}};
}

ClassifierTrainConfig ClassifierTrainConfig::from_json(const json& j) {
  ClassifierTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
  c.seed = j.value("seed", c.seed);
  return c;
}

void FinalTrainConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ValidationError("train_final: lambda must be >= 0, got " + std::to_string(lambda));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("train_final: alpha must lie in [0, 1], got " + std::to_string(alpha));
  if (max_iters == 0) throw ValidationError("train_final: max_iters must be >= 1");
}

json FinalTrainConfig::to_json() const {
  return {{"lambda", lambda}, {"alpha", alpha}, {"max_iters", max_iters}, {"tol", tol}, {"solver", "fista-prox"}};
}

FinalTrainConfig FinalTrainConfig::from_json(const json& j) {
  FinalTrainConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.alpha = j.value("alpha", c.alpha);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.tol = j.value("tol", c.tol);
  return c;
}

json Explanation::to_json() const {
  json items_j = json::array();
  for (const auto& it : items) {
    items_j.push_back({{"concept", it.concept_index},
                       {"text", it.text},
                       {"concept_category", it.concept_category},
                       {"activation", it.activation},
                       {"contribution", it.contribution},
                       {"unlearned", it.unlearned}});
  }
  return {{"category", category},
          {"category_name", category_name},
          {"logits", logits},
          {"explanations", items_j},
          {"truncated", truncated}};
}

// ---- model ----

ClassifierModel::ClassifierModel(const ModelConfig& cfg, Vocab v, ConceptSet cs)
    : config(cfg), vocab(std::move(v)), concepts(std::move(cs)), params(), backbone(cfg, params), mask(concepts.k(), 0) {
  if (config.vocab_size != vocab.size()) {
    throw ValidationError("classifier: config vocab_size " + std::to_string(config.vocab_size) + " != vocab size " +
                          std::to_string(vocab.size()));
  }
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  params.add("cbl.w", normal_init(cfg.d_model, k(), 1.0 / std::sqrt(double(cfg.d_model)), rng));
  params.add("cbl.b", Tensor::matrix(1, k()));
  params.add("final.w", Tensor::matrix(n(), k()));
  params.add("final.b", Tensor::matrix(1, n()));
}

Var ClassifierModel::cbl_pre(Tape& tape, Var pooled) const {
  auto& ps = const_cast<ParamStore&>(params);
  return tape.add_row(tape.matmul(pooled, tape.param(ps.at("cbl.w"))), tape.param(ps.at("cbl.b")));
}

Tensor ClassifierModel::activations(std::span<const std::string> texts, std::vector<std::uint8_t>* truncated) const {
  if (texts.empty()) throw UsageError("activations: no texts");
  auto seqs = encode_classifier_inputs(vocab, texts, config.context, truncated);
  Tensor out = Tensor::matrix(texts.size(), k());
  for (const auto& idx : ordered_batches(seqs.size(), kInferenceBatch)) {
    Tape tape(false);
    TokenBatch batch = gather_batch(seqs, idx);
    Var pooled = backbone.pool(tape, backbone.forward_hidden(tape, batch), batch);
    const Tensor& a = tape.value(tape.relu(cbl_pre(tape, pooled)));
    for (std::size_t r = 0; r < idx.size(); ++r) std::copy(a.row(r).begin(), a.row(r).end(), out.row(idx[r]).begin());
  }
  return out;
}

Tensor ClassifierModel::logits(const Tensor& a) const {
  if (a.cols() != k()) throw ShapeError("logits: activations have " + std::to_string(a.cols()) + " columns, k=" + std::to_string(k()));
  const Tensor& W = params.at("final.w").value;
  const Tensor& b = params.at("final.b").value;
  Tensor out = Tensor::matrix(a.rows(), n());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t i = 0; i < n(); ++i) {
      double z = b[i];
      for (std::size_t j = 0; j < k(); ++j)
        if (!mask[j]) z += double(W.at(i, j)) * a.at(r, j);
      out.at(r, i) = static_cast<float>(z);
    }
  return out;
}

std::vector<Prediction> ClassifierModel::predict(std::span<const std::string> texts) const {
  return predictions_from_logits(logits(activations(texts)));
}

Prediction ClassifierModel::predict(const std::string& text) const {
  std::vector<std::string> one = {text};
  return predict(one)[0];
}

Explanation ClassifierModel::explain_activations(const Tensor& a, std::size_t r, bool truncated) const {
  if (r == 0) throw UsageError("explain: r must be >= 1");
  if (a.rows() != 1 || a.cols() != k()) throw ShapeError("explain: expected a [1x" + std::to_string(k()) + "] activation row");
  Tensor z = logits(a);
  Explanation e;
  e.logits.assign(z.span().begin(), z.span().end());
  e.category = argmax_row(z.row(0));
  e.category_name = concepts.category_names()[static_cast<std::size_t>(e.category)];
  e.truncated = truncated;
  const Tensor& W = params.at("final.w").value;
  for (std::size_t j = 0; j < k(); ++j) {
    ExplanationItem it;
    it.concept_index = j;
    it.text = concepts.concept_at(j).text;
    it.concept_category = concepts.class_of_concept(j);
    it.activation = a[j];
    it.unlearned = mask[j] != 0;
    it.contribution = it.unlearned ? 0.0f : W.at(static_cast<std::size_t>(e.category), j) * a[j];
    e.items.push_back(std::move(it));
  }
  std::stable_sort(e.items.begin(), e.items.end(),
                   [](const ExplanationItem& x, const ExplanationItem& y) { return x.contribution > y.contribution; });
  e.items.resize(std::min(r, k()));
  return e;
}

Explanation ClassifierModel::explain(const std::string& text, std::size_t r) const {
  if (r == 0) throw UsageError("explain: r must be >= 1");
  std::vector<std::string> one = {text};
  std::vector<std::uint8_t> cut;
  Tensor a = activations(one, &cut);
  return explain_activations(a, r, cut[0] != 0);
}

void ClassifierModel::unlearn(std::size_t j) {
  concepts.concept_at(j);  // range check
  mask[j] = 1;
}

void ClassifierModel::restore(std::size_t j) {
  concepts.concept_at(j);
  mask[j] = 0;
}

bool ClassifierModel::unlearned(std::size_t j) const {
  concepts.concept_at(j);
  return mask[j] != 0;
}

// ---- Step 4 ----

std::vector<double> train_cbl(ClassifierModel& model, std::span<const std::string> texts, const ConceptScores& scores,
                              const ClassifierTrainConfig& cfg, bool allow_uncorrected) {
  if (!scores.corrected && !allow_uncorrected) {
    throw ValidationError(
        "train_cbl: concept scores are not ACC-corrected; pass the uncorrected override to train on raw ACS "
        "(the paper's CB-LLM w/o ACC ablation)");
  }
  if (scores.scores.rows() != texts.size()) {
    throw UsageError("train_cbl: " + std::to_string(scores.scores.rows()) + " score rows for " +
                     std::to_string(texts.size()) + " texts");
  }
  if (scores.scores.cols() != model.k()) {
    throw UsageError("train_cbl: score matrix has " + std::to_string(scores.scores.cols()) + " columns, k=" +
                     std::to_string(model.k()));
  }
  auto seqs = encode_classifier_inputs(model.vocab, texts, model.config.context);
  ParamList trainable = model.params.list("cbl.");
  if (!cfg.freeze_backbone) {
    auto bb = model.params.list(Backbone::kPrefix);
    trainable.insert(trainable.end(), bb.begin(), bb.end());
  }
  AdamState adam(trainable, AdamConfig{cfg.lr});
  std::mt19937_64 rng(cfg.seed);

  auto mean_similarity = [&] {
    double total = 0.0;
    for (const auto& idx : ordered_batches(seqs.size(), kInferenceBatch)) {
      Tape tape(false);
      TokenBatch batch = gather_batch(seqs, idx);
      Var pooled = model.backbone.pool(tape, model.backbone.forward_hidden(tape, batch), batch);
      Tensor target = Tensor::matrix(idx.size(), model.k());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        auto src = scores.scores.row(idx[r]);
        std::copy(src.begin(), src.end(), target.row(r).begin());
      }
      for (float c : tape.value(tape.cosine_rows(model.cbl_pre(tape, pooled), tape.constant(target))).span()) total += c;
    }
    return total / double(seqs.size());
  };

  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(seqs.size(), cfg.batch_size, rng)) {
      zero_grads(trainable);
      Tape tape;
      TokenBatch batch = gather_batch(seqs, idx);
      Var pooled = model.backbone.pool(tape, model.backbone.forward_hidden(tape, batch, true, &rng), batch);
      if (cfg.freeze_backbone) pooled = tape.detach(pooled);
      Tensor target = Tensor::matrix(idx.size(), model.k());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        auto src = scores.scores.row(idx[r]);
        std::copy(src.begin(), src.end(), target.row(r).begin());
      }
      Var sim = tape.mean(tape.cosine_rows(model.cbl_pre(tape, pooled), tape.constant(target)));
      tape.backward(tape.scale(sim, -1.0f));
      if (cfg.clip_norm > 0) clip_grad_norm(trainable, cfg.clip_norm);
      adam_step(trainable, adam);
    }
    trace.push_back(mean_similarity());
  }
  model.meta["cbl"] = {{"train", cfg.to_json()},
                       {"corrected_scores", scores.corrected},
                       {"samples", texts.size()},
                       {"similarity_trace", trace}};
  return trace;
}

// ---- Step 5 ----

double elastic_net_penalty(const Tensor& w, double alpha) {
  double l1 = 0.0, l2 = 0.0;
  for (float x : w.span()) {
    l1 += std::fabs(double(x));
    l2 += double(x) * x;
  }
  return alpha * l1 + (1.0 - alpha) * 0.5 * l2;
}

std::vector<double> train_final(ClassifierModel& model, const Tensor& activations, std::span<const int> labels,
                                const FinalTrainConfig& cfg) {
  cfg.validate();
  const std::size_t N = activations.rows(), k = model.k(), n = model.n();
  if (activations.cols() != k) throw ShapeError("train_final: activations must have k=" + std::to_string(k) + " columns");
  if (labels.size() != N) throw UsageError("train_final: label count does not match activation rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= n) throw ValidationError("train_final: label " + std::to_string(y) + " out of range");

  using Mat = Eigen::MatrixXd;
  using Vec = Eigen::VectorXd;
  Mat X(N, k);
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t j = 0; j < k; ++j) X(Eigen::Index(r), Eigen::Index(j)) = activations.at(r, j);
  Mat Y = Mat::Zero(N, n);
  for (std::size_t r = 0; r < N; ++r) Y(Eigen::Index(r), labels[r]) = 1.0;
  const double l1 = cfg.lambda * cfg.alpha, l2 = cfg.lambda * (1.0 - cfg.alpha);

  // Smooth part: mean CE + (l2/2)|W|^2. Returns value, fills gradients.
  auto smooth = [&](const Mat& W, const Vec& b, Mat* gW, Vec* gb) {
    Mat Z = X * W.transpose();
    Z.rowwise() += b.transpose();
    double loss = 0.0;
    Mat P(N, n);
    for (Eigen::Index r = 0; r < Z.rows(); ++r) {
      double m = Z.row(r).maxCoeff();
      Eigen::RowVectorXd e = (Z.row(r).array() - m).exp();
      double s = e.sum();
      P.row(r) = e / s;
      loss -= (Z.row(r).dot(Y.row(r)) - m - std::log(s));
    }
    loss /= double(N);
    loss += 0.5 * l2 * W.squaredNorm();
    if (gW) {
      Mat D = (P - Y) / double(N);
      *gW = D.transpose() * X + l2 * W;
      *gb = D.colwise().sum().transpose();
    }
    return loss;
  };
  auto objective = [&](const Mat& W, const Vec& b) { return smooth(W, b, nullptr, nullptr) + l1 * W.cwiseAbs().sum(); };
  auto prox = [&](const Mat& W, double t) {
    return W.unaryExpr([&](double w) { return std::copysign(std::max(std::fabs(w) - t * l1, 0.0), w); }).eval();
  };

  Mat W = Mat::Zero(n, k), Wy = W;
  Vec b = Vec::Zero(n), by = b;
  double t = 1.0, theta = 1.0;
  double F = objective(W, b);
  std::vector<double> trace;
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    Mat gW;
    Vec gb;
    double fy = smooth(Wy, by, &gW, &gb);
    Mat Wn;
    Vec bn;
    for (int bt = 0; bt < 60; ++bt) {
      Wn = prox(Wy - t * gW, t);
      bn = by - t * gb;
      double dW2 = (Wn - Wy).squaredNorm() + (bn - by).squaredNorm();
      double lin = ((Wn - Wy).cwiseProduct(gW)).sum() + (bn - by).dot(gb);
      if (smooth(Wn, bn, nullptr, nullptr) <= fy + lin + dW2 / (2.0 * t) + 1e-12) break;
      t *= 0.5;
    }
    double Fn = objective(Wn, bn);
    if (Fn > F) {
      // Adaptive restart: drop momentum and take a plain proximal step from W.
      theta = 1.0;
      Wy = W;
      by = b;
      continue;
    }
    double theta_n = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * theta * theta));
    double beta = (theta - 1.0) / theta_n;
    Wy = Wn + beta * (Wn - W);
    by = bn + beta * (bn - b);
    double improvement = F - Fn;
    W = std::move(Wn);
    b = std::move(bn);
    theta = theta_n;
    F = Fn;
    trace.push_back(F);
    t *= 1.25;  // let the step grow back after backtracking
    if (it > 20 && improvement < cfg.tol * std::max(1.0, std::fabs(F))) break;
  }

  Tensor& Wt = model.params.at("final.w").value;
  Tensor& bt = model.params.at("final.b").value;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) Wt.at(i, j) = static_cast<float>(W(Eigen::Index(i), Eigen::Index(j)));
    bt[i] = static_cast<float>(b(Eigen::Index(i)));
  }
  model.meta["final"] = {{"train", cfg.to_json()}, {"iterations", trace.size()}, {"objective", F}};
  return trace;
}

// ---- inspection ----

std::vector<RankedSample> top_activated_samples(const Tensor& a, std::size_t j, std::size_t k_top) {
  if (j >= a.cols()) throw UsageError("top_activated_samples: concept " + std::to_string(j) + " out of range");
  std::vector<RankedSample> out;
  for (std::size_t r = 0; r < a.rows(); ++r) out.push_back({r, a.at(r, j)});
  std::stable_sort(out.begin(), out.end(), [](const RankedSample& x, const RankedSample& y) { return x.activation > y.activation; });
  out.resize(std::min(k_top, out.size()));
  return out;
}

std::vector<RankedSample> top_activated_samples(const ClassifierModel& model, std::span<const std::string> texts,
                                                std::size_t j, std::size_t k_top) {
  model.concepts.concept_at(j);
  return top_activated_samples(model.activations(texts), j, k_top);
}

json class_connection_report(const ClassifierModel& model, std::size_t m) {
  if (m == 0) throw UsageError("class_connection_report: m must be >= 1");
  const Tensor& W = model.params.at("final.w").value;
  json cats = json::array();
  for (std::size_t i = 0; i < model.n(); ++i) {
    std::vector<std::size_t> order(model.k());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return W.at(i, a) > W.at(i, b); });
    json top = json::array();
    for (std::size_t r = 0; r < std::min(m, order.size()); ++r) {
      std::size_t j = order[r];
      top.push_back({{"concept", j},
                     {"text", model.concepts.concept_at(j).text},
                     {"concept_category", model.concepts.class_of_concept(j)},
                     {"weight", W.at(i, j)}});
    }
    cats.push_back({{"category", i}, {"name", model.concepts.category_names()[i]}, {"top_concepts", top}});
  }
  return {{"categories", cats}};
}

// ---- black-box baseline ----

BaselineClassifier::BaselineClassifier(const ModelConfig& cfg, Vocab v, std::size_t n)
    : config(cfg), vocab(std::move(v)), n_categories(n), params(), backbone(cfg, params) {
  if (config.vocab_size != vocab.size()) throw ValidationError("baseline: config vocab_size does not match vocab");
  if (n < 2) throw ValidationError("baseline: need at least 2 categories");
  std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);
  params.add("head.w", normal_init(cfg.d_model, n, 0.02, rng));
  params.add("head.b", Tensor::matrix(1, n));
}

std::vector<double> BaselineClassifier::train(std::span<const std::string> texts, std::span<const int> labels,
                                              const ClassifierTrainConfig& cfg) {
  if (texts.size() != labels.size() || texts.empty()) throw UsageError("baseline train: need one label per text");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= n_categories) throw ValidationError("baseline train: label out of range");
  auto seqs = encode_classifier_inputs(vocab, texts, config.context);
  ParamList trainable = params.list();
  AdamState adam(trainable, AdamConfig{cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : epoch_batches(seqs.size(), cfg.batch_size, rng)) {
      zero_grads(trainable);
      Tape tape;
      TokenBatch batch = gather_batch(seqs, idx);
      Var pooled = backbone.pool(tape, backbone.forward_hidden(tape, batch, true, &rng), batch);
      Var z = tape.add_row(tape.matmul(pooled, tape.param(params.at("head.w"))), tape.param(params.at("head.b")));
      std::vector<int> y;
      for (auto i : idx) y.push_back(labels[i]);
      Var loss = tape.cross_entropy(z, y);
      total += tape.value(loss)[0] * double(idx.size());
      tape.backward(loss);
      if (cfg.clip_norm > 0) clip_grad_norm(trainable, cfg.clip_norm);
      adam_step(trainable, adam);
    }
    trace.push_back(total / double(seqs.size()));
  }
  trained = true;
  meta["train"] = cfg.to_json();
  meta["loss_trace"] = trace;
  return trace;
}

std::vector<Prediction> BaselineClassifier::predict(std::span<const std::string> texts) const {
  auto seqs = encode_classifier_inputs(vocab, texts, config.context);
  Tensor all = Tensor::matrix(texts.size(), n_categories);
  auto& ps = const_cast<ParamStore&>(params);
  for (const auto& idx : ordered_batches(seqs.size(), kInferenceBatch)) {
    Tape tape(false);
    TokenBatch batch = gather_batch(seqs, idx);
    Var pooled = backbone.pool(tape, backbone.forward_hidden(tape, batch), batch);
    const Tensor& z = tape.value(tape.add_row(tape.matmul(pooled, tape.param(ps.at("head.w"))), tape.param(ps.at("head.b"))));
    for (std::size_t r = 0; r < idx.size(); ++r) std::copy(z.row(r).begin(), z.row(r).end(), all.row(idx[r]).begin());
  }
  return predictions_from_logits(all);
}

int BaselineClassifier::classify(const std::string& text) const {
  std::vector<std::string> one = {text};
  return predict(one)[0].category;
}

double accuracy(std::span<const Prediction> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size() || labels.empty()) throw UsageError("accuracy: need one label per prediction");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i].category == labels[i];
  return double(hit) / double(labels.size());
}

// The backbone addresses parameters through a pointer to the owning store,
// so copies and moves rebind it to their own `params`.
ClassifierModel::ClassifierModel(const ClassifierModel& other) : config(other.config), vocab(other.vocab), concepts(other.concepts), params(other.params), backbone(other.backbone), mask(other.mask), meta(other.meta) { backbone.rebind(params); }

ClassifierModel::ClassifierModel(ClassifierModel&& other) noexcept : config(std::move(other.config)), vocab(std::move(other.vocab)), concepts(std::move(other.concepts)), params(std::move(other.params)), backbone(std::move(other.backbone)), mask(std::move(other.mask)), meta(std::move(other.meta)) { backbone.rebind(params); }

ClassifierModel& ClassifierModel::operator=(const ClassifierModel& other) {
  if (this == &other) return *this;
  config = other.config;
  vocab = other.vocab;
  concepts = other.concepts;
  params = other.params;
  backbone = other.backbone;
  mask = other.mask;
  meta = other.meta;
  backbone.rebind(params);
  return *this;
}

ClassifierModel& ClassifierModel::operator=(ClassifierModel&& other) noexcept {
  if (this == &other) return *this;
  config = std::move(other.config);
  vocab = std::move(other.vocab);
  concepts = std::move(other.concepts);
  params = std::move(other.params);
  backbone = std::move(other.backbone);
  mask = std::move(other.mask);
  meta = std::move(other.meta);
  backbone.rebind(params);
  return *this;
}

// The backbone addresses parameters through a pointer to the owning store,
// so copies and moves rebind it to their own `params`.
BaselineClassifier::BaselineClassifier(const BaselineClassifier& other) : config(other.config), vocab(other.vocab), n_categories(other.n_categories), params(other.params), backbone(other.backbone), trained(other.trained), meta(other.meta) { backbone.rebind(params); }

BaselineClassifier::BaselineClassifier(BaselineClassifier&& other) noexcept : config(std::move(other.config)), vocab(std::move(other.vocab)), n_categories(std::move(other.n_categories)), params(std::move(other.params)), backbone(std::move(other.backbone)), trained(std::move(other.trained)), meta(std::move(other.meta)) { backbone.rebind(params); }

BaselineClassifier& BaselineClassifier::operator=(const BaselineClassifier& other) {
  if (this == &other) return *this;
  config = other.config;
  vocab = other.vocab;
  n_categories = other.n_categories;
  params = other.params;
  backbone = other.backbone;
  trained = other.trained;
  meta = other.meta;
  backbone.rebind(params);
  return *this;
}

BaselineClassifier& BaselineClassifier::operator=(BaselineClassifier&& other) noexcept {
  if (this == &other) return *this;
  config = std::move(other.config);
  vocab = std::move(other.vocab);
  n_categories = std::move(other.n_categories);
  params = std::move(other.params);
  backbone = std::move(other.backbone);
  trained = std::move(other.trained);
  meta = std::move(other.meta);
  backbone.rebind(params);
  return *this;
}

}  // namespace cbllm
