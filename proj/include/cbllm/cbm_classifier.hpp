#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cbllm/acs.hpp"
#include "cbllm/backbone.hpp"
#include "cbllm/concepts.hpp"
#include "cbllm/corpus.hpp"
#include "cbllm/params.hpp"
#include "json.hpp"

namespace cbllm {

// Step 4 (Eq. 3) optimisation settings, also used by the black-box baseline.
struct ClassifierTrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  float lr = 1e-3f;
  double clip_norm = 1.0;
  bool freeze_backbone = false;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ClassifierTrainConfig from_json(const nlohmann::json& j);
};

// Step 5 (Eq. 4) settings. Defaults are the paper's lambda = 0.0007, alpha = 0.99.
struct FinalTrainConfig {
  double lambda = 7e-4;
  double alpha = 0.99;
  std::size_t max_iters = 3000;
  double tol = 1e-9;  // stop when the objective improves by less than this (relative)

  void validate() const;
  nlohmann::json to_json() const;
  static FinalTrainConfig from_json(const nlohmann::json& j);
};

struct Prediction {
  int category = 0;
  std::vector<float> logits;
};

struct ExplanationItem {
  std::size_t concept_index = 0;
  std::string text;
  int concept_category = 0;
  float activation = 0.0f;    // A+_N(x)_j
  float contribution = 0.0f;  // W_ij * (mask (.) A+_N(x))_j for the predicted i
  bool unlearned = false;
};

struct Explanation {
  int category = 0;
  std::string category_name;
  std::vector<float> logits;
  std::vector<ExplanationItem> items;  // contribution descending, ties by concept index
  bool truncated = false;

  nlohmann::json to_json() const;
};

struct RankedSample {
  std::size_t index = 0;
  float activation = 0.0f;
};

// CB-LLM for classification: backbone (theta_1), CBL (theta_2: "cbl.w"
// [d x k], "cbl.b"), sparse final layer ("final.w" [n x k], "final.b") and a
// per-concept unlearn mask.
class ClassifierModel {
 public:
  ClassifierModel(const ModelConfig& cfg, Vocab vocab, ConceptSet concepts);
  ClassifierModel(const ClassifierModel& other);
  ClassifierModel(ClassifierModel&& other) noexcept;
  ClassifierModel& operator=(const ClassifierModel& other);
  ClassifierModel& operator=(ClassifierModel&& other) noexcept;
  ~ClassifierModel() = default;

  std::size_t k() const { return concepts.k(); }
  std::size_t n() const { return concepts.n(); }

  // A+_N = relu(f_CBL(f_LM(x))), [texts x k]. Texts longer than the context
  // are truncated from the right; truncated[i] flags them.
  Tensor activations(std::span<const std::string> texts, std::vector<std::uint8_t>* truncated = nullptr) const;
  // W (mask (.) A) + b, [rows x n].
  Tensor logits(const Tensor& activations) const;
  std::vector<Prediction> predict(std::span<const std::string> texts) const;
  Prediction predict(const std::string& text) const;
  // Top-r concepts by contribution to the predicted category. r must be >= 1;
  // r > k returns all k.
  Explanation explain(const std::string& text, std::size_t r) const;
  Explanation explain_activations(const Tensor& activation_row, std::size_t r, bool truncated = false) const;

  void unlearn(std::size_t j);
  void restore(std::size_t j);
  bool unlearned(std::size_t j) const;

  ModelConfig config;
  Vocab vocab;
  ConceptSet concepts;
  ParamStore params;
  Backbone backbone;
  std::vector<std::uint8_t> mask;  // 1 = concept unlearned
  nlohmann::json meta = nlohmann::json::object();  // training settings recorded in checkpoints

 private:
  Var cbl_pre(Tape& tape, Var pooled) const;
  friend std::vector<double> train_cbl(ClassifierModel&, std::span<const std::string>, const ConceptScores&,
                                       const ClassifierTrainConfig&, bool);
};

// Step 4: maximises the mean per-sample cosine between f_CBL(f_LM(x)) and
// S_c^ACC(x) (Eq. 3), jointly with theta_1 unless freeze_backbone. Refuses an
// uncorrected score matrix unless allow_uncorrected (the "CB-LLM" w/o ACC
// ablation). Returns the train-split mean cosine after each epoch.
std::vector<double> train_cbl(ClassifierModel& model, std::span<const std::string> texts, const ConceptScores& scores,
                              const ClassifierTrainConfig& cfg, bool allow_uncorrected = false);

// Step 5: fits final.w / final.b on precomputed activations minimising
// mean cross-entropy + lambda * R(W) (Eq. 4) by proximal gradient descent
// (FISTA with backtracking; bias unpenalised). theta_1/theta_2 are untouched.
// Returns the objective after each iteration.
std::vector<double> train_final(ClassifierModel& model, const Tensor& activations, std::span<const int> labels,
                                const FinalTrainConfig& cfg);

// R(W) = alpha * |W|_1 + (1 - alpha) * 0.5 * |W|_2^2.
double elastic_net_penalty(const Tensor& w, double alpha);

// Samples ranked by A+_N(x)_j descending; ties by sample index.
std::vector<RankedSample> top_activated_samples(const ClassifierModel& model, std::span<const std::string> texts,
                                                std::size_t j, std::size_t k_top);
std::vector<RankedSample> top_activated_samples(const Tensor& activations, std::size_t j, std::size_t k_top);

// Per category, the top-m concepts by W_ij descending (ties by concept index).
nlohmann::json class_connection_report(const ClassifierModel& model, std::size_t m);

// Plain fine-tuned tiny transformer: backbone + linear head on the pooled
// state. The black-box baseline of Table 2, and the learned steerability probe.
class BaselineClassifier {
 public:
  BaselineClassifier(const ModelConfig& cfg, Vocab vocab, std::size_t n_categories);
  BaselineClassifier(const BaselineClassifier& other);
  BaselineClassifier(BaselineClassifier&& other) noexcept;
  BaselineClassifier& operator=(const BaselineClassifier& other);
  BaselineClassifier& operator=(BaselineClassifier&& other) noexcept;
  ~BaselineClassifier() = default;

  std::vector<double> train(std::span<const std::string> texts, std::span<const int> labels,
                            const ClassifierTrainConfig& cfg);
  std::vector<Prediction> predict(std::span<const std::string> texts) const;
  int classify(const std::string& text) const;

  ModelConfig config;
  Vocab vocab;
  std::size_t n_categories;
  ParamStore params;
  Backbone backbone;
  bool trained = false;
  nlohmann::json meta = nlohmann::json::object();
};

double accuracy(std::span<const Prediction> predictions, std::span<const int> labels);

}  // namespace cbllm
