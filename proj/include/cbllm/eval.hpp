#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cbllm/backbone.hpp"
#include "cbllm/cbm_classifier.hpp"
#include "cbllm/cbm_generator.hpp"
#include "cbllm/corpus.hpp"
#include "json.hpp"

namespace cbllm {

// A scalar with its denominator (every reported metric carries one).
struct Metric {
  double value = 0.0;
  std::size_t count = 0;  // denominator the value was computed over
  std::string note;

  nlohmann::json to_json() const;
  static Metric from_json(const nlohmann::json& j);
  friend bool operator==(const Metric&, const Metric&) = default;
};

struct MetricsReport {
  std::map<std::string, Metric> metrics;
  nlohmann::json context = nlohmann::json::object();  // seeds, config hashes, dataset names

  void set(const std::string& name, double value, std::size_t count, std::string note = {});
  const Metric& at(const std::string& name) const;
  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  std::string to_csv() const;  // name,value,count,note
};

// Assigns a text to a category; -1 = no verdict (counts as a miss).
class TextCategorizer {
 public:
  virtual ~TextCategorizer() = default;
  virtual int categorize(const std::string& text) const = 0;
  virtual std::size_t n_categories() const = 0;
  virtual nlohmann::json describe() const = 0;
};

// Noise-free probe for the synthetic corpus: majority category of marker
// words, ties and marker-free texts -> -1.
class MarkerOracle final : public TextCategorizer {
 public:
  explicit MarkerOracle(SynthSpec spec) : spec_(std::move(spec)) {}
  int categorize(const std::string& text) const override { return marker_count_class(spec_, text); }
  std::size_t n_categories() const override { return spec_.categories.size(); }
  nlohmann::json describe() const override { return {{"kind", "marker-oracle"}}; }

 private:
  SynthSpec spec_;
};

// The learned steerability probe: a separately trained black-box classifier.
class LearnedProbe final : public TextCategorizer {
 public:
  explicit LearnedProbe(const BaselineClassifier& model);
  int categorize(const std::string& text) const override { return model_->classify(text); }
  std::size_t n_categories() const override { return model_->n_categories; }
  nlohmann::json describe() const override { return {{"kind", "learned-baseline"}}; }

 private:
  const BaselineClassifier* model_;
};

// Fraction of verdicts equal to 1 (e.g. [1,0,1,1] -> 0.75).
double success_rate(std::span<const std::uint8_t> verdicts);

struct SteerabilityResult {
  std::vector<double> per_category;
  double mean = 0.0;
  std::size_t n_per_category = 0;
  std::size_t tokens_per_sample = 0;
  std::uint64_t seed = 0;
  float value = 100.0f;
  std::vector<std::vector<std::vector<int>>> samples;  // [category][sample] emitted ids

  nlohmann::json to_json(bool with_samples = false, const Vocab* vocab = nullptr) const;
};

// Section 4.2: for each concept c, n generations from <bos> with value on c and
// 0 elsewhere; score = fraction the probe assigns to c's category.
SteerabilityResult steerability_score(const GenerativeModel& model, const TextCategorizer& probe, std::size_t n_per_category,
                                      std::size_t tokens_per_sample, std::uint64_t seed, float value = 100.0f,
                                      float temperature = 1.0f);

// Next-token model scored by perplexity. token_nll gets <bos> + tokens and
// returns -log p(token_t | prefix) for every token after <bos>.
class NextTokenModel {
 public:
  virtual ~NextTokenModel() = default;
  virtual const Vocab& tokenizer() const = 0;
  virtual std::vector<double> token_nll(std::span<const int> ids) const = 0;
};

// Plain tiny LM (backbone + "lm.w"/"lm.b" head) used as the reference judge.
class ReferenceLM final : public NextTokenModel {
 public:
  ReferenceLM(const ModelConfig& cfg, Vocab vocab);
  ReferenceLM(const ReferenceLM& other);
  ReferenceLM(ReferenceLM&& other) noexcept;
  ReferenceLM& operator=(const ReferenceLM& other);
  ReferenceLM& operator=(ReferenceLM&& other) noexcept;
  ~ReferenceLM() = default;

  std::vector<double> train(std::span<const std::string> texts, const GenTrainConfig& cfg);
  const Vocab& tokenizer() const override { return vocab; }
  std::vector<double> token_nll(std::span<const int> ids) const override;

  ModelConfig config;
  Vocab vocab;
  ParamStore params;
  Backbone backbone;
  nlohmann::json meta = nlohmann::json::object();

 private:
  Var head(Tape& tape, Var hidden) const;
};

// exp(mean NLL) of the emitted tokens of each sequence (a <bos> is
// prepended). ValidationError if `tokenizer` differs from the reference's.
Metric perplexity(const NextTokenModel& reference, std::span<const std::vector<int>> sequences, const Vocab& tokenizer);

// Fraction of samples whose final-position argmax CBL neuron is the label's
// concept. ValidationError if k != n; UsageError on an empty dataset.
Metric concept_detection_accuracy(const GenerativeModel& model, std::span<const std::string> texts,
                                  std::span<const int> labels);
Metric concept_detection_accuracy(const Tensor& final_activations, std::span<const int> concept_labels);

// Held-out accuracy of a fresh softmax-regression probe trained on the train
// features (standardised with train statistics). UsageError if any category
// has fewer than 10 training rows.
Metric probe_accuracy(const Tensor& train_features, std::span<const int> train_labels, const Tensor& test_features,
                      std::span<const int> test_labels, std::size_t n_categories, std::uint64_t seed = 0);

struct UnlearningReport {
  std::size_t concept_index = 0;
  std::vector<std::size_t> dominated;  // samples where j had the top contribution to the pre-unlearn class
  std::vector<std::size_t> flipped;    // all samples whose prediction changed
  std::size_t dominated_flipped = 0;
  double flip_rate = 0.0;              // dominated_flipped / dominated.size()
  std::size_t samples = 0;

  nlohmann::json to_json() const;
};

// Compares predictions before/after unlearning j; the model's mask is left as
// it was found.
UnlearningReport unlearning_report(ClassifierModel& model, std::span<const std::string> texts, std::size_t j);

}  // namespace cbllm
