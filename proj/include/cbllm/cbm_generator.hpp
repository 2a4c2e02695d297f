#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cbllm/adam.hpp"
#include "cbllm/backbone.hpp"
#include "cbllm/concepts.hpp"
#include "cbllm/corpus.hpp"
#include "cbllm/params.hpp"
#include "json.hpp"

namespace cbllm {

// Architecture and loss-set switches of CB-LLM (generation). These are part of
// the model (recorded in checkpoints), not per-run training knobs.
struct GeneratorOptions {
  bool adversarial = true;              // Module 2 (L_e, L_d) on; off = "w/o ADV training" arm
  bool concept_loss_last_only = false;  // concept-loss-at: all (default) | last
  bool adv_backbone = false;            // route L_e into theta_1 as well as theta_3
  std::size_t unsup_width = 0;          // 0 = d_model - k when positive, else d_model
  double lambda = 2.5e-3;                // weight of R(W) on the CBL rows of theta_4 (ledger: tuned)
  double alpha = 0.99;

  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorOptions from_json(const nlohmann::json& j);
};

struct GenTrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 32;
  float lr = 1e-3f;
  float probe_lr = 1e-2f;       // theta_5 has its own optimizer (discriminator step size)
  std::size_t probe_steps = 0;  // extra L_d-only probe updates per batch before the joint step
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static GenTrainConfig from_json(const nlohmann::json& j);
};

// One neuron override: the post-relu CBL activation `neuron` is replaced by
// `value` at every step (section 4.2 uses 100 for the target, 0 for the rest).
struct Intervention {
  std::size_t neuron = 0;
  float value = 0.0f;
};
using InterventionSpec = std::vector<Intervention>;

// ValidationError on an index >= k or a non-finite value.
void validate_interventions(const InterventionSpec& spec, std::size_t k);
// The section 4.2 protocol: `value` on `target`, 0 on every other neuron.
InterventionSpec steer_towards(std::size_t target, std::size_t k, float value = 100.0f);

// Teacher-forced training batch: inputs are <bos> w1..wn, targets w1..wn <eos>.
struct GenBatch {
  TokenBatch inputs;
  std::vector<int> targets;         // next token per row
  std::vector<int> concept_rows;    // concept label per row; -1 = unsupervised row
};

// Encodes (text, concept label) pairs. Texts without words are skipped and
// counted in *skipped. Sequences are cut to the model context.
std::vector<std::vector<int>> encode_lm_sequences(const Vocab& vocab, std::span<const std::string> texts,
                                                  std::size_t context, std::vector<std::uint8_t>* kept = nullptr);
GenBatch make_gen_batch(const std::vector<std::vector<int>>& seqs, std::span<const int> concept_labels,
                        std::span<const std::size_t> indices, bool last_only);

// Concept label per sample: the single concept of the sample's category.
// ValidationError unless every category owns exactly one concept.
std::vector<int> concept_labels_for(const ConceptSet& concepts, std::span<const int> labels);

// Tape nodes of one forward pass.
struct GenForward {
  Var hidden;  // theta_1 output, [rows x d]
  Var cbl;     // f+_CBL, post-relu and post-override, [rows x k]
  Var unsup;   // f_unsup, [rows x u]
  Var logits;  // f_FL(concat(cbl, unsup)), [rows x V]
};

struct StepOutput {
  std::vector<float> logits;       // next-token logits at the last position
  std::vector<float> activations;  // post-override CBL activations there
};

// Per-position concept readout (Fig. 4): activations after reading each word.
struct ConceptDetection {
  std::vector<std::string> tokens;
  std::vector<int> argmax;
  std::vector<std::vector<float>> activations;
  bool truncated = false;
  nlohmann::json to_json() const;
};

struct FinalFeatures {
  Tensor cbl;    // [N x k]
  Tensor unsup;  // [N x u]
};

// CB-LLM (generation): backbone (theta_1), CBL "cbl.*" (theta_2), unsupervised
// layer "unsup.*" (theta_3), unembedding "fl.w" [(k+u) x V] + "fl.b" (theta_4;
// rows 0..k-1 read the CBL slice) and the training-only probe "probe.*"
// (theta_5, u -> k).
class GenerativeModel {
 public:
  GenerativeModel(const ModelConfig& cfg, Vocab vocab, ConceptSet concepts, GeneratorOptions options);
  GenerativeModel(const GenerativeModel& other);
  GenerativeModel(GenerativeModel&& other) noexcept;
  GenerativeModel& operator=(const GenerativeModel& other);
  GenerativeModel& operator=(GenerativeModel&& other) noexcept;
  ~GenerativeModel() = default;

  std::size_t k() const { return concepts.k(); }
  std::size_t u() const { return unsup_width_; }
  std::size_t vocab_size() const { return config.vocab_size; }
  bool has_probe() const { return params.contains("probe.w"); }
  void drop_probe();
  // Re-creates a freshly initialised probe (e.g. to continue training an
  // inference checkpoint).
  void attach_probe(std::uint64_t seed);

  GenForward forward(Tape& tape, const TokenBatch& batch, bool train = false, std::mt19937_64* rng = nullptr,
                     const InterventionSpec& interventions = {}) const;
  // Probe logits g_c(x) for u-wide features x; UsageError without a probe.
  Var probe_logits(Tape& tape, Var features, bool as_constant) const;

  // UsageError when the prefix is empty or longer than the context.
  StepOutput forward_step(std::span<const int> prefix, const InterventionSpec& interventions = {}) const;
  ConceptDetection detect_concepts(const std::string& text) const;
  // CBL and f_unsup features at the final position of <bos> + words.
  FinalFeatures final_features(std::span<const std::string> texts) const;

  ModelConfig config;
  Vocab vocab;
  ConceptSet concepts;
  GeneratorOptions options;
  ParamStore params;
  Backbone backbone;
  nlohmann::json meta = nlohmann::json::object();

 private:
  std::size_t unsup_width_;
};

struct LossBreakdown {
  double concept_loss = 0.0;  // L_c
  double token = 0.0;         // L_t
  double entropy = 0.0;       // L_e
  double detection = 0.0;     // L_d
  double reg_raw = 0.0;       // R(W)
  double reg = 0.0;           // lambda * R(W)
  double total = 0.0;         // value that was differentiated
  std::size_t rows = 0;

  nlohmann::json to_json() const;
};

struct GenLossTerms {
  Var concept_loss, token, entropy, detection, reg_raw, reg, total;
  bool adversarial = false;
};

// Mean over rows of sum_j p_j log p_j with p = softmax(logits) (Eq. 7's
// negative entropy; 0 log 0 = 0).
Var negative_entropy(Tape& tape, Var logits);

// Builds Eq. 9 with the gradient routing of the design decisions:
//  L_c -> theta_1, theta_2;  L_t -> theta_1..theta_4;  R -> CBL rows of theta_4;
//  L_e -> theta_3 (+theta_1 with adv_backbone), probe weights held constant;
//  L_d -> theta_5 only (f_unsup output detached).
GenLossTerms gen_losses(Tape& tape, const GenerativeModel& model, const GenBatch& batch, bool train = false,
                        std::mt19937_64* rng = nullptr);
LossBreakdown read_breakdown(const Tape& tape, const GenLossTerms& terms, std::size_t rows);

// Adam states for theta_1..theta_4 ("main") and for the probe theta_5.
struct GenOptimizer {
  GenOptimizer(GenerativeModel& model, const GenTrainConfig& cfg);
  ParamList main_params, probe_params;
  AdamState main, probe;
};

// Discriminator catch-up: `steps` L_d-only updates of theta_5 on the batch's
// (frozen) f_unsup features. Returns the last detection loss.
double probe_steps(GenerativeModel& model, const GenBatch& batch, GenOptimizer& opt, std::size_t steps, double clip_norm);

// One optimizer step on the total loss (gradient norms clipped separately for
// the main parameters and the probe). Throws NumericFault (naming the term)
// and leaves parameters untouched if any term is non-finite.
LossBreakdown train_step(GenerativeModel& model, const GenBatch& batch, GenOptimizer& opt, double clip_norm,
                         std::mt19937_64& rng);

using EpochCallback = std::function<void(std::size_t epoch, const LossBreakdown& mean)>;
// Trains on (text, category label) pairs; returns the per-epoch mean breakdown.
std::vector<LossBreakdown> train_generator(GenerativeModel& model, std::span<const std::string> texts,
                                           std::span<const int> labels, const GenTrainConfig& cfg,
                                           const EpochCallback& on_epoch = {});

struct GenerateOptions {
  std::size_t max_tokens = 100;
  float temperature = 1.0f;  // 0 = greedy
  std::uint64_t seed = 0;
};

struct GenerationResult {
  std::vector<int> prompt;   // word ids after <bos>
  std::vector<int> tokens;   // emitted ids, including a final <eos> if sampled
  std::vector<std::vector<float>> trace;  // ConceptTrace: one k-vector per emitted token
  bool ended_with_eos = false;
  InterventionSpec interventions;

  // Emitted words only (reserved tokens dropped).
  std::string text(const Vocab& vocab) const;
  nlohmann::json to_json(const Vocab& vocab) const;
};

using TokenCallback = std::function<void(std::size_t step, int token, std::span<const float> activations)>;

// Autoregressive sampling from <bos> + prompt. <bos>, <pad> and <unk> are never
// sampled; generation stops after <eos> or max_tokens. The context window
// slides once the sequence outgrows it.
GenerationResult generate(const GenerativeModel& model, std::span<const int> prompt, const InterventionSpec& interventions,
                          const GenerateOptions& options, const TokenCallback& on_token = {});

// Self-describing record of one generation: sampler settings, the override
// set, emitted tokens and per-token activations. "id" is the FNV-1a digest of
// the rest of the record, so identical runs share an id.
nlohmann::json generation_transcript(const GenerativeModel& model, const GenerationResult& result,
                                     const GenerateOptions& options);

struct TokenWeight {
  int id = 0;
  std::string token;
  float weight = 0.0f;
};
// Vocabulary ranked by theta_4[j, v] descending (ties by id), reserved tokens excluded.
std::vector<TokenWeight> top_tokens_for_neuron(const GenerativeModel& model, std::size_t j, std::size_t m);

}  // namespace cbllm
