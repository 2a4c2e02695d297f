#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cbllm/corpus.hpp"
#include "cbllm/params.hpp"
#include "cbllm/tape.hpp"
#include "json.hpp"

namespace cbllm {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t context = 128;
  float dropout = 0.0f;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Variable-length token sequences packed back to back; sequence s occupies
// rows offsets[s] .. offsets[s+1] of every per-position tensor.
struct TokenBatch {
  std::vector<int> ids;
  std::vector<std::size_t> offsets{0};

  std::size_t sequences() const { return offsets.size() - 1; }
  std::size_t tokens() const { return ids.size(); }
  void add(std::span<const int> seq);
  // Row of the last position of each sequence.
  std::vector<std::size_t> last_rows() const;
};

// Classification input: <bos> + encoded words, truncated from the right so the
// whole sequence fits the context. `truncated` reports whether words were cut.
std::vector<int> classifier_ids(std::span<const int> words, std::size_t context, bool* truncated = nullptr);

// classifier_ids for every text; truncated[i] is set when text i was cut.
std::vector<std::vector<int>> encode_classifier_inputs(const Vocab& vocab, std::span<const std::string> texts,
                                                       std::size_t context, std::vector<std::uint8_t>* truncated = nullptr);

// A shuffled partition of [0, n) into consecutive batches of at most `batch`.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::mt19937_64& rng);
// [0, n) in order, in batches of at most `batch`.
std::vector<std::vector<std::size_t>> ordered_batches(std::size_t n, std::size_t batch);

TokenBatch gather_batch(const std::vector<std::vector<int>>& seqs, std::span<const std::size_t> indices);

// Tiny pre-LN decoder-only transformer (theta_1). Parameters live in the
// owning model's ParamStore under the "backbone." prefix.
class Backbone {
 public:
  // Registers freshly initialised parameters in `store`.
  Backbone(const ModelConfig& cfg, ParamStore& store);

  const ModelConfig& config() const { return cfg_; }
  ParamList parameters() { return store_->list(kPrefix); }
  // Points the backbone at another store holding the same parameter names;
  // owners call this after copying or moving their ParamStore.
  void rebind(ParamStore& store) { store_ = &store; }

  // Per-position hidden states [tokens x d_model]. Causal within each packed
  // sequence. Dropout applies only when `train` is set (needs rng).
  Var forward_hidden(Tape& tape, const TokenBatch& batch, bool train = false, std::mt19937_64* rng = nullptr) const;
  // f_LM(x): the last position of each sequence, [sequences x d_model].
  Var pool(Tape& tape, Var hidden, const TokenBatch& batch) const;

  static constexpr const char* kPrefix = "backbone.";

 private:
  Var linear(Tape& tape, Var x, const std::string& w, const std::string& b) const;
  Var norm(Tape& tape, Var x, const std::string& name) const;
  Var p(Tape& tape, const std::string& name) const;

  ModelConfig cfg_;
  ParamStore* store_;
};

}  // namespace cbllm
