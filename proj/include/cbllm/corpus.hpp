#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace cbllm {

// Reserved vocabulary ids, fixed in this order.
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumReserved = 4;

struct TextSample {
  std::string text;
  int label = 0;
  std::string split;  // "train", "test", or empty
};

struct Dataset {
  std::vector<std::string> category_names;
  std::vector<TextSample> samples;

  std::size_t n_categories() const { return category_names.size(); }
  // Samples whose split tag equals `split`, preserving order.
  Dataset subset(const std::string& split) const;
  std::vector<int> labels() const;
  std::vector<std::string> texts() const;
};

// Whitespace tokenizer shared by the vocabulary and the hash embedding backend.
std::vector<std::string> split_words(const std::string& text);

// Word-level vocabulary. Ids 0..3 are <bos>, <eos>, <pad>, <unk>.
class Vocab {
 public:
  Vocab();
  explicit Vocab(std::vector<std::string> words);  // non-reserved words, in id order

  std::size_t size() const { return tokens_.size(); }
  int id(const std::string& word) const;  // kUnk when absent
  const std::string& token(int id) const;
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  // Stable 64-bit FNV-1a digest of the token list, used to detect tokenizer mismatch.
  std::uint64_t fingerprint() const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Descending frequency, ties lexicographic; keeps at most max_size entries
// including the reserved four.
Vocab build_vocab(std::span<const std::string> texts, std::size_t max_size);

std::vector<int> encode(const std::string& text, const Vocab& vocab);
std::string decode(std::span<const int> ids, const Vocab& vocab);

// One JSON object per line with "text" and integer "label" (optional "split").
// Labels must lie in [0, n_categories).
std::vector<TextSample> load_jsonl(const std::string& path, std::size_t n_categories);
void save_jsonl(const std::string& path, std::span<const TextSample> samples);

// ---- synthetic corpus ----

struct SynthCategory {
  std::string name;
  std::vector<std::string> markers;
};

// Templates are whitespace-separated words where "{m}" is replaced by a marker
// of the sample's category and "{f}" by a neutral filler word. Each sample
// joins between min_sentences and max_sentences template instances with ".".
struct SynthSpec {
  std::vector<SynthCategory> categories;
  std::vector<std::string> templates;
  std::vector<std::string> fillers;
  std::size_t samples_per_category = 500;
  std::size_t test_per_category = 0;
  std::size_t min_sentences = 1;
  std::size_t max_sentences = 2;
  std::uint64_t seed = 7;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);
};

SynthSpec load_synth_spec(const std::string& path);

// Train samples first (samples_per_category per category, interleaved by
// category), then test samples. Deterministic in spec.seed.
Dataset synth_generate(const SynthSpec& spec);

// Samples of `category` that additionally contain `extra_per_sample` words
// drawn from `injected` (typically another category's markers). These break
// marker purity on purpose and are used for the unlearning scenario.
std::vector<TextSample> synth_mixed(const SynthSpec& spec, int category, std::span<const std::string> injected,
                                    std::size_t count, std::size_t extra_per_sample, std::uint64_t seed);

// Category whose markers occur most often in `text`; ties and marker-free
// texts resolve to the lowest index (-1 if no marker at all). The noise-free
// oracle classifier for the synthetic corpus.
int marker_count_class(const SynthSpec& spec, const std::string& text);
// Per-category marker counts for `text`.
std::vector<int> marker_counts(const SynthSpec& spec, const std::string& text);

}  // namespace cbllm
