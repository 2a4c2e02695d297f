#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cbllm/concepts.hpp"
#include "cbllm/tensor.hpp"
#include "json.hpp"

namespace cbllm {

// Sentence embedding model E (§3.1 Step 2): unit-norm vectors of fixed width.
class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<float> embed(const std::string& text) const = 0;
  // Identifies the backend in score manifests (name, dim, hash seed, ...).
  virtual nlohmann::json describe() const = 0;
};

// Token-hashed TF-IDF. Words hash (FNV-1a, seeded) into d buckets; bucket idf
// is ln((1 + N) / (1 + df)) + 1 over the fitting corpus; vectors are
// l2-normalized. Empty text maps to the "<unk>" bucket.
class HashTfidfBackend final : public EmbeddingBackend {
 public:
  HashTfidfBackend(std::span<const std::string> corpus, std::size_t d, std::uint64_t seed = 0);
  std::size_t dim() const override { return d_; }
  std::vector<float> embed(const std::string& text) const override;
  nlohmann::json describe() const override;
  std::size_t bucket(const std::string& word) const;

 private:
  std::size_t d_;
  std::uint64_t seed_;
  std::size_t n_docs_;
  std::vector<float> idf_;
};

// Precomputed embeddings: manifest {dim, count, entries:[{text, index}],
// array?} plus a raw little-endian float32 file of count x dim values
// (default "<manifest stem>.bin"). Stored vectors that are not unit-norm are
// normalized on load and counted.
class FileBackend final : public EmbeddingBackend {
 public:
  explicit FileBackend(const std::string& manifest_path);
  std::size_t dim() const override { return d_; }
  std::vector<float> embed(const std::string& text) const override;  // LookupError when absent
  nlohmann::json describe() const override;
  std::size_t renormalized() const { return renormalized_; }
  std::size_t count() const { return index_.size(); }

 private:
  std::string path_;
  std::size_t d_ = 0;
  std::vector<float> data_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t renormalized_ = 0;
};

// Writes a FileBackend manifest and array for (text, vector) pairs.
void save_embedding_file(const std::string& manifest_path, std::span<const std::string> texts,
                         std::span<const std::vector<float>> vectors);

// S_c (Eq. 1) and, when corrected, S_c^ACC (Eq. 2). Rows = samples, cols = k.
struct ConceptScores {
  Tensor scores;
  bool corrected = false;
  nlohmann::json backend;  // describe() of the producing backend
};

// Entry (x, j) = E(c_j) . E(x). Concept embeddings are computed once.
ConceptScores concept_scores(const EmbeddingBackend& backend, const ConceptSet& concepts,
                             std::span<const std::string> texts);

// Keeps (x, j) iff S(x)_j > 0 and M(c_j) == y(x); zero otherwise. Idempotent.
ConceptScores acc_correct(const ConceptScores& m, std::span<const int> labels, const ConceptSet& concepts);

void save_scores(const std::string& manifest_path, const ConceptScores& s);
ConceptScores load_scores(const std::string& manifest_path);

}  // namespace cbllm
