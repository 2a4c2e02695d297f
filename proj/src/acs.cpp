#include "cbllm/acs.hpp"

#include <cmath>
#include <filesystem>
#include <set>

#include "cbllm/bundle.hpp"
#include "cbllm/corpus.hpp"
#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void l2_normalize(std::vector<float>& v) {
  double n2 = 0.0;
  for (float x : v) n2 += double(x) * x;
  if (n2 <= 0.0) return;
  double inv = 1.0 / std::sqrt(n2);
  for (float& x : v) x = static_cast<float>(x * inv);
}

}  // namespace

// ---- hash TF-IDF ----

HashTfidfBackend::HashTfidfBackend(std::span<const std::string> corpus, std::size_t d, std::uint64_t seed)
    : d_(d), seed_(seed), n_docs_(corpus.size()), idf_(d) {
  if (d < 64) throw UsageError("hash_tfidf_backend: dimension must be >= 64, got " + std::to_string(d));
  std::vector<std::size_t> df(d, 0);
  for (const auto& text : corpus) {
    std::set<std::size_t> buckets;
    for (const auto& w : split_words(text)) buckets.insert(bucket(w));
    for (auto b : buckets) ++df[b];
  }
  for (std::size_t b = 0; b < d; ++b) {
    idf_[b] = static_cast<float>(std::log((1.0 + double(n_docs_)) / (1.0 + double(df[b]))) + 1.0);
  }
}

std::size_t HashTfidfBackend::bucket(const std::string& word) const {
  std::uint64_t h = fnv1a_bytes(&seed_, sizeof(seed_));
  return static_cast<std::size_t>(fnv1a(word, h) % d_);
}

std::vector<float> HashTfidfBackend::embed(const std::string& text) const {
  std::vector<float> v(d_, 0.0f);
  auto words = split_words(text);
  if (words.empty()) {
    v[bucket("<unk>")] = 1.0f;
    return v;
  }
  for (const auto& w : words) v[bucket(w)] += 1.0f;
  for (std::size_t b = 0; b < d_; ++b) v[b] *= idf_[b];
  l2_normalize(v);
  return v;
}

json HashTfidfBackend::describe() const {
  return {{"name", "hash-tfidf"}, {"dim", d_}, {"hash", "fnv1a64"}, {"seed", seed_}, {"corpus_docs", n_docs_}};
}

// ---- file backend ----

FileBackend::FileBackend(const std::string& manifest_path) : path_(manifest_path) {
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw ValidationError("embedding manifest '" + manifest_path + "': " + e.what());
  }
  std::size_t count = 0;
  std::string array_file;
  try {
    d_ = m.at("dim").get<std::size_t>();
    count = m.at("count").get<std::size_t>();
    array_file = m.contains("array") ? (fs::path(manifest_path).parent_path() / m["array"].get<std::string>()).string()
                                     : blob_path_for(manifest_path);
    if (d_ == 0) throw ValidationError("embedding manifest '" + manifest_path + "': dim must be positive");
    for (const auto& e : m.at("entries")) {
      auto text = e.at("text").get<std::string>();
      auto idx = e.at("index").get<std::size_t>();
      if (idx >= count) {
        throw ValidationError("embedding manifest '" + manifest_path + "': entry '" + text + "' index " +
                              std::to_string(idx) + " >= count " + std::to_string(count));
      }
      if (!index_.emplace(text, idx).second) {
        throw ValidationError("embedding manifest '" + manifest_path + "': duplicate text '" + text + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError("embedding manifest '" + manifest_path + "': " + e.what());
  }
  std::string raw = read_file(array_file);
  if (raw.size() != count * d_ * 4) {
    throw ValidationError("embedding array '" + array_file + "' is " + std::to_string(raw.size()) + " bytes, expected " +
                          std::to_string(count) + " x " + std::to_string(d_) + " x 4 = " + std::to_string(count * d_ * 4));
  }
  data_ = floats_from_le_bytes(raw);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<float> v(data_.begin() + static_cast<std::ptrdiff_t>(i * d_),
                         data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * d_));
    double n2 = 0.0;
    for (float x : v) {
      if (!std::isfinite(x)) throw ValidationError("embedding array '" + array_file + "': non-finite value in row " + std::to_string(i));
      n2 += double(x) * x;
    }
    if (n2 == 0.0) throw ValidationError("embedding array '" + array_file + "': zero vector in row " + std::to_string(i));
    if (std::fabs(std::sqrt(n2) - 1.0) > 1e-5) {
      l2_normalize(v);
      std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>(i * d_));
      ++renormalized_;
    }
  }
}

std::vector<float> FileBackend::embed(const std::string& text) const {
  auto it = index_.find(text);
  if (it == index_.end()) throw LookupError("embedding file '" + path_ + "' has no entry for text \"" + text + "\"");
  return std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(it->second * d_),
                            data_.begin() + static_cast<std::ptrdiff_t>((it->second + 1) * d_));
}

json FileBackend::describe() const {
  return {{"name", "file"}, {"dim", d_}, {"manifest", fs::path(path_).filename().string()}, {"count", index_.size()}};
}

void save_embedding_file(const std::string& manifest_path, std::span<const std::string> texts,
                         std::span<const std::vector<float>> vectors) {
  if (texts.size() != vectors.size() || texts.empty()) {
    throw UsageError("save_embedding_file: need one vector per text");
  }
  std::size_t d = vectors[0].size();
  std::string raw;
  json entries = json::array();
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (vectors[i].size() != d) throw ValidationError("save_embedding_file: vector " + std::to_string(i) + " has the wrong width");
    raw += floats_to_le_bytes(vectors[i]);
    entries.push_back({{"text", texts[i]}, {"index", i}});
  }
  std::string blob = blob_path_for(manifest_path);
  json m = {{"dim", d}, {"count", texts.size()}, {"entries", entries}, {"array", fs::path(blob).filename().string()}};
  write_file(blob, raw);
  write_file(manifest_path, m.dump(2) + "\n");
}

// ---- Eq. 1 / Eq. 2 ----

ConceptScores concept_scores(const EmbeddingBackend& backend, const ConceptSet& concepts,
                             std::span<const std::string> texts) {
  const std::size_t k = concepts.k(), d = backend.dim();
  if (k == 0) throw UsageError("concept_scores: empty concept set");
  if (texts.empty()) throw UsageError("concept_scores: no samples");
  std::vector<std::vector<float>> ce;
  for (std::size_t j = 0; j < k; ++j) {
    try {
      ce.push_back(backend.embed(concepts.concept_at(j).text));
    } catch (const LookupError& e) {
      throw LookupError("concept " + std::to_string(j) + ": " + e.what());
    }
    if (ce.back().size() != d) throw ValidationError("concept_scores: backend returned a vector of the wrong width");
  }
  ConceptScores out{Tensor::matrix(texts.size(), k), false, backend.describe()};
  for (std::size_t i = 0; i < texts.size(); ++i) {
    std::vector<float> e;
    try {
      e = backend.embed(texts[i]);
    } catch (const LookupError& err) {
      throw LookupError("sample " + std::to_string(i) + ": " + err.what());
    } catch (const Error& err) {
      throw Error("sample " + std::to_string(i) + ": " + err.what());
    }
    if (e.size() != d) throw ValidationError("concept_scores: backend returned a vector of the wrong width");
    for (std::size_t j = 0; j < k; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += double(ce[j][c]) * e[c];
      out.scores.at(i, j) = static_cast<float>(dot);
    }
  }
  return out;
}

ConceptScores acc_correct(const ConceptScores& m, std::span<const int> labels, const ConceptSet& concepts) {
  if (labels.size() != m.scores.rows()) {
    throw UsageError("acc_correct: " + std::to_string(labels.size()) + " labels for " + std::to_string(m.scores.rows()) +
                     " score rows");
  }
  if (m.scores.cols() != concepts.k()) {
    throw UsageError("acc_correct: score matrix has " + std::to_string(m.scores.cols()) + " columns, concept set has k=" +
                     std::to_string(concepts.k()));
  }
  ConceptScores out = m;
  out.corrected = true;
  const std::size_t k = concepts.k();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= concepts.n()) {
      throw ValidationError("acc_correct: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " outside [0, " + std::to_string(concepts.n()) + ")");
    }
    for (std::size_t j = 0; j < k; ++j) {
      float& s = out.scores.at(i, j);
      if (!(s > 0.0f) || concepts.class_of_concept(j) != labels[i]) s = 0.0f;
    }
  }
  return out;
}

void save_scores(const std::string& manifest_path, const ConceptScores& s) {
  Bundle b;
  b.manifest = {{"kind", "concept_scores"}, {"corrected", s.corrected}, {"backend", s.backend}};
  b.arrays.emplace("scores", s.scores);
  save_bundle(manifest_path, b);
}

ConceptScores load_scores(const std::string& manifest_path) {
  Bundle b = load_bundle(manifest_path);
  if (b.manifest.value("kind", "") != "concept_scores") {
    throw ValidationError("'" + manifest_path + "' is a '" + b.manifest.value("kind", "?") + "' file, not concept_scores");
  }
  auto it = b.arrays.find("scores");
  if (it == b.arrays.end()) throw ValidationError("'" + manifest_path + "': missing 'scores' array");
  return {it->second, b.manifest.value("corrected", false), b.manifest.value("backend", json::object())};
}

}  // namespace cbllm
