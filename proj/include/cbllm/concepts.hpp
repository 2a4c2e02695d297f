#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace cbllm {

struct Concept {
  std::string text;
  int category = 0;
};

// The concept set C = union of C_i with the mapping M (concept -> category).
// Global concept order is file order and is the CBL neuron order everywhere.
class ConceptSet {
 public:
  ConceptSet() = default;
  ConceptSet(std::vector<std::string> category_names, std::vector<Concept> concepts);

  std::size_t n() const { return category_names_.size(); }
  std::size_t k() const { return concepts_.size(); }
  const std::vector<std::string>& category_names() const { return category_names_; }
  const std::vector<Concept>& concepts() const { return concepts_; }
  const Concept& concept_at(std::size_t j) const;
  // M(c_j). Throws UsageError when j >= k.
  int class_of_concept(std::size_t j) const;
  // Indices of the concepts owned by category i, ascending.
  std::vector<std::size_t> block(int category) const;
  // Index of the concept with this exact text, or -1.
  int find(const std::string& text) const;

  // {categories:[{name, concepts:[text...]}]}
  nlohmann::json to_json() const;
  static ConceptSet from_json(const nlohmann::json& j);

  friend bool operator==(const ConceptSet& a, const ConceptSet& b) {
    if (a.category_names_ != b.category_names_ || a.concepts_.size() != b.concepts_.size()) return false;
    for (std::size_t i = 0; i < a.concepts_.size(); ++i)
      if (a.concepts_[i].text != b.concepts_[i].text || a.concepts_[i].category != b.concepts_[i].category) return false;
    return true;
  }

 private:
  std::vector<std::string> category_names_;
  std::vector<Concept> concepts_;
};

ConceptSet load_concept_set(const std::string& path);

// One concept per category, named after the category (the generation setting:
// "use the labels of these datasets as concept labels directly", §4.2).
ConceptSet singleton_concepts(const std::vector<std::string>& category_names);

}  // namespace cbllm
