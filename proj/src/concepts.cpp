#include "cbllm/concepts.hpp"

#include <set>

#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

using nlohmann::json;

ConceptSet::ConceptSet(std::vector<std::string> category_names, std::vector<Concept> concepts)
    : category_names_(std::move(category_names)), concepts_(std::move(concepts)) {
  if (category_names_.empty()) throw ValidationError("concept set: no categories");
  std::vector<std::size_t> per(category_names_.size(), 0);
  std::set<std::string> seen;
  for (const auto& c : concepts_) {
    if (c.category < 0 || static_cast<std::size_t>(c.category) >= category_names_.size()) {
      throw ValidationError("concept set: concept '" + c.text + "' has category " + std::to_string(c.category) +
                            " outside [0, " + std::to_string(category_names_.size()) + ")");
    }
    if (c.text.empty()) throw ValidationError("concept set: empty concept text");
    if (!seen.insert(c.text).second) throw ValidationError("concept set: duplicate concept '" + c.text + "'");
    ++per[static_cast<std::size_t>(c.category)];
  }
  for (std::size_t i = 0; i < per.size(); ++i) {
    if (per[i] == 0) throw ValidationError("concept set: category '" + category_names_[i] + "' has no concepts");
  }
}

const Concept& ConceptSet::concept_at(std::size_t j) const {
  if (j >= concepts_.size()) {
    throw UsageError("concept index " + std::to_string(j) + " out of range [0, " + std::to_string(k()) + ")");
  }
  return concepts_[j];
}

int ConceptSet::class_of_concept(std::size_t j) const { return concept_at(j).category; }

std::vector<std::size_t> ConceptSet::block(int category) const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < concepts_.size(); ++j)
    if (concepts_[j].category == category) out.push_back(j);
  return out;
}

int ConceptSet::find(const std::string& text) const {
  for (std::size_t j = 0; j < concepts_.size(); ++j)
    if (concepts_[j].text == text) return static_cast<int>(j);
  return -1;
}

json ConceptSet::to_json() const {
  json cats = json::array();
  for (std::size_t i = 0; i < n(); ++i) {
    json texts = json::array();
    for (const auto& c : concepts_)
      if (c.category == static_cast<int>(i)) texts.push_back(c.text);
    cats.push_back({{"name", category_names_[i]}, {"concepts", texts}});
  }
  return {{"categories", cats}};
}

ConceptSet ConceptSet::from_json(const json& j) {
  std::vector<std::string> names;
  std::vector<Concept> concepts;
  try {
    const auto& cats = j.at("categories");
    if (!cats.is_array()) throw ValidationError("concept set: \"categories\" must be an array");
    for (const auto& c : cats) {
      names.push_back(c.at("name").get<std::string>());
      for (const auto& t : c.at("concepts")) concepts.push_back({t.get<std::string>(), static_cast<int>(names.size() - 1)});
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("concept set: ") + e.what());
  }
  return ConceptSet(std::move(names), std::move(concepts));
}

ConceptSet load_concept_set(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("concept set '" + path + "': " + e.what());
  }
  return ConceptSet::from_json(j);
}

ConceptSet singleton_concepts(const std::vector<std::string>& category_names) {
  std::vector<Concept> cs;
  for (std::size_t i = 0; i < category_names.size(); ++i) cs.push_back({category_names[i], static_cast<int>(i)});
  return ConceptSet(category_names, std::move(cs));
}

}  // namespace cbllm
