#include "cbllm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

using nlohmann::json;

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> r = {"<bos>", "<eos>", "<pad>", "<unk>"};
  return r;
}

}  // namespace

Dataset Dataset::subset(const std::string& split) const {
  Dataset d;
  d.category_names = category_names;
  for (const auto& s : samples)
    if (s.split == split) d.samples.push_back(s);
  return d;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

std::vector<std::string> Dataset::texts() const {
  std::vector<std::string> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.text);
  return out;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

// ---- Vocab ----

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> words) {
  tokens_ = reserved_tokens();
  for (auto& w : words) {
    if (w.empty() || w.find_first_of(" \t\n\r") != std::string::npos) {
      throw ValidationError("vocab: token '" + w + "' is empty or contains whitespace");
    }
    tokens_.push_back(std::move(w));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ValidationError("vocab: duplicate token '" + tokens_[i] + "'");
    }
  }
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw UsageError("vocab: id " + std::to_string(id) + " out of range [0, " + std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::uint64_t Vocab::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& t : tokens_) {
    h = fnv1a(t, h);
    h = fnv1a(std::string_view("\n", 1), h);
  }
  return h;
}

json Vocab::to_json() const {
  return json(std::vector<std::string>(tokens_.begin() + kNumReserved, tokens_.end()));
}

Vocab Vocab::from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("vocab: expected a JSON array of tokens");
  return Vocab(j.get<std::vector<std::string>>());
}

Vocab build_vocab(std::span<const std::string> texts, std::size_t max_size) {
  if (max_size < kNumReserved + 1) throw UsageError("build_vocab: max_size must be >= 5");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) ++counts[w];
  for (const auto& r : reserved_tokens()) counts.erase(r);
  if (counts.empty()) throw UsageError("build_vocab: corpus contains no words");
  std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
  // std::map iteration is lexicographic, so a stable sort by count keeps ties lexicographic.
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::size_t keep = std::min(items.size(), max_size - kNumReserved);
  std::vector<std::string> words;
  words.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) words.push_back(items[i].first);
  return Vocab(std::move(words));
}

std::vector<int> encode(const std::string& text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string decode(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

// ---- JSONL ----

std::vector<TextSample> load_jsonl(const std::string& path, std::size_t n_categories) {
  std::ifstream in(path);
  if (!in) throw ValidationError("load_jsonl: cannot open '" + path + "'");
  std::vector<TextSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto where = [&] { return path + ":" + std::to_string(lineno) + ": "; };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where() + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ValidationError(where() + "expected a JSON object");
    if (!j.contains("text") || !j["text"].is_string()) throw ValidationError(where() + "missing string field \"text\"");
    if (!j.contains("label") || !j["label"].is_number_integer()) {
      throw ValidationError(where() + "missing integer field \"label\"");
    }
    auto label = j["label"].get<long long>();
    if (label < 0 || static_cast<std::size_t>(label) >= n_categories) {
      throw ValidationError(where() + "label " + std::to_string(label) + " outside [0, " + std::to_string(n_categories) +
                            ")");
    }
    TextSample s{j["text"].get<std::string>(), static_cast<int>(label), ""};
    if (j.contains("split")) {
      if (!j["split"].is_string()) throw ValidationError(where() + "field \"split\" must be a string");
      s.split = j["split"].get<std::string>();
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_jsonl(const std::string& path, std::span<const TextSample> samples) {
  std::string body;
  for (const auto& s : samples) {
    json j = {{"text", s.text}, {"label", s.label}};
    if (!s.split.empty()) j["split"] = s.split;
    body += j.dump() + "\n";
  }
  write_file(path, body);
}

// ---- synthetic corpus ----

void SynthSpec::validate() const {
  if (categories.size() < 2) throw ValidationError("synth spec: need at least 2 categories");
  if (templates.empty()) throw ValidationError("synth spec: no templates");
  if (min_sentences < 1 || max_sentences < min_sentences) {
    throw ValidationError("synth spec: sentence range must satisfy 1 <= min <= max");
  }
  std::map<std::string, std::size_t> owner;
  for (std::size_t c = 0; c < categories.size(); ++c) {
    if (categories[c].markers.empty()) throw ValidationError("synth spec: category '" + categories[c].name + "' has no markers");
    for (const auto& m : categories[c].markers) {
      if (split_words(m).size() != 1 || m != split_words(m)[0]) {
        throw ValidationError("synth spec: marker '" + m + "' must be a single word");
      }
      auto [it, fresh] = owner.emplace(m, c);
      if (!fresh && it->second != c) {
        throw ValidationError("synth spec: marker '" + m + "' appears in categories '" + categories[it->second].name +
                              "' and '" + categories[c].name + "'");
      }
    }
  }
  for (const auto& f : fillers) {
    if (owner.count(f)) throw ValidationError("synth spec: filler '" + f + "' is also a marker");
  }
  for (const auto& t : templates) {
    auto words = split_words(t);
    bool has_marker = std::count(words.begin(), words.end(), "{m}") > 0;
    if (!has_marker) throw ValidationError("synth spec: template '" + t + "' has no {m} slot");
    for (const auto& w : words) {
      if (w == "{f}" && fillers.empty()) throw ValidationError("synth spec: template uses {f} but no fillers given");
      if (w != "{m}" && w != "{f}" && owner.count(w)) {
        throw ValidationError("synth spec: template '" + t + "' hard-codes marker '" + w + "'");
      }
    }
  }
}

json SynthSpec::to_json() const {
  json cats = json::array();
  for (const auto& c : categories) cats.push_back({{"name", c.name}, {"markers", c.markers}});
  return {{"categories", cats},
          {"templates", templates},
          {"fillers", fillers},
          {"samples_per_category", samples_per_category},
          {"test_per_category", test_per_category},
          {"min_sentences", min_sentences},
          {"max_sentences", max_sentences},
          {"seed", seed}};
}

SynthSpec SynthSpec::from_json(const json& j) {
  SynthSpec s;
  try {
    for (const auto& c : j.at("categories")) {
      s.categories.push_back({c.at("name").get<std::string>(), c.at("markers").get<std::vector<std::string>>()});
    }
    s.templates = j.at("templates").get<std::vector<std::string>>();
    s.fillers = j.value("fillers", std::vector<std::string>{});
    s.samples_per_category = j.value("samples_per_category", s.samples_per_category);
    s.test_per_category = j.value("test_per_category", s.test_per_category);
    s.min_sentences = j.value("min_sentences", s.min_sentences);
    s.max_sentences = j.value("max_sentences", s.max_sentences);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

SynthSpec load_synth_spec(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("synth spec '" + path + "': " + e.what());
  }
  return SynthSpec::from_json(j);
}

namespace {

std::string make_text(const SynthSpec& spec, int category, std::mt19937_64& rng) {
  const auto& markers = spec.categories[static_cast<std::size_t>(category)].markers;
  std::size_t n_sent = spec.min_sentences + draw_index(rng, spec.max_sentences - spec.min_sentences + 1);
  std::string out;
  for (std::size_t s = 0; s < n_sent; ++s) {
    const auto& tmpl = spec.templates[draw_index(rng, spec.templates.size())];
    for (const auto& w : split_words(tmpl)) {
      if (!out.empty()) out += ' ';
      if (w == "{m}") {
        out += markers[draw_index(rng, markers.size())];
      } else if (w == "{f}") {
        out += spec.fillers[draw_index(rng, spec.fillers.size())];
      } else {
        out += w;
      }
    }
    out += " .";
  }
  return out;
}

}  // namespace

Dataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  Dataset d;
  for (const auto& c : spec.categories) d.category_names.push_back(c.name);
  auto emit = [&](std::size_t per_category, const char* split) {
    for (std::size_t i = 0; i < per_category; ++i)
      for (std::size_t c = 0; c < spec.categories.size(); ++c) {
        d.samples.push_back({make_text(spec, static_cast<int>(c), rng), static_cast<int>(c), split});
      }
  };
  emit(spec.samples_per_category, "train");
  emit(spec.test_per_category, "test");
  return d;
}

std::vector<TextSample> synth_mixed(const SynthSpec& spec, int category, std::span<const std::string> injected,
                                    std::size_t count, std::size_t extra_per_sample, std::uint64_t seed) {
  spec.validate();
  if (category < 0 || static_cast<std::size_t>(category) >= spec.categories.size()) {
    throw UsageError("synth_mixed: category " + std::to_string(category) + " out of range");
  }
  if (injected.empty() && extra_per_sample > 0) throw UsageError("synth_mixed: no words to inject");
  std::mt19937_64 rng(seed);
  std::vector<TextSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    auto words = split_words(make_text(spec, category, rng));
    for (std::size_t e = 0; e < extra_per_sample; ++e) {
      // Insert before the final "." so the sample still ends a sentence.
      std::size_t pos = draw_index(rng, words.size());
      words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), injected[draw_index(rng, injected.size())]);
    }
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    out.push_back({std::move(text), category, "test"});
  }
  return out;
}

std::vector<int> marker_counts(const SynthSpec& spec, const std::string& text) {
  std::unordered_map<std::string, std::size_t> owner;
  for (std::size_t c = 0; c < spec.categories.size(); ++c)
    for (const auto& m : spec.categories[c].markers) owner.emplace(m, c);
  std::vector<int> counts(spec.categories.size(), 0);
  for (const auto& w : split_words(text)) {
    auto it = owner.find(w);
    if (it != owner.end()) ++counts[it->second];
  }
  return counts;
}

int marker_count_class(const SynthSpec& spec, const std::string& text) {
  auto counts = marker_counts(spec, text);
  auto it = std::max_element(counts.begin(), counts.end());
  if (*it == 0) return -1;
  return static_cast<int>(it - counts.begin());
}

}  // namespace cbllm
