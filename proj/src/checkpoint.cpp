#include "cbllm/checkpoint.hpp"

#include "cbllm/bundle.hpp"
#include "cbllm/errors.hpp"

namespace cbllm {

using nlohmann::json;

namespace {

Bundle start(const char* kind, const ModelConfig& cfg, const Vocab& vocab, const ParamStore& params, const json& meta) {
  Bundle b;
  b.manifest = {{"kind", kind},
                {"checkpoint_version", kCheckpointVersion},
                {"config", cfg.to_json()},
                {"vocab", vocab.to_json()},
                {"meta", meta}};
  b.arrays = params.arrays();
  return b;
}

Bundle open(const std::string& path, const char* expected_kind) {
  Bundle b = load_bundle(path);
  const std::string kind = b.manifest.value("kind", std::string("?"));
  if (kind != expected_kind) {
    throw ValidationError("'" + path + "' is a " + kind + " checkpoint, expected a " + expected_kind + " checkpoint");
  }
  const int version = b.manifest.value("checkpoint_version", -1);
  if (version != kCheckpointVersion) {
    throw ValidationError("'" + path + "': checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  return b;
}

template <class T>
T field(const Bundle& b, const std::string& path, const char* key) {
  try {
    return b.manifest.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("'" + path + "': manifest field '" + key + "': " + e.what());
  }
}

const json& object_field(const Bundle& b, const std::string& path, const char* key) {
  if (!b.manifest.contains(key)) throw ValidationError("'" + path + "': manifest lacks '" + key + "'");
  return b.manifest.at(key);
}

// Every stored array must belong to the model and every parameter must be stored.
void restore_params(ParamStore& params, const NamedArrays& arrays, const std::string& path) {
  for (const auto& [name, t] : arrays) {
    if (!params.contains(name)) throw ValidationError("'" + path + "': unexpected array '" + name + "'");
  }
  params.assign(arrays);
}

ModelConfig config_of(const Bundle& b, const std::string& path) {
  ModelConfig cfg = ModelConfig::from_json(object_field(b, path, "config"));
  cfg.validate();
  return cfg;
}

}  // namespace

std::string checkpoint_kind(const std::string& path) {
  Bundle b = load_bundle(path);
  return b.manifest.value("kind", std::string());
}

void save_classifier(const std::string& path, const ClassifierModel& model) {
  Bundle b = start("classifier", model.config, model.vocab, model.params, model.meta);
  b.manifest["concepts"] = model.concepts.to_json();
  b.manifest["mask"] = model.mask;
  save_bundle(path, b);
}

ClassifierModel load_classifier(const std::string& path) {
  Bundle b = open(path, "classifier");
  ClassifierModel m(config_of(b, path), Vocab::from_json(object_field(b, path, "vocab")),
                    ConceptSet::from_json(object_field(b, path, "concepts")));
  restore_params(m.params, b.arrays, path);
  auto mask = field<std::vector<std::uint8_t>>(b, path, "mask");
  if (mask.size() != m.k()) throw ValidationError("'" + path + "': unlearn mask length does not match k");
  m.mask = std::move(mask);
  m.meta = b.manifest.value("meta", json::object());
  return m;
}

void save_generator(const std::string& path, const GenerativeModel& model, bool with_probe) {
  Bundle b = start("generator", model.config, model.vocab, model.params, model.meta);
  const bool probe = with_probe && model.has_probe();
  if (!probe) std::erase_if(b.arrays, [](const auto& kv) { return kv.first.rfind("probe.", 0) == 0; });
  b.manifest["concepts"] = model.concepts.to_json();
  b.manifest["options"] = model.options.to_json();
  b.manifest["with_probe"] = probe;
  save_bundle(path, b);
}

GenerativeModel load_generator(const std::string& path) {
  Bundle b = open(path, "generator");
  GenerativeModel m(config_of(b, path), Vocab::from_json(object_field(b, path, "vocab")),
                    ConceptSet::from_json(object_field(b, path, "concepts")),
                    GeneratorOptions::from_json(object_field(b, path, "options")));
  if (!field<bool>(b, path, "with_probe")) m.drop_probe();
  restore_params(m.params, b.arrays, path);
  m.meta = b.manifest.value("meta", json::object());
  return m;
}

void save_baseline(const std::string& path, const BaselineClassifier& model) {
  Bundle b = start("baseline", model.config, model.vocab, model.params, model.meta);
  b.manifest["n_categories"] = model.n_categories;
  b.manifest["trained"] = model.trained;
  save_bundle(path, b);
}

BaselineClassifier load_baseline(const std::string& path) {
  Bundle b = open(path, "baseline");
  BaselineClassifier m(config_of(b, path), Vocab::from_json(object_field(b, path, "vocab")),
                       field<std::size_t>(b, path, "n_categories"));
  restore_params(m.params, b.arrays, path);
  m.trained = field<bool>(b, path, "trained");
  m.meta = b.manifest.value("meta", json::object());
  return m;
}

void save_reference_lm(const std::string& path, const ReferenceLM& model) {
  save_bundle(path, start("reference-lm", model.config, model.vocab, model.params, model.meta));
}

ReferenceLM load_reference_lm(const std::string& path) {
  Bundle b = open(path, "reference-lm");
  ReferenceLM m(config_of(b, path), Vocab::from_json(object_field(b, path, "vocab")));
  restore_params(m.params, b.arrays, path);
  m.meta = b.manifest.value("meta", json::object());
  return m;
}

}  // namespace cbllm
