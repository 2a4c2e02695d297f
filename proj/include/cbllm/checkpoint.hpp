#pragma once

#include <string>

#include "cbllm/cbm_classifier.hpp"
#include "cbllm/cbm_generator.hpp"
#include "cbllm/eval.hpp"

namespace cbllm {

// Typed model checkpoints on top of the array bundle (bundle.hpp). The
// manifest carries, besides the bundle fields:
//
//   kind              "classifier" | "generator" | "baseline" | "reference-lm"
//   checkpoint_version kCheckpointVersion (refused on mismatch)
//   config            ModelConfig
//   vocab             token list in id order
//   concepts          ConceptSet (classifier, generator)
//   options           GeneratorOptions (generator)
//   with_probe        whether theta_5 arrays are present (generator)
//   mask              unlearn mask (classifier)
//   n_categories, trained (baseline)
//   meta              training settings and traces recorded by the trainers
//
// Every model parameter is one named array; the blob holds exactly the model's
// arrays, so load(save(m)) restores every float bit for bit.
inline constexpr int kCheckpointVersion = 1;

// "kind" of the checkpoint at `path` (validates format and version).
std::string checkpoint_kind(const std::string& path);

void save_classifier(const std::string& path, const ClassifierModel& model);
ClassifierModel load_classifier(const std::string& path);

// Inference checkpoints (the default) omit the training-only probe theta_5.
void save_generator(const std::string& path, const GenerativeModel& model, bool with_probe = false);
GenerativeModel load_generator(const std::string& path);

void save_baseline(const std::string& path, const BaselineClassifier& model);
BaselineClassifier load_baseline(const std::string& path);

void save_reference_lm(const std::string& path, const ReferenceLM& model);
ReferenceLM load_reference_lm(const std::string& path);

}  // namespace cbllm
