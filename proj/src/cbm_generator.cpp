#include "cbllm/cbm_generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

using nlohmann::json;

namespace {

constexpr std::size_t kInferenceBatch = 64;

Tensor constant_like(std::size_t rows, std::size_t cols, float fill) { return Tensor::matrix(rows, cols, fill); }

}  // namespace

// ---- options ----

void GeneratorOptions::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("generator: lambda must be >= 0");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("generator: alpha must lie in [0, 1]");
}

json GeneratorOptions::to_json() const {
  return {{"adversarial", adversarial},
          {"concept_loss_at", concept_loss_last_only ? "last" : "all"},
          {"adv_backbone", adv_backbone},
          {"unsup_width", unsup_width},
          {"lambda", lambda},
          {"alpha", alpha}};
}

GeneratorOptions GeneratorOptions::from_json(const json& j) {
  GeneratorOptions o;
  try {
    o.adversarial = j.value("adversarial", o.adversarial);
    std::string at = j.value("concept_loss_at", std::string("all"));
    if (at != "all" && at != "last") throw ValidationError("generator: concept_loss_at must be 'all' or 'last', got '" + at + "'");
    o.concept_loss_last_only = at == "last";
    o.adv_backbone = j.value("adv_backbone", o.adv_backbone);
    o.unsup_width = j.value("unsup_width", o.unsup_width);
    o.lambda = j.value("lambda", o.lambda);
    o.alpha = j.value("alpha", o.alpha);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("generator options: ") + e.what());
  }
  return o;
}

json GenTrainConfig::to_json() const {
  return {{"epochs", epochs},       {"batch_size", batch_size}, {"lr", lr},
          {"probe_lr", probe_lr}, {"probe_steps", probe_steps}, {"clip_norm", clip_norm},   {"seed", seed}};
}

GenTrainConfig GenTrainConfig::from_json(const json& j) {
  GenTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.probe_lr = j.value("probe_lr", c.probe_lr);
  c.probe_steps = j.value("probe_steps", c.probe_steps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  return c;
}

void validate_interventions(const InterventionSpec& spec, std::size_t k) {
  for (const auto& iv : spec) {
    if (iv.neuron >= k) {
      throw ValidationError("intervention: neuron " + std::to_string(iv.neuron) + " out of range (k=" + std::to_string(k) + ")");
    }
    if (!std::isfinite(iv.value)) throw ValidationError("intervention: value for neuron " + std::to_string(iv.neuron) + " is not finite");
  }
}

InterventionSpec steer_towards(std::size_t target, std::size_t k, float value) {
  if (target >= k) throw ValidationError("steer: neuron " + std::to_string(target) + " out of range (k=" + std::to_string(k) + ")");
  InterventionSpec spec;
  for (std::size_t j = 0; j < k; ++j) spec.push_back({j, j == target ? value : 0.0f});
  return spec;
}

// ---- data ----

std::vector<std::vector<int>> encode_lm_sequences(const Vocab& vocab, std::span<const std::string> texts,
                                                  std::size_t context, std::vector<std::uint8_t>* kept) {
  std::vector<std::vector<int>> out;
  if (kept) kept->assign(texts.size(), 0);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto words = encode(texts[i], vocab);
    if (words.empty()) continue;
    std::vector<int> ids;
    ids.push_back(kBos);
    ids.insert(ids.end(), words.begin(), words.end());
    ids.push_back(kEos);
    // context input positions need context + 1 tokens (inputs plus the shifted targets).
    if (ids.size() > context + 1) ids.resize(context + 1);
    out.push_back(std::move(ids));
    if (kept) (*kept)[i] = 1;
  }
  return out;
}

GenBatch make_gen_batch(const std::vector<std::vector<int>>& seqs, std::span<const int> concept_labels,
                        std::span<const std::size_t> indices, bool last_only) {
  GenBatch b;
  for (auto i : indices) {
    const auto& s = seqs.at(i);
    if (s.size() < 2) throw UsageError("gen batch: sequence " + std::to_string(i) + " has fewer than 2 tokens");
    b.inputs.add(std::span<const int>(s).first(s.size() - 1));
    for (std::size_t t = 1; t < s.size(); ++t) {
      b.targets.push_back(s[t]);
      bool supervised = !last_only || t + 1 == s.size();
      b.concept_rows.push_back(supervised ? concept_labels[i] : -1);
    }
  }
  return b;
}

std::vector<int> concept_labels_for(const ConceptSet& concepts, std::span<const int> labels) {
  for (std::size_t i = 0; i < concepts.n(); ++i) {
    if (concepts.block(i).size() != 1) {
      throw ValidationError("generator: category '" + concepts.category_names()[i] + "' owns " +
                            std::to_string(concepts.block(i).size()) + " concepts; generation needs exactly one per category");
    }
  }
  std::vector<int> out;
  out.reserve(labels.size());
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= concepts.n()) throw ValidationError("generator: label " + std::to_string(y) + " out of range");
    out.push_back(static_cast<int>(concepts.block(static_cast<std::size_t>(y))[0]));
  }
  return out;
}

// ---- model ----

GenerativeModel::GenerativeModel(const ModelConfig& cfg, Vocab v, ConceptSet cs, GeneratorOptions opts)
    : config(cfg), vocab(std::move(v)), concepts(std::move(cs)), options(opts), params(), backbone(cfg, params) {
  options.validate();
  if (config.vocab_size != vocab.size()) {
    throw ValidationError("generator: config vocab_size " + std::to_string(config.vocab_size) + " != vocab size " +
                          std::to_string(vocab.size()));
  }
  unsup_width_ = options.unsup_width != 0 ? options.unsup_width
                 : cfg.d_model > k()      ? cfg.d_model - k()
                                          : cfg.d_model;
  options.unsup_width = unsup_width_;
  const std::size_t d = cfg.d_model, V = cfg.vocab_size;
  std::mt19937_64 rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
  const double in_std = 1.0 / std::sqrt(double(d));
  params.add("cbl.w", normal_init(d, k(), in_std, rng));
  params.add("cbl.b", Tensor::matrix(1, k()));
  params.add("unsup.w", normal_init(d, unsup_width_, in_std, rng));
  params.add("unsup.b", Tensor::matrix(1, unsup_width_));
  params.add("fl.w", normal_init(k() + unsup_width_, V, 0.02, rng));
  params.add("fl.b", Tensor::matrix(1, V));
  if (options.adversarial) attach_probe(cfg.seed ^ 0x94d049bb133111ebULL);
}

void GenerativeModel::drop_probe() { params.erase_prefix("probe."); }

void GenerativeModel::attach_probe(std::uint64_t seed) {
  drop_probe();
  std::mt19937_64 rng(seed);
  params.add("probe.w", normal_init(unsup_width_, k(), 1.0 / std::sqrt(double(unsup_width_)), rng));
  params.add("probe.b", Tensor::matrix(1, k()));
}

GenForward GenerativeModel::forward(Tape& tape, const TokenBatch& batch, bool train, std::mt19937_64* rng,
                                    const InterventionSpec& interventions) const {
  auto& ps = const_cast<ParamStore&>(params);
  auto lin = [&](Var x, const char* w, const char* b) {
    return tape.add_row(tape.matmul(x, tape.param(ps.at(w))), tape.param(ps.at(b)));
  };
  GenForward f;
  f.hidden = backbone.forward_hidden(tape, batch, train, rng);
  f.cbl = tape.relu(lin(f.hidden, "cbl.w", "cbl.b"));
  if (!interventions.empty()) {
    validate_interventions(interventions, k());
    const std::size_t rows = batch.tokens();
    Tensor keep = constant_like(rows, k(), 1.0f), set = constant_like(rows, k(), 0.0f);
    for (const auto& iv : interventions)
      for (std::size_t r = 0; r < rows; ++r) {
        keep.at(r, iv.neuron) = 0.0f;
        set.at(r, iv.neuron) = iv.value;
      }
    f.cbl = tape.add(tape.mul(f.cbl, tape.constant(std::move(keep))), tape.constant(std::move(set)));
  }
  f.unsup = lin(f.hidden, "unsup.w", "unsup.b");
  std::vector<Var> parts = {f.cbl, f.unsup};
  f.logits = lin(tape.concat_cols(parts), "fl.w", "fl.b");
  return f;
}

Var GenerativeModel::probe_logits(Tape& tape, Var features, bool as_constant) const {
  if (!has_probe()) throw UsageError("generator: the adversarial probe is not attached");
  auto& ps = const_cast<ParamStore&>(params);
  Var w = as_constant ? tape.constant(ps.at("probe.w").value) : tape.param(ps.at("probe.w"));
  Var b = as_constant ? tape.constant(ps.at("probe.b").value) : tape.param(ps.at("probe.b"));
  return tape.add_row(tape.matmul(features, w), b);
}

StepOutput GenerativeModel::forward_step(std::span<const int> prefix, const InterventionSpec& interventions) const {
  if (prefix.empty()) throw UsageError("forward_step: empty prefix");
  if (prefix.size() > config.context) {
    throw UsageError("forward_step: prefix of " + std::to_string(prefix.size()) + " tokens exceeds context " +
                     std::to_string(config.context));
  }
  Tape tape(false);
  TokenBatch batch;
  batch.add(prefix);
  GenForward f = forward(tape, batch, false, nullptr, interventions);
  const std::size_t last = prefix.size() - 1;
  auto z = tape.value(f.logits).row(last);
  auto a = tape.value(f.cbl).row(last);
  return {std::vector<float>(z.begin(), z.end()), std::vector<float>(a.begin(), a.end())};
}

json ConceptDetection::to_json() const {
  json positions = json::array();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    positions.push_back({{"token", tokens[i]}, {"concept", argmax[i]}, {"activations", activations[i]}});
  }
  return {{"positions", positions}, {"truncated", truncated}};
}

ConceptDetection GenerativeModel::detect_concepts(const std::string& text) const {
  ConceptDetection out;
  auto words = encode(text, vocab);
  auto ids = classifier_ids(words, config.context, &out.truncated);
  Tape tape(false);
  TokenBatch batch;
  batch.add(ids);
  const Tensor& a = tape.value(forward(tape, batch).cbl);
  for (std::size_t p = 1; p < ids.size(); ++p) {
    auto row = a.row(p);
    out.tokens.push_back(vocab.token(ids[p]));
    out.activations.emplace_back(row.begin(), row.end());
    out.argmax.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

FinalFeatures GenerativeModel::final_features(std::span<const std::string> texts) const {
  if (texts.empty()) throw UsageError("final_features: no texts");
  auto seqs = encode_classifier_inputs(vocab, texts, config.context);
  FinalFeatures out{Tensor::matrix(texts.size(), k()), Tensor::matrix(texts.size(), u())};
  for (const auto& idx : ordered_batches(seqs.size(), kInferenceBatch)) {
    Tape tape(false);
    TokenBatch batch = gather_batch(seqs, idx);
    GenForward f = forward(tape, batch);
    auto rows = batch.last_rows();
    const Tensor& a = tape.value(f.cbl);
    const Tensor& un = tape.value(f.unsup);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy(a.row(rows[r]).begin(), a.row(rows[r]).end(), out.cbl.row(idx[r]).begin());
      std::copy(un.row(rows[r]).begin(), un.row(rows[r]).end(), out.unsup.row(idx[r]).begin());
    }
  }
  return out;
}

// ---- losses ----

json LossBreakdown::to_json() const {
  return {{"concept", concept_loss}, {"token", token}, {"entropy", entropy}, {"detection", detection},
          {"reg_raw", reg_raw},      {"reg", reg},     {"total", total},     {"rows", rows}};
}

Var negative_entropy(Tape& tape, Var logits) {
  const std::size_t rows = tape.value(logits).rows();
  if (rows == 0) throw UsageError("negative_entropy: no rows");
  Var plogp = tape.mul(tape.softmax(logits), tape.log_softmax(logits));
  return tape.scale(tape.sum(plogp), 1.0f / float(rows));
}

GenLossTerms gen_losses(Tape& tape, const GenerativeModel& model, const GenBatch& batch, bool train, std::mt19937_64* rng) {
  if (batch.targets.size() != batch.inputs.tokens() || batch.concept_rows.size() != batch.inputs.tokens()) {
    throw UsageError("gen_losses: targets/concept labels do not cover every input row");
  }
  std::vector<std::size_t> supervised;
  for (std::size_t r = 0; r < batch.concept_rows.size(); ++r) {
    int c = batch.concept_rows[r];
    if (c >= 0 && static_cast<std::size_t>(c) >= model.k()) {
      throw ValidationError("gen_losses: concept label " + std::to_string(c) + " out of range (k=" + std::to_string(model.k()) + ")");
    }
    if (c >= 0) supervised.push_back(r);
  }
  if (supervised.empty()) throw UsageError("gen_losses: no concept-supervised rows");

  auto& ps = const_cast<ParamStore&>(model.params);
  GenForward f = model.forward(tape, batch.inputs, train, rng);
  GenLossTerms t;
  t.adversarial = model.options.adversarial;
  t.token = tape.cross_entropy(f.logits, batch.targets);
  t.concept_loss = tape.cross_entropy(f.cbl, batch.concept_rows);
  Var w_cbl = tape.slice_rows(tape.param(ps.at("fl.w")), 0, model.k());
  t.reg_raw = tape.elastic_net(w_cbl, static_cast<float>(model.options.alpha));
  t.reg = tape.scale(t.reg_raw, static_cast<float>(model.options.lambda));
  if (t.adversarial) {
    // L_d: the probe learns from f_unsup features it cannot change.
    t.detection = tape.cross_entropy(model.probe_logits(tape, tape.detach(f.unsup), false), batch.concept_rows);
    // L_e: f_unsup learns against a frozen copy of the probe.
    Var u_e = f.unsup;
    if (!model.options.adv_backbone) {
      u_e = tape.add_row(tape.matmul(tape.detach(f.hidden), tape.param(ps.at("unsup.w"))), tape.param(ps.at("unsup.b")));
    }
    t.entropy = negative_entropy(tape, model.probe_logits(tape, tape.gather_rows(u_e, supervised), true));
  } else {
    t.detection = tape.constant(Tensor::scalar(0.0f));
    t.entropy = tape.constant(Tensor::scalar(0.0f));
  }
  t.total = tape.add(tape.add(tape.add(tape.add(t.concept_loss, t.token), t.entropy), t.detection), t.reg);
  return t;
}

LossBreakdown read_breakdown(const Tape& tape, const GenLossTerms& t, std::size_t rows) {
  LossBreakdown b;
  b.concept_loss = tape.value(t.concept_loss)[0];
  b.token = tape.value(t.token)[0];
  b.entropy = tape.value(t.entropy)[0];
  b.detection = tape.value(t.detection)[0];
  b.reg_raw = tape.value(t.reg_raw)[0];
  b.reg = tape.value(t.reg)[0];
  b.total = tape.value(t.total)[0];
  b.rows = rows;
  return b;
}

GenOptimizer::GenOptimizer(GenerativeModel& model, const GenTrainConfig& cfg) {
  for (Param* p : model.params.list()) (p->name.rfind("probe.", 0) == 0 ? probe_params : main_params).push_back(p);
  main = AdamState(main_params, AdamConfig{cfg.lr});
  probe = AdamState(probe_params, AdamConfig{cfg.probe_lr});
}

double probe_steps(GenerativeModel& model, const GenBatch& batch, GenOptimizer& opt, std::size_t steps, double clip_norm) {
  if (steps == 0) return 0.0;
  if (!model.has_probe()) throw UsageError("probe_steps: the adversarial probe is not attached");
  Tensor features;
  {
    Tape tape(false);
    features = tape.value(model.forward(tape, batch.inputs).unsup);
  }
  double loss = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    zero_grads(opt.probe_params);
    Tape tape;
    Var ld = tape.cross_entropy(model.probe_logits(tape, tape.constant(features), false), batch.concept_rows);
    loss = tape.value(ld)[0];
    if (!std::isfinite(loss)) throw NumericFault("probe_steps: non-finite detection loss");
    tape.backward(ld);
    if (clip_norm > 0) clip_grad_norm(opt.probe_params, clip_norm);
    adam_step(opt.probe_params, opt.probe);
  }
  return loss;
}

LossBreakdown train_step(GenerativeModel& model, const GenBatch& batch, GenOptimizer& opt, double clip_norm,
                         std::mt19937_64& rng) {
  if (opt.main_params.size() + opt.probe_params.size() != model.params.all().size()) {
    throw UsageError("train_step: optimizer state does not match the parameter set");
  }
  zero_grads(opt.main_params);
  zero_grads(opt.probe_params);
  Tape tape;
  GenLossTerms t = gen_losses(tape, model, batch, true, &rng);
  LossBreakdown b = read_breakdown(tape, t, batch.inputs.tokens());
  const std::pair<const char*, double> terms[] = {{"concept loss L_c", b.concept_loss}, {"token loss L_t", b.token},
                                                  {"entropy loss L_e", b.entropy},      {"detection loss L_d", b.detection},
                                                  {"regulariser R", b.reg}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) throw NumericFault(std::string("train_step: non-finite ") + name + "; step aborted");
  tape.backward(t.total);
  if (clip_norm > 0) {
    clip_grad_norm(opt.main_params, clip_norm);
    clip_grad_norm(opt.probe_params, clip_norm);
  }
  adam_step(opt.main_params, opt.main);
  if (!opt.probe_params.empty()) adam_step(opt.probe_params, opt.probe);
  return b;
}

std::vector<LossBreakdown> train_generator(GenerativeModel& model, std::span<const std::string> texts,
                                           std::span<const int> labels, const GenTrainConfig& cfg,
                                           const EpochCallback& on_epoch) {
  if (texts.size() != labels.size() || texts.empty()) throw UsageError("train_generator: need one label per text");
  if (cfg.batch_size == 0) throw UsageError("train_generator: batch size must be >= 1");
  if (model.options.adversarial && !model.has_probe()) throw UsageError("train_generator: adversarial training needs the probe");
  auto all_concepts = concept_labels_for(model.concepts, labels);
  std::vector<std::uint8_t> kept;
  auto seqs = encode_lm_sequences(model.vocab, texts, model.config.context, &kept);
  if (seqs.empty()) throw UsageError("train_generator: every text is empty");
  std::vector<int> concept_of;
  for (std::size_t i = 0; i < texts.size(); ++i)
    if (kept[i]) concept_of.push_back(all_concepts[i]);

  GenOptimizer opt(model, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<LossBreakdown> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    LossBreakdown mean;
    std::size_t steps = 0;
    for (const auto& idx : epoch_batches(seqs.size(), cfg.batch_size, rng)) {
      GenBatch batch = make_gen_batch(seqs, concept_of, idx, model.options.concept_loss_last_only);
      if (model.options.adversarial) probe_steps(model, batch, opt, cfg.probe_steps, cfg.clip_norm);
      LossBreakdown b = train_step(model, batch, opt, cfg.clip_norm, rng);
      mean.concept_loss += b.concept_loss;
      mean.token += b.token;
      mean.entropy += b.entropy;
      mean.detection += b.detection;
      mean.reg_raw += b.reg_raw;
      mean.reg += b.reg;
      mean.total += b.total;
      mean.rows += b.rows;
      ++steps;
    }
    for (double* v : {&mean.concept_loss, &mean.token, &mean.entropy, &mean.detection, &mean.reg_raw, &mean.reg, &mean.total})
      *v /= double(steps);
    history.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  json trace = json::array();
  for (const auto& h : history) trace.push_back(h.to_json());
  model.meta["train"] = {{"config", cfg.to_json()},
                         {"samples", seqs.size()},
                         {"skipped_empty", texts.size() - seqs.size()},
                         {"loss_trace", trace}};
  return history;
}

// ---- generation ----

std::string GenerationResult::text(const Vocab& vocab) const {
  std::string out;
  for (int id : tokens) {
    if (id < kNumReserved) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

json GenerationResult::to_json(const Vocab& vocab) const {
  json steps = json::array();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    steps.push_back({{"step", i}, {"token", vocab.token(tokens[i])}, {"id", tokens[i]}, {"activations", trace[i]}});
  }
  json ivs = json::array();
  for (const auto& iv : interventions) ivs.push_back({{"neuron", iv.neuron}, {"value", iv.value}});
  return {{"prompt", prompt}, {"interventions", ivs}, {"text", text(vocab)}, {"ended_with_eos", ended_with_eos},
          {"steps", steps}};
}

GenerationResult generate(const GenerativeModel& model, std::span<const int> prompt, const InterventionSpec& interventions,
                          const GenerateOptions& options, const TokenCallback& on_token) {
  if (options.max_tokens == 0) throw UsageError("generate: max_tokens must be >= 1");
  if (!(options.temperature >= 0.0f) || !std::isfinite(options.temperature)) throw UsageError("generate: temperature must be >= 0");
  validate_interventions(interventions, model.k());
  for (int id : prompt)
    if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size()) throw UsageError("generate: prompt token id out of range");

  GenerationResult res;
  res.prompt.assign(prompt.begin(), prompt.end());
  res.interventions = interventions;
  std::vector<int> seq = {kBos};
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  std::mt19937_64 rng(options.seed);
  const std::size_t ctx = model.config.context;
  for (std::size_t step = 0; step < options.max_tokens; ++step) {
    std::span<const int> window(seq);
    if (window.size() > ctx) window = window.last(ctx);
    StepOutput out = model.forward_step(window, interventions);
    for (float z : out.logits)
      if (!std::isfinite(z)) throw NumericFault("generate: non-finite logits at step " + std::to_string(step));
    std::vector<double> z(out.logits.begin(), out.logits.end());
    for (int banned : {kBos, kPad, kUnk}) z[static_cast<std::size_t>(banned)] = -std::numeric_limits<double>::infinity();
    int next = 0;
    if (options.temperature == 0.0f) {
      next = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    } else {
      double m = *std::max_element(z.begin(), z.end());
      std::vector<double> p(z.size());
      double total = 0.0;
      for (std::size_t v = 0; v < z.size(); ++v) total += p[v] = std::exp((z[v] - m) / options.temperature);
      double u = draw_unit(rng) * total, acc = 0.0;
      next = -1;
      for (std::size_t v = 0; v < p.size(); ++v) {
        if (p[v] == 0.0) continue;
        acc += p[v];
        next = static_cast<int>(v);
        if (u < acc) break;
      }
    }
    seq.push_back(next);
    res.tokens.push_back(next);
    res.trace.push_back(out.activations);
    if (on_token) on_token(step, next, out.activations);
    if (next == kEos) {
      res.ended_with_eos = true;
      break;
    }
  }
  return res;
}

std::vector<TokenWeight> top_tokens_for_neuron(const GenerativeModel& model, std::size_t j, std::size_t m) {
  if (j >= model.k()) throw UsageError("top_tokens_for_neuron: neuron " + std::to_string(j) + " out of range");
  const Tensor& W = model.params.at("fl.w").value;
  std::vector<TokenWeight> out;
  for (std::size_t v = kNumReserved; v < model.vocab_size(); ++v) {
    out.push_back({static_cast<int>(v), model.vocab.token(static_cast<int>(v)), W.at(j, v)});
  }
  std::stable_sort(out.begin(), out.end(), [](const TokenWeight& a, const TokenWeight& b) { return a.weight > b.weight; });
  out.resize(std::min(m, out.size()));
  return out;
}

nlohmann::json generation_transcript(const GenerativeModel& model, const GenerationResult& result,
                                     const GenerateOptions& options) {
  std::uint64_t weights = fnv1a(model.config.to_json().dump());
  for (const auto& [name, p] : model.params.all()) {
    const auto& values = p.value.storage();
    weights = fnv1a(name, weights);
    weights = fnv1a_bytes(values.data(), values.size() * sizeof(float), weights);
  }
  nlohmann::json concepts = nlohmann::json::array();
  for (const auto& c : model.concepts.concepts()) concepts.push_back(c.text);
  nlohmann::json t = {{"model", {{"weights_hash", hex64(weights)}, {"adversarial", model.options.adversarial}}},
                      {"concepts", concepts},
                      {"sampler", {{"max_tokens", options.max_tokens}, {"temperature", options.temperature}, {"seed", options.seed}}},
                      {"generation", result.to_json(model.vocab)}};
  t["id"] = hex64(fnv1a(t.dump()));
  return t;
}

// The backbone addresses parameters through a pointer to the owning store,
// so copies and moves rebind it to their own `params`.
GenerativeModel::GenerativeModel(const GenerativeModel& other) : config(other.config), vocab(other.vocab), concepts(other.concepts), options(other.options), params(other.params), backbone(other.backbone), meta(other.meta), unsup_width_(other.unsup_width_) { backbone.rebind(params); }

GenerativeModel::GenerativeModel(GenerativeModel&& other) noexcept : config(std::move(other.config)), vocab(std::move(other.vocab)), concepts(std::move(other.concepts)), options(std::move(other.options)), params(std::move(other.params)), backbone(std::move(other.backbone)), meta(std::move(other.meta)), unsup_width_(std::move(other.unsup_width_)) { backbone.rebind(params); }

GenerativeModel& GenerativeModel::operator=(const GenerativeModel& other) {
  if (this == &other) return *this;
  config = other.config;
  vocab = other.vocab;
  concepts = other.concepts;
  options = other.options;
  params = other.params;
  backbone = other.backbone;
  meta = other.meta;
  unsup_width_ = other.unsup_width_;
  backbone.rebind(params);
  return *this;
}

GenerativeModel& GenerativeModel::operator=(GenerativeModel&& other) noexcept {
  if (this == &other) return *this;
  config = std::move(other.config);
  vocab = std::move(other.vocab);
  concepts = std::move(other.concepts);
  options = std::move(other.options);
  params = std::move(other.params);
  backbone = std::move(other.backbone);
  meta = std::move(other.meta);
  unsup_width_ = std::move(other.unsup_width_);
  backbone.rebind(params);
  return *this;
}

}  // namespace cbllm
