#include "cbllm/backbone.hpp"

#include <cmath>

#include "cbllm/corpus.hpp"
#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

using nlohmann::json;

void ModelConfig::validate() const {
  if (vocab_size <= 4) throw ValidationError("model config: vocab_size must exceed the 4 reserved tokens");
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw ValidationError("model config: d_model " + std::to_string(d_model) + " is not divisible by heads " +
                          std::to_string(heads));
  }
  if (layers == 0) throw ValidationError("model config: layers must be >= 1");
  if (context < 8) throw ValidationError("model config: context must be >= 8");
  if (dropout < 0.0f || dropout >= 1.0f) throw ValidationError("model config: dropout must lie in [0, 1)");
}

json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_model", d_model}, {"layers", layers}, {"heads", heads},
          {"context", context},       {"dropout", dropout}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.context = j.value("context", c.context);
    c.dropout = j.value("dropout", c.dropout);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  return c;
}

void TokenBatch::add(std::span<const int> seq) {
  if (seq.empty()) throw UsageError("TokenBatch: empty sequence");
  ids.insert(ids.end(), seq.begin(), seq.end());
  offsets.push_back(ids.size());
}

std::vector<std::size_t> TokenBatch::last_rows() const {
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) rows.push_back(offsets[s + 1] - 1);
  return rows;
}

std::vector<int> classifier_ids(std::span<const int> words, std::size_t context, bool* truncated) {
  std::size_t keep = std::min(words.size(), context - 1);
  if (truncated) *truncated = keep < words.size();
  std::vector<int> ids;
  ids.reserve(keep + 1);
  ids.push_back(kBos);
  ids.insert(ids.end(), words.begin(), words.begin() + static_cast<std::ptrdiff_t>(keep));
  return ids;
}

std::vector<std::vector<int>> encode_classifier_inputs(const Vocab& vocab, std::span<const std::string> texts,
                                                       std::size_t context, std::vector<std::uint8_t>* truncated) {
  std::vector<std::vector<int>> out;
  out.reserve(texts.size());
  if (truncated) truncated->assign(texts.size(), 0);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    bool cut = false;
    out.push_back(classifier_ids(encode(texts[i], vocab), context, &cut));
    if (truncated) (*truncated)[i] = cut;
  }
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  if (batch == 0) throw UsageError("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle_in_place(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch)));
  }
  return out;
}

std::vector<std::vector<std::size_t>> ordered_batches(std::size_t n, std::size_t batch) {
  if (batch == 0) throw UsageError("batch size must be >= 1");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch) {
    out.emplace_back();
    for (std::size_t i = s; i < std::min(n, s + batch); ++i) out.back().push_back(i);
  }
  return out;
}

TokenBatch gather_batch(const std::vector<std::vector<int>>& seqs, std::span<const std::size_t> indices) {
  TokenBatch b;
  for (auto i : indices) b.add(seqs[i]);
  return b;
}

Backbone::Backbone(const ModelConfig& cfg, ParamStore& store) : cfg_(cfg), store_(&store) {
  cfg_.validate();
  std::mt19937_64 rng(cfg.seed);
  const std::size_t d = cfg.d_model, ff = 4 * cfg.d_model;
  const double std = 0.02, out_std = 0.02 / std::sqrt(2.0 * double(cfg.layers));
  auto ones = [&](std::size_t n) { return Tensor::matrix(1, n, 1.0f); };
  auto zeros = [&](std::size_t n) { return Tensor::matrix(1, n); };
  std::string pre = kPrefix;
  store.add(pre + "tok_emb", normal_init(cfg.vocab_size, d, std, rng));
  store.add(pre + "pos_emb", normal_init(cfg.context, d, std, rng));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::string L = pre + "layer" + std::to_string(l) + ".";
    store.add(L + "ln1.g", ones(d));
    store.add(L + "ln1.b", zeros(d));
    store.add(L + "attn.wq", normal_init(d, d, std, rng));
    store.add(L + "attn.wk", normal_init(d, d, std, rng));
    store.add(L + "attn.wv", normal_init(d, d, std, rng));
    store.add(L + "attn.bq", zeros(d));
    store.add(L + "attn.bk", zeros(d));
    store.add(L + "attn.bv", zeros(d));
    store.add(L + "attn.wo", normal_init(d, d, out_std, rng));
    store.add(L + "attn.bo", zeros(d));
    store.add(L + "ln2.g", ones(d));
    store.add(L + "ln2.b", zeros(d));
    store.add(L + "mlp.w1", normal_init(d, ff, std, rng));
    store.add(L + "mlp.b1", zeros(ff));
    store.add(L + "mlp.w2", normal_init(ff, d, out_std, rng));
    store.add(L + "mlp.b2", zeros(d));
  }
  store.add(pre + "ln_f.g", ones(d));
  store.add(pre + "ln_f.b", zeros(d));
}

Var Backbone::p(Tape& tape, const std::string& name) const { return tape.param(store_->at(kPrefix + name)); }

Var Backbone::linear(Tape& tape, Var x, const std::string& w, const std::string& b) const {
  return tape.add_row(tape.matmul(x, p(tape, w)), p(tape, b));
}

Var Backbone::norm(Tape& tape, Var x, const std::string& name) const {
  return tape.add_row(tape.mul_row(tape.layer_norm(x), p(tape, name + ".g")), p(tape, name + ".b"));
}

Var Backbone::forward_hidden(Tape& tape, const TokenBatch& batch, bool train, std::mt19937_64* rng) const {
  if (batch.tokens() == 0) throw UsageError("forward_hidden: empty batch");
  std::vector<int> positions;
  positions.reserve(batch.tokens());
  for (std::size_t s = 0; s < batch.sequences(); ++s) {
    std::size_t len = batch.offsets[s + 1] - batch.offsets[s];
    if (len > cfg_.context) {
      throw UsageError("forward_hidden: sequence " + std::to_string(s) + " has " + std::to_string(len) +
                       " tokens, context is " + std::to_string(cfg_.context));
    }
    for (std::size_t i = 0; i < len; ++i) positions.push_back(static_cast<int>(i));
  }
  for (int id : batch.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw UsageError("forward_hidden: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(cfg_.vocab_size));
    }
  }
  const bool drop = train && cfg_.dropout > 0.0f;
  if (drop && rng == nullptr) throw UsageError("forward_hidden: dropout in training mode needs an rng");
  auto maybe_drop = [&](Var v) { return drop ? tape.dropout(v, cfg_.dropout, *rng) : v; };

  Var x = tape.add(tape.embedding(p(tape, "tok_emb"), batch.ids), tape.embedding(p(tape, "pos_emb"), positions));
  x = maybe_drop(x);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    std::string L = "layer" + std::to_string(l) + ".";
    Var h = norm(tape, x, L + "ln1");
    Var q = linear(tape, h, L + "attn.wq", L + "attn.bq");
    Var k = linear(tape, h, L + "attn.wk", L + "attn.bk");
    Var v = linear(tape, h, L + "attn.wv", L + "attn.bv");
    Var a = tape.causal_attention(q, k, v, batch.offsets, cfg_.heads);
    x = tape.add(x, maybe_drop(linear(tape, a, L + "attn.wo", L + "attn.bo")));
    h = norm(tape, x, L + "ln2");
    h = tape.relu(linear(tape, h, L + "mlp.w1", L + "mlp.b1"));
    x = tape.add(x, maybe_drop(linear(tape, h, L + "mlp.w2", L + "mlp.b2")));
  }
  return norm(tape, x, "ln_f");
}

Var Backbone::pool(Tape& tape, Var hidden, const TokenBatch& batch) const {
  if (batch.sequences() == 0) throw UsageError("pool: no sequences");
  auto rows = batch.last_rows();
  return tape.gather_rows(hidden, rows);
}

}  // namespace cbllm
