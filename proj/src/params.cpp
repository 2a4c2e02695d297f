#include "cbllm/params.hpp"

#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"

namespace cbllm {

namespace {
bool has_prefix(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }
}  // namespace

Param& ParamStore::add(const std::string& name, Tensor value) {
  auto [it, fresh] = map_.try_emplace(name, name, std::move(value));
  if (!fresh) throw UsageError("parameter '" + name + "' already exists");
  return it->second;
}

Param& ParamStore::at(const std::string& name) {
  auto it = map_.find(name);
  if (it == map_.end()) throw LookupError("no parameter named '" + name + "'");
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = map_.find(name);
  if (it == map_.end()) throw LookupError("no parameter named '" + name + "'");
  return it->second;
}

void ParamStore::erase_prefix(const std::string& prefix) {
  for (auto it = map_.begin(); it != map_.end();) it = has_prefix(it->first, prefix) ? map_.erase(it) : std::next(it);
}

ParamList ParamStore::list(const std::string& prefix) {
  ParamList out;
  for (auto& [name, p] : map_)
    if (has_prefix(name, prefix)) out.push_back(&p);
  return out;
}

std::size_t ParamStore::count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, p] : map_)
    if (has_prefix(name, prefix)) n += p.value.size();
  return n;
}

NamedArrays ParamStore::arrays(const std::string& prefix) const {
  NamedArrays out;
  for (const auto& [name, p] : map_)
    if (has_prefix(name, prefix)) out.emplace(name, p.value);
  return out;
}

void ParamStore::assign(const NamedArrays& arrays, const std::string& prefix) {
  for (auto& [name, p] : map_) {
    if (!has_prefix(name, prefix)) continue;
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ValidationError("checkpoint is missing array '" + name + "'");
    if (!it->second.same_shape(p.value)) {
      throw ValidationError("array '" + name + "' has shape " + shape_str(it->second.shape()) + ", model expects " +
                            shape_str(p.value.shape()));
    }
    p.value = it->second;
    p.zero_grad();
  }
}

Tensor normal_init(std::size_t rows, std::size_t cols, double std, std::mt19937_64& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (float& x : t.span()) x = static_cast<float>(std * draw_normal(rng));
  return t;
}

}  // namespace cbllm
