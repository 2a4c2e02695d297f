#pragma once

#include <map>
#include <random>
#include <string>

#include "cbllm/bundle.hpp"
#include "cbllm/tensor.hpp"

namespace cbllm {

// Named parameters with stable addresses (std::map nodes never move), so
// Param* handed to tapes and optimizers stay valid as parameters are added.
class ParamStore {
 public:
  Param& add(const std::string& name, Tensor value);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return map_.count(name) > 0; }
  void erase_prefix(const std::string& prefix);

  // Parameters whose name starts with prefix, in name order.
  ParamList list(const std::string& prefix = "");
  std::size_t count(const std::string& prefix = "") const;
  NamedArrays arrays(const std::string& prefix = "") const;
  // Copies values from `arrays` into existing parameters of identical shape.
  // Every parameter under `prefix` must be present.
  void assign(const NamedArrays& arrays, const std::string& prefix = "");

  const std::map<std::string, Param>& all() const { return map_; }

 private:
  std::map<std::string, Param> map_;
};

// N(0, std^2) initialised [rows x cols] tensor drawn with draw_normal.
Tensor normal_init(std::size_t rows, std::size_t cols, double std, std::mt19937_64& rng);

}  // namespace cbllm
