#pragma once

#include <map>
#include <string>
#include <vector>

#include "recap/rng.hpp"
#include "recap/tensor.hpp"

namespace recap {

// Named trainable tensors. Initialization derives a per-tensor seed from the
// name, so counts and values are independent of registration order.
class ParamStore {
 public:
  enum class Init { zeros, gaussian, fan_in };

  explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

  Tensor& declare(const std::string& name, std::vector<int> shape,
                  Init init = Init::fan_in, double gain = 1.0);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return tensors_.count(name) > 0; }

  std::vector<std::string> names() const;          // sorted
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;
  int64_t count() const;                           // total elements
  int64_t count_with_prefix(const std::string& prefix) const;

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::map<std::string, Tensor> tensors_;
};

}  // namespace recap
