#pragma once

#include <map>
#include <string>
#include <vector>

#include "lcap/tensor.hpp"

namespace lcap {

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

// Named parameter registry. Names are unique; iteration order is insertion
// order (models register in a fixed order, so optimizer sweeps are
// deterministic).
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor init, bool trainable = true) {
    if (index_.count(name)) {
      throw ContractError("parameter name registered twice: " + name);
    }
    init.set_requires_grad(trainable);
    index_[name] = params_.size();
    params_.push_back(Parameter{name, init, trainable});
    return init;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
  }
  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
  }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  std::size_t size() const { return params_.size(); }

  std::int64_t total_count(bool trainable_only = false) const {
    std::int64_t n = 0;
    for (const auto& p : params_) {
      if (!trainable_only || p.trainable) n += p.tensor.numel();
    }
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace lcap
