#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stdg/rng.hpp"
#include "stdg/tensor.hpp"

namespace stdg {

/// Named registry of every learnable tensor. Iteration follows registration
/// order, which is fixed by model construction, so checkpoints and updates
/// are reproducible.
class ParamRegistry {
 public:
  Tensor& add(const std::string& name, Tensor init) {
    require(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(init)});
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter: " + name);
    return entries_[it->second].value;
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter: " + name);
    return entries_[it->second].value;
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name_at(std::size_t i) const { return entries_[i].name; }
  Tensor& value_at(std::size_t i) { return entries_[i].value; }
  const Tensor& value_at(std::size_t i) const { return entries_[i].value; }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

 private:
  struct Entry {
    std::string name;
    Tensor value;
  };
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Uniform +-sqrt(6/(fan_in+fan_out)) weight init; biases start at zero.
inline Tensor glorot(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& x : t.data) x = rng.uniform(-bound, bound);
  return t;
}

inline Tensor glorot2(Rng& rng, std::size_t rows, std::size_t cols) {
  return glorot(rng, {rows, cols}, rows, cols);
}

}  // namespace stdg
