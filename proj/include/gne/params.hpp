#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gne/errors.hpp"
#include "gne/matrix.hpp"

namespace gne {

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
};

/// Named parameter tensors with shape-matched gradient accumulators.
/// Insertion order is preserved and is the serialisation order.
class ParamStore {
public:
  std::size_t add(std::string name, Matrix value) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    const std::size_t id = params_.size();
    index_.emplace(name, id);
    Matrix grad(value.rows(), value.cols());
    params_.push_back(Param{std::move(name), std::move(value), std::move(grad)});
    return id;
  }

  std::size_t size() const noexcept { return params_.size(); }

  Param& at(std::size_t i) { return params_.at(i); }
  const Param& at(std::size_t i) const { return params_.at(i); }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  Param& operator[](const std::string& name) { return params_.at(require(name)); }
  const Param& operator[](const std::string& name) const { return params_.at(require(name)); }

  bool contains(const std::string& name) const { return index_.contains(name); }

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

  void zero_grads() {
    for (auto& p : params_) p.grad.fill(0.0);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

private:
  std::size_t require(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

inline void zero_grads(ParamStore& params) { params.zero_grads(); }

} // namespace gne
