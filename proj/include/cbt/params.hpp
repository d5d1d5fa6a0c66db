#pragma once

#include <concepts>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "cbt/errors.hpp"
#include "cbt/graph.hpp"
#include "cbt/tensor.hpp"

namespace cbt {

// Parameter groups used throughout the model.
namespace group {
inline constexpr const char* visual_encoder = "visual_encoder";
inline constexpr const char* visual_transformer = "visual_transformer";
inline constexpr const char* text = "text";
inline constexpr const char* cross = "cross";
inline constexpr const char* head = "head";
}  // namespace group

// Named tensors, each belonging to one group. Groups can be frozen; a frozen
// group's tensors bind as constants and never receive optimizer updates.
template <std::floating_point T>
class ParamStore {
 public:
  void add(const std::string& name, const std::string& group, Tensor<T> value) {
    if (tensors_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    tensors_.emplace(name, std::move(value));
    groups_.emplace(name, group);
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  // Replace a tensor's values; the shape is fixed at creation.
  void set(const std::string& name, Tensor<T> value) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter: " + name);
    if (it->second.shape() != value.shape()) {
      throw ShapeError(detail::concat("parameter ", name, " has shape ",
                                      detail::shape_string(it->second.shape()), ", got ",
                                      detail::shape_string(value.shape())));
    }
    it->second = std::move(value);
  }

  Tensor<T>& mutable_ref(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  const std::string& group_of(const std::string& name) const {
    auto it = groups_.find(name);
    if (it == groups_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  void freeze(const std::string& group) { frozen_.insert(group); }
  void unfreeze(const std::string& group) { frozen_.erase(group); }
  bool is_frozen(const std::string& group) const { return frozen_.count(group) != 0; }
  const std::set<std::string>& frozen_groups() const { return frozen_; }

  bool trainable(const std::string& name) const { return !is_frozen(group_of(name)); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : tensors_) out.push_back(name);
    return out;
  }

  std::vector<std::string> names_in(const std::string& group) const {
    std::vector<std::string> out;
    for (const auto& [name, g] : groups_)
      if (g == group) out.push_back(name);
    return out;
  }

  std::set<std::string> groups() const {
    std::set<std::string> out;
    for (const auto& [_, g] : groups_) out.insert(g);
    return out;
  }

  std::size_t size() const noexcept { return tensors_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  const std::map<std::string, Tensor<T>>& tensors() const noexcept { return tensors_; }

  template <std::floating_point U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : tensors_) out.add(name, groups_.at(name), t.template cast<U>());
    for (const auto& g : frozen_) out.freeze(g);
    return out;
  }

  bool operator==(const ParamStore& other) const {
    return tensors_ == other.tensors_ && groups_ == other.groups_;
  }

 private:
  std::map<std::string, Tensor<T>> tensors_;
  std::map<std::string, std::string> groups_;
  std::set<std::string> frozen_;
};

// Lazily binds parameters into one graph. A parameter becomes a trainable
// leaf iff its group is not frozen in the store and the binding was not
// created for inference.
template <std::floating_point T>
class Binding {
 public:
  Binding(Graph<T>& graph, const ParamStore<T>& store, bool inference = false)
      : graph_(graph), store_(store), inference_(inference) {}

  Var<T> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const bool trainable = !inference_ && store_.trainable(name) && !extra_frozen_.count(store_.group_of(name));
    Var<T> v = graph_.leaf(store_.get(name), trainable);
    vars_.emplace(name, v);
    return v;
  }

  // Treat `group` as frozen for this graph only.
  void hold(const std::string& group) { extra_frozen_.insert(group); }

  Graph<T>& graph() noexcept { return graph_; }
  const ParamStore<T>& store() const noexcept { return store_; }

  // Gradients of every bound, trainable parameter.
  std::map<std::string, Tensor<T>> gradients(const Gradients<T>& grads) const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, v] : vars_) {
      if (graph_.requires_grad(v.id)) out.emplace(name, grads.of(v));
    }
    return out;
  }

  const std::unordered_map<std::string, Var<T>>& bound() const noexcept { return vars_; }

 private:
  Graph<T>& graph_;
  const ParamStore<T>& store_;
  bool inference_;
  std::set<std::string> extra_frozen_;
  std::unordered_map<std::string, Var<T>> vars_;
};

}  // namespace cbt
