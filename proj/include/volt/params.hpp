#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <string>
#include <string_view>

#include "volt/error.hpp"
#include "volt/tensor.hpp"

namespace volt {

// Controls initialization and whether AdamW applies weight decay.
enum class ParamKind { weight, bias, norm_scale, norm_bias, qk_gain };

template <typename T>
struct Param {
  std::string name;
  ParamKind kind = ParamKind::weight;
  Matrix<T> value;
  Matrix<T> grad;

  bool decays() const { return kind == ParamKind::weight; }
};

// Named tensors with paired gradient buffers, kept in registration order.
// References returned by add/at stay valid for the lifetime of the store.
template <typename T>
class ParamStore {
public:
  Param<T>& add(std::string name, std::size_t rows, std::size_t cols, ParamKind kind) {
    if (index_.count(name)) throw StateError("duplicate parameter " + name);
    index_.emplace(name, params_.size());
    auto& p = params_.emplace_back();
    p.name = std::move(name);
    p.kind = kind;
    p.value.resize(rows, cols);
    p.grad.resize(rows, cols);
    return p;
  }

  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

  Param<T>& at(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter " + std::string(name));
    return params_[it->second];
  }
  const Param<T>& at(std::string_view name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.grad.zero();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      for (T g : p.grad.data) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
  }

  template <typename U>
  ParamStore<U> cast_to() const {
    ParamStore<U> out;
    for (const auto& p : params_) {
      auto& q = out.add(p.name, p.value.rows, p.value.cols, p.kind);
      q.value = cast<U>(p.value);
    }
    return out;
  }

private:
  std::deque<Param<T>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

} // namespace volt
