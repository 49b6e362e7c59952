#pragma once

#include <cmath>
#include <cstring>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "icl/datagen.hpp"
#include "icl/errors.hpp"

namespace icl::net {

template <typename T>
struct Tensor {
  std::string name;
  int rank = 2;  // 1 for gains/biases (stored as a 1 x n row)
  Mat<T> value;
};

// Ordered, named tensor store. Insertion order is the checkpoint order.
template <typename T>
class ParamSet {
 public:
  Mat<T>& add(const std::string& name, int rows, int cols, int rank = 2) {
    if (index_.count(name)) throw ConfigError("duplicate tensor '" + name + "'");
    index_.emplace(name, tensors_.size());
    tensors_.push_back(Tensor<T>{name, rank, Mat<T>::Zero(rows, cols)});
    return tensors_.back().value;
  }

  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

  size_t index_of(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no tensor named '" + std::string(name) + "'");
    return it->second;
  }

  Mat<T>& operator[](std::string_view name) { return tensors_[index_of(name)].value; }
  const Mat<T>& operator[](std::string_view name) const { return tensors_[index_of(name)].value; }

  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  size_t size() const { return tensors_.size(); }

  ParamSet zeros_like() const {
    ParamSet out = *this;
    out.set_zero();
    return out;
  }

  void set_zero() {
    for (auto& t : tensors_) t.value.setZero();
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& t : tensors_)
      out.add(t.name, static_cast<int>(t.value.rows()), static_cast<int>(t.value.cols()), t.rank) =
          t.value.template cast<U>();
    return out;
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      if (!t.value.allFinite()) return false;
    return true;
  }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<size_t>(t.value.size());
    return n;
  }

  bool bitwise_equal(const ParamSet& other) const {
    if (other.tensors_.size() != tensors_.size()) return false;
    for (size_t i = 0; i < tensors_.size(); ++i) {
      const auto& a = tensors_[i];
      const auto& b = other.tensors_[i];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
        return false;
      if (std::memcmp(a.value.data(), b.value.data(), sizeof(T) * a.value.size()) != 0) return false;
    }
    return true;
  }

 private:
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, size_t, std::less<>> index_;
};

}  // namespace icl::net
