#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "err/matrix.hpp"
#include "err/rng.hpp"

namespace err {

// A named learnable tensor plus its gradient accumulator of identical shape.
struct Tensor {
  Mat value;
  Mat grad;
};

// Registry of all learnable weights. Names are unique; iteration order is the
// lexicographic name order, which keeps initialization and checkpoint layout
// deterministic.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, long rows, long cols) {
    if (tensors_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Tensor t;
    t.value = Mat::Zero(rows, cols);
    t.grad = Mat::Zero(rows, cols);
    return tensors_.emplace(name, std::move(t)).first->second;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  void zero_grads() {
    for (auto& [name, t] : tensors_) t.grad.setZero();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [name, t] : tensors_) out.push_back(name);
    return out;
  }

  size_t size() const { return tensors_.size(); }
  long scalar_count() const {
    long n = 0;
    for (const auto& [name, t] : tensors_) n += static_cast<long>(t.value.size());
    return n;
  }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

 private:
  std::map<std::string, Tensor> tensors_;
};

// Fills a tensor with N(0, std^2) draws from the given rng.
inline void init_normal(Tensor& t, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (long r = 0; r < t.value.rows(); ++r)
    for (long c = 0; c < t.value.cols(); ++c) t.value(r, c) = dist(rng);
}

inline void init_constant(Tensor& t, double v) { t.value.setConstant(v); }

}  // namespace err
