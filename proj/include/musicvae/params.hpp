#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "musicvae/autodiff.hpp"
#include "musicvae/rng.hpp"

namespace musicvae::nn {

/// Ordered, name-addressable set of parameters. Element addresses are
/// stable for the lifetime of the set.
template <typename T>
class ParamSet {
 public:
  using Mat = Matrix<T>;

  ParamSet() = default;
  ParamSet(const ParamSet& other) { *this = other; }
  ParamSet& operator=(const ParamSet& other) {
    if (this == &other) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : other.params_) add(p.name, p.value);
    return *this;
  }
  ParamSet(ParamSet&&) noexcept = default;
  ParamSet& operator=(ParamSet&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Mat value) {
    if (index_.count(name) != 0) throw std::invalid_argument("duplicate parameter: " + name);
    params_.push_back(Parameter<T>{name, std::move(value), Mat()});
    index_.emplace(name, params_.size() - 1);
    return params_.back();
  }

  /// Uniform in [-s, s] with s = 1/sqrt(fan_in).
  Parameter<T>& add_uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                            double fan_in, Rng& rng) {
    const double s = 1.0 / std::sqrt(fan_in);
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>((2.0 * rng.uniform() - 1.0) * s);
    return add(name, std::move(m));
  }

  Parameter<T>& add_zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    return add(name, Mat::Zero(rows, cols));
  }

  Parameter<T>& operator[](const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second];
  }
  const Parameter<T>& operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() const {
    for (const auto& p : params_) p.zero_grad();
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace musicvae::nn
