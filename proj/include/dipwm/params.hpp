#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "dipwm/tensor.hpp"

namespace dipwm {

/// Ordered collection of named arrays. Networks read their weights from a
/// ParamSet at forward time, so evaluating under temporary parameters is a
/// matter of passing a different set.
template <typename Scalar>
class ParamSet {
 public:
  using value_type = Tensor<Scalar>;

  void add(std::string name, Tensor<Scalar> value) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter " + name);
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
  }

  std::size_t size() const noexcept { return names_.size(); }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("missing parameter " + name);
    return it->second;
  }

  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor<Scalar>& operator[](std::size_t i) const { return values_[i]; }
  Tensor<Scalar>& operator[](std::size_t i) { return values_[i]; }
  const Tensor<Scalar>& at(const std::string& name) const { return values_[index_of(name)]; }
  Tensor<Scalar>& at(const std::string& name) { return values_[index_of(name)]; }

  Eigen::Index count() const {
    Eigen::Index total = 0;
    for (const auto& v : values_) total += v.size();
    return total;
  }

  /// Same names and shapes, zero values.
  ParamSet zeros_like() const {
    ParamSet out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Tensor<Scalar>(values_[i].shape));
    return out;
  }

  bool same_layout(const ParamSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (names_[i] != other.names_[i] || values_[i].shape != other.values_[i].shape) return false;
    }
    return true;
  }

  void require_same_layout(const ParamSet& other, const char* what) const {
    if (!same_layout(other)) throw ConfigError(std::string(what) + ": parameter layout mismatch");
  }

  /// this += alpha * other
  ParamSet& axpy(Scalar alpha, const ParamSet& other) {
    require_same_layout(other, "axpy");
    for (std::size_t i = 0; i < size(); ++i) values_[i].data += alpha * other.values_[i].data;
    return *this;
  }

  bool all_finite() const {
    for (const auto& v : values_) {
      if (!v.all_finite()) return false;
    }
    return true;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& v : values_) h = dipwm::checksum(v, h);
    return h;
  }

  template <typename Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<Other>());
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (!a.same_layout(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if ((a.values_[i].data != b.values_[i].data).any()) return false;
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<Scalar>> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// theta = phi - eta * grad, leaving phi untouched.
template <typename Scalar>
ParamSet<Scalar> sgd_step(const ParamSet<Scalar>& phi, const ParamSet<Scalar>& grad, Scalar eta) {
  ParamSet<Scalar> theta = phi;
  theta.axpy(-eta, grad);
  return theta;
}

/// Kaiming-uniform draw for a weight with the given fan-in.
template <typename Scalar>
Tensor<Scalar> kaiming_uniform(Shape s, int fan_in, std::mt19937_64& rng, Scalar gain = Scalar(1)) {
  const double bound = double(gain) * std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Scalar> t(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = Scalar(dist(rng));
  return t;
}

/// Adaptive-moment optimizer over a ParamSet.
template <typename Scalar>
struct Adam {
  Scalar lr = Scalar(1e-3);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
  ParamSet<Scalar> m;
  ParamSet<Scalar> v;
  std::int64_t t = 0;

  Adam() = default;
  Adam(const ParamSet<Scalar>& like, Scalar learning_rate)
      : lr(learning_rate), m(like.zeros_like()), v(like.zeros_like()) {}

  void step(ParamSet<Scalar>& params, const ParamSet<Scalar>& grad) {
    params.require_same_layout(grad, "adam");
    ++t;
    const Scalar c1 = Scalar(1) - std::pow(beta1, Scalar(t));
    const Scalar c2 = Scalar(1) - std::pow(beta2, Scalar(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& mi = m[i].data;
      auto& vi = v[i].data;
      const auto& g = grad[i].data;
      mi = beta1 * mi + (Scalar(1) - beta1) * g;
      vi = beta2 * vi + (Scalar(1) - beta2) * g.square();
      params[i].data -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
    }
  }
};

}  // namespace dipwm
