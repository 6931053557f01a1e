#include "docnmt/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "docnmt/errors.hpp"

namespace docnmt {

std::string_view partition_name(Partition p) {
  return p == Partition::sentence ? "sentence" : "document";
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

template <typename T>
Tensor<T> ParameterSet<T>::create(const std::string& name, Partition partition, Shape shape,
                                  Init init) {
  if (find(name)) throw ContractError("parameter '" + name + "' defined twice");
  std::vector<T> data(shape_size(shape), T(0));
  std::mt19937_64 rng(seed_ ^ fnv1a(name));
  switch (init) {
    case Init::zeros:
      break;
    case Init::ones:
      std::fill(data.begin(), data.end(), T(1));
      break;
    case Init::uniform_fan_in: {
      // variance 1/fan_in; fan_in is the column count of an [out x in] weight
      const double fan_in = shape.size() >= 2 ? static_cast<double>(shape[1]) : 1.0;
      std::uniform_real_distribution<double> dist(-std::sqrt(3.0 / fan_in), std::sqrt(3.0 / fan_in));
      for (auto& v : data) v = static_cast<T>(dist(rng));
      break;
    }
    case Init::embedding: {
      // unit variance, the same scale as the positional encoding
      std::uniform_real_distribution<double> dist(-std::sqrt(3.0), std::sqrt(3.0));
      for (auto& v : data) v = static_cast<T>(dist(rng));
      break;
    }
  }
  Tensor<T> value(std::move(shape), std::move(data), true);
  params_.push_back({name, partition, value});
  return value;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
std::size_t ParameterSet<T>::count(Partition partition) const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.partition == partition;
  return n;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template class ParameterSet<float>;
template class ParameterSet<double>;

}  // namespace docnmt
