#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "docnmt/tensor.hpp"

namespace docnmt {

// Sentence-level parameters belong to the baseline Transformer; document-level
// parameters are the context encoder, context attention, gates and their norms.
enum class Partition : std::uint8_t { sentence = 0, document = 1 };

std::string_view partition_name(Partition p);

enum class Init { zeros, ones, uniform_fan_in, embedding };

template <typename T>
struct Parameter {
  std::string name;
  Partition partition;
  Tensor<T> value;
};

// Owns every trainable tensor of a model in creation order. Initial values
// depend only on (seed, name), never on creation order, so models with
// different optional modules still share identical sentence-level weights.
template <typename T>
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor<T> create(const std::string& name, Partition partition, Shape shape, Init init);

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  const Parameter<T>* find(std::string_view name) const;
  Parameter<T>* find(std::string_view name);

  std::size_t count(Partition partition) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::uint64_t seed_;
  std::vector<Parameter<T>> params_;
};

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;

}  // namespace docnmt
