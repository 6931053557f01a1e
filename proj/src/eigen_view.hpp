#pragma once

#include <Eigen/Core>
#include <vector>

namespace docnmt::detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;

template <typename T>
ConstMatrixMap<T> view(const std::vector<T>& data, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap<T>(data.data(), static_cast<Eigen::Index>(rows),
                           static_cast<Eigen::Index>(cols));
}

template <typename T>
MatrixMap<T> view(std::vector<T>& data, std::size_t rows, std::size_t cols) {
  return MatrixMap<T>(data.data(), static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(cols));
}

}  // namespace docnmt::detail
