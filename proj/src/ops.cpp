#include "docnmt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "docnmt/errors.hpp"
#include "eigen_view.hpp"

namespace docnmt {

using detail::view;

namespace {

template <typename T>
void require_matrix(const Tensor<T>& x, const char* op) {
  if (x.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(x.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) +
                         " does not match " + shape_string(b.shape()));
  }
}

template <typename T>
Node<T>& parent(Node<T>& n, std::size_t i) {
  return *n.parents[i];
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  view(out, m, n).noalias() =
      view(a.node()->data, m, k) * view(b.node()->data, k, n);
  return Tensor<T>::from_op({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& na = parent(self, 0);
    auto& nb = parent(self, 1);
    auto dc = view(self.grad, m, n);
    if (na.requires_grad) view(na.grad_buffer(), m, k).noalias() += dc * view(nb.data, k, n).transpose();
    if (nb.requires_grad) view(nb.grad_buffer(), k, n).noalias() += view(na.data, m, k).transpose() * dc;
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(r * c);
  view(out, c, r) = view(a.node()->data, r, c).transpose();
  return Tensor<T>::from_op({c, r}, std::move(out), {a}, [r, c](Node<T>& self) {
    view(parent(self, 0).grad_buffer(), r, c) += view(self.grad, c, r).transpose();
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& np = parent(self, p);
      if (!np.requires_grad) continue;
      auto& g = np.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& na = parent(self, 0);
    auto& nb = parent(self, 1);
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& na = parent(self, 0);
    auto& nb = parent(self, 1);
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> add_column_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_matrix(x, "add_column_bias");
  const std::size_t r = x.rows(), c = x.cols();
  if (bias.size() != r) {
    throw DimensionError("add_column_bias: bias " + shape_string(bias.shape()) +
                         " does not match rows of " + shape_string(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto& b = bias.node()->data;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b[i];
  return Tensor<T>::from_op(x.shape(), std::move(out), {x, bias}, [r, c](Node<T>& self) {
    auto& nx = parent(self, 0);
    auto& nb = parent(self, 1);
    if (nx.requires_grad) {
      auto& g = nx.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < c; ++j) acc += self.grad[i * c + j];
        g[i] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& np = parent(self, 0);
    auto& g = np.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (np.data[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto& in = x.node()->data;
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Split by sign so exp never overflows.
    const T v = in[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = self.data[i];
      g[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.dim()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_string(x.shape()));
  }
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t extent = shape[axis];

  const auto& in = x.node()->data;
  for (T v : in)
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");

  std::vector<T> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      T peak = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < extent; ++e) peak = std::max(peak, in[base + e * inner]);
      T total = 0;
      for (std::size_t e = 0; e < extent; ++e) {
        const T v = std::exp(in[base + e * inner] - peak);
        out[base + e * inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= total;
    }
  }
  return Tensor<T>::from_op(shape, std::move(out), {x}, [outer, inner, extent](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    const auto& y = self.data;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * extent * inner + i;
        T dot = 0;
        for (std::size_t e = 0; e < extent; ++e) dot += y[base + e * inner] * dy[base + e * inner];
        for (std::size_t e = 0; e < extent; ++e) {
          const std::size_t at = base + e * inner;
          g[at] += y[at] * (dy[at] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double epsilon) {
  require_matrix(x, "layer_norm");
  const std::size_t d = x.rows(), l = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match features of " +
                         shape_string(x.shape()));
  }
  const auto& in = x.node()->data;
  const auto& g = gain.node()->data;
  const auto& b = bias.node()->data;

  // normalized values and per-column inverse std are kept for the backward pass
  std::vector<T> normalized(in.size());
  std::vector<T> inv_std(l);
  std::vector<T> out(in.size());
  std::vector<T> column_mean(l, T(0));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < l; ++j) column_mean[j] += in[i * l + j];
  for (auto& m : column_mean) m /= static_cast<T>(d);
  std::vector<T> column_var(l, T(0));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < l; ++j) {
      const T c = in[i * l + j] - column_mean[j];
      column_var[j] += c * c;
    }
  for (std::size_t j = 0; j < l; ++j)
    inv_std[j] = T(1) / std::sqrt(column_var[j] / static_cast<T>(d) + static_cast<T>(epsilon));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < l; ++j) {
      const std::size_t at = i * l + j;
      normalized[at] = (in[at] - column_mean[j]) * inv_std[j];
      out[at] = g[i] * normalized[at] + b[i];
    }

  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x, gain, bias},
      [d, l, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& nx = parent(self, 0);
        auto& ng = parent(self, 1);
        auto& nb = parent(self, 2);
        const auto& dy = self.grad;
        if (ng.requires_grad || nb.requires_grad) {
          for (std::size_t i = 0; i < d; ++i) {
            T sg = 0, sb = 0;
            for (std::size_t j = 0; j < l; ++j) {
              sg += dy[i * l + j] * normalized[i * l + j];
              sb += dy[i * l + j];
            }
            if (ng.requires_grad) ng.grad_buffer()[i] += sg;
            if (nb.requires_grad) nb.grad_buffer()[i] += sb;
          }
        }
        if (!nx.requires_grad) return;
        auto& dx = nx.grad_buffer();
        const auto& gv = ng.data;
        std::vector<T> mean_dxhat(l, T(0)), mean_dxhat_xhat(l, T(0));
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < l; ++j) {
            const T dxhat = dy[i * l + j] * gv[i];
            mean_dxhat[j] += dxhat;
            mean_dxhat_xhat[j] += dxhat * normalized[i * l + j];
          }
        const T inv_d = T(1) / static_cast<T>(d);
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < l; ++j) {
            const std::size_t at = i * l + j;
            const T dxhat = dy[at] * gv[i];
            dx[at] += inv_std[j] *
                      (dxhat - mean_dxhat[j] * inv_d - normalized[at] * mean_dxhat_xhat[j] * inv_d);
          }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return Tensor<T>::from_op({1}, {total}, {x}, [](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> embedding_columns(const Tensor<T>& table, std::span<const TokenId> ids) {
  require_matrix(table, "embedding_columns");
  const std::size_t vocab = table.rows(), d = table.cols(), n = ids.size();
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ContractError("embedding: token id " + std::to_string(id) +
                          " outside vocabulary of " + std::to_string(vocab));
    }
  }
  std::vector<T> out(d * n);
  const auto& w = table.node()->data;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t row = static_cast<std::size_t>(ids[j]) * d;
    for (std::size_t i = 0; i < d; ++i) out[i * n + j] = w[row + i];
  }
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return Tensor<T>::from_op({d, n}, std::move(out), {table},
                            [d, n, saved = std::move(saved)](Node<T>& self) {
                              auto& g = parent(self, 0).grad_buffer();
                              for (std::size_t j = 0; j < n; ++j) {
                                const std::size_t row = static_cast<std::size_t>(saved[j]) * d;
                                for (std::size_t i = 0; i < d; ++i) g[row + i] += self.grad[i * n + j];
                              }
                            });
}

template <typename T>
Tensor<T> concat_columns(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_columns: nothing to concatenate");
  const std::size_t r = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_columns");
    if (p.rows() != r) {
      throw DimensionError("concat_columns: " + shape_string(p.shape()) + " vs " +
                           shape_string(parts.front().shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<T> out(r * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    view(out, r, total).middleCols(offset, c) = view(p.node()->data, r, c);
    offset += c;
  }
  return Tensor<T>::from_op({r, total}, std::move(out), parts,
                            [r, total, widths = std::move(widths)](Node<T>& self) {
                              std::size_t at = 0;
                              for (std::size_t p = 0; p < widths.size(); ++p) {
                                auto& np = parent(self, p);
                                if (np.requires_grad) {
                                  view(np.grad_buffer(), r, widths[p]) +=
                                      view(self.grad, r, total).middleCols(at, widths[p]);
                                }
                                at += widths[p];
                              }
                            });
}

template <typename T>
Tensor<T> slice_columns(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_columns");
  const std::size_t r = x.rows(), c = x.cols();
  if (begin > end || end > c) {
    throw DimensionError("slice_columns: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") outside " + shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<T> out(r * w);
  view(out, r, w) = view(x.node()->data, r, c).middleCols(begin, w);
  return Tensor<T>::from_op({r, w}, std::move(out), {x}, [r, c, begin, w](Node<T>& self) {
    view(parent(self, 0).grad_buffer(), r, c).middleCols(begin, w) += view(self.grad, r, w);
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout: rate must be below 1");
  // One draw from `rng` seeds a splitmix64 stream; each 64-bit output yields
  // two 32-bit keep/drop decisions.
  const T factor = static_cast<T>(1.0 / (1.0 - rate));
  const auto threshold = static_cast<std::uint64_t>((1.0 - rate) * 4294967296.0);
  std::uint64_t state = rng();
  std::vector<T> mask(x.size());
  for (std::size_t i = 0; i < mask.size(); i += 2) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    mask[i] = (z & 0xFFFFFFFFULL) < threshold ? factor : T(0);
    if (i + 1 < mask.size()) mask[i + 1] = (z >> 32) < threshold ? factor : T(0);
  }
  std::vector<T> out(x.size());
  const auto& in = x.node()->data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * mask[i];
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node<T>& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

template <typename T>
Tensor<T> nll_sum(const Tensor<T>& logits, std::span<const TokenId> targets, TokenId ignore,
                  double smoothing) {
  require_matrix(logits, "nll_sum");
  const std::size_t v = logits.rows(), n = logits.cols();
  if (targets.size() != n) {
    throw DimensionError("nll_sum: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  }
  const auto& z = logits.node()->data;
  // probabilities per column, kept for the gradient
  std::vector<T> prob(v * n, T(0));
  const T eps = static_cast<T>(smoothing);
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const TokenId t = targets[j];
    if (t == ignore) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw ContractError("nll_sum: target id " + std::to_string(t) + " outside vocabulary of " +
                          std::to_string(v));
    }
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < v; ++i) peak = std::max(peak, z[i * n + j]);
    if (!std::isfinite(peak)) throw NumericError("nll_sum: non-finite logits");
    T denom = 0;
    for (std::size_t i = 0; i < v; ++i) {
      const T e = std::exp(z[i * n + j] - peak);
      prob[i * n + j] = e;
      denom += e;
    }
    for (std::size_t i = 0; i < v; ++i) prob[i * n + j] /= denom;
    const T log_denom = peak + std::log(denom);
    total -= (T(1) - eps) * (z[static_cast<std::size_t>(t) * n + j] - log_denom);
    if (eps > T(0)) {
      T mean_log_prob = 0;
      for (std::size_t i = 0; i < v; ++i) mean_log_prob += z[i * n + j] - log_denom;
      total -= eps * mean_log_prob / static_cast<T>(v);
    }
  }
  std::vector<TokenId> saved(targets.begin(), targets.end());
  return Tensor<T>::from_op(
      {1}, {total}, {logits},
      [v, n, ignore, eps, prob = std::move(prob), saved = std::move(saved)](Node<T>& self) {
        auto& g = parent(self, 0).grad_buffer();
        const T up = self.grad[0];
        const T spread = eps / static_cast<T>(v);
        for (std::size_t j = 0; j < n; ++j) {
          if (saved[j] == ignore) continue;
          for (std::size_t i = 0; i < v; ++i) g[i * n + j] += up * (prob[i * n + j] - spread);
          g[static_cast<std::size_t>(saved[j]) * n + j] -= up * (T(1) - eps);
        }
      });
}

template <typename T>
std::vector<T> log_softmax_column(const Tensor<T>& logits, std::size_t column) {
  const std::size_t v = logits.rows(), n = logits.cols();
  if (column >= n) throw DimensionError("log_softmax_column: column out of range");
  const auto& z = logits.node()->data;
  T peak = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < v; ++i) peak = std::max(peak, z[i * n + column]);
  if (!std::isfinite(peak)) throw NumericError("log_softmax_column: non-finite logits");
  T denom = 0;
  for (std::size_t i = 0; i < v; ++i) denom += std::exp(z[i * n + column] - peak);
  const T log_denom = std::log(denom);
  std::vector<T> out(v);
  for (std::size_t i = 0; i < v; ++i) out[i] = z[i * n + column] - peak - log_denom;
  return out;
}

#define DOCNMT_INSTANTIATE_OPS(T)                                                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> transpose(const Tensor<T>&);                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> add_column_bias(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> embedding_columns(const Tensor<T>&, std::span<const TokenId>);           \
  template Tensor<T> concat_columns(const std::vector<Tensor<T>>&);                           \
  template Tensor<T> slice_columns(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&);                     \
  template Tensor<T> nll_sum(const Tensor<T>&, std::span<const TokenId>, TokenId, double);    \
  template std::vector<T> log_softmax_column(const Tensor<T>&, std::size_t);

DOCNMT_INSTANTIATE_OPS(float)
DOCNMT_INSTANTIATE_OPS(double)

}  // namespace docnmt
