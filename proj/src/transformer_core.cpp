#include "docnmt/transformer_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "docnmt/errors.hpp"
#include "eigen_view.hpp"

namespace docnmt {

using detail::view;

AttentionMask AttentionMask::none(std::size_t query_len, std::size_t key_len, std::size_t batch) {
  return {Kind::none, batch, query_len, key_len, {}};
}

AttentionMask AttentionMask::causal(std::size_t length, std::size_t batch) {
  return {Kind::causal, batch, length, length, {}};
}

AttentionMask AttentionMask::padding(std::size_t query_len, std::size_t key_len,
                                     std::vector<std::size_t> key_lengths) {
  const std::size_t batch = key_lengths.size();
  return {Kind::padding, batch, query_len, key_len, std::move(key_lengths)};
}

AttentionMask AttentionMask::padding_causal(std::size_t length,
                                            std::vector<std::size_t> key_lengths) {
  const std::size_t batch = key_lengths.size();
  return {Kind::padding_causal, batch, length, length, std::move(key_lengths)};
}

bool AttentionMask::allowed(std::size_t b, std::size_t query, std::size_t key) const {
  switch (kind) {
    case Kind::none:
      return true;
    case Kind::padding:
      return key < key_lengths[b];
    case Kind::causal:
      return key <= query;
    case Kind::padding_causal:
      return key <= query && key < key_lengths[b];
  }
  return false;
}

std::size_t AttentionMask::visible_keys(std::size_t b, std::size_t query) const {
  switch (kind) {
    case Kind::none:
      return key_len;
    case Kind::padding:
      return std::min(key_len, key_lengths[b]);
    case Kind::causal:
      return std::min(key_len, query + 1);
    case Kind::padding_causal:
      return std::min({key_len, query + 1, key_lengths[b]});
  }
  return 0;
}

std::vector<std::vector<bool>> AttentionMask::matrix(std::size_t b) const {
  std::vector<std::vector<bool>> m(query_len, std::vector<bool>(key_len));
  for (std::size_t i = 0; i < query_len; ++i)
    for (std::size_t j = 0; j < key_len; ++j) m[i][j] = allowed(b, i, j);
  return m;
}

template <typename T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k,
                                       const Tensor<T>& v, const AttentionMask& mask,
                                       std::size_t heads, std::vector<T>* weights) {
  const std::size_t d = q.rows();
  const std::size_t batch = mask.batch, lq = mask.query_len, lk = mask.key_len;
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide dimension " +
                      std::to_string(d));
  }
  if (q.cols() != batch * lq || k.cols() != batch * lk || v.shape() != k.shape() ||
      k.rows() != d) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()) +
                         " inconsistent with mask " + std::to_string(batch) + "x(" +
                         std::to_string(lq) + "," + std::to_string(lk) + ")");
  }
  if ((mask.kind == AttentionMask::Kind::padding ||
       mask.kind == AttentionMask::Kind::padding_causal) &&
      mask.key_lengths.size() != batch) {
    throw DimensionError("attention: mask has " + std::to_string(mask.key_lengths.size()) +
                         " key lengths for batch of " + std::to_string(batch));
  }
  const std::size_t dh = d / heads;
  const std::size_t nq = batch * lq, nk = batch * lk;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<T> probs(batch * heads * lq * lk, T(0));
  std::vector<T> out(d * nq, T(0));
  const auto qm = view(q.node()->data, d, nq);
  const auto km = view(k.node()->data, d, nk);
  const auto vm = view(v.node()->data, d, nk);
  auto om = view(out, d, nq);

  detail::RowMatrix<T> scores(lq, lk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      scores.noalias() = qm.block(h * dh, b * lq, dh, lq).transpose() *
                         km.block(h * dh, b * lk, dh, lk);
      T* p = probs.data() + ((b * heads + h) * lq) * lk;
      for (std::size_t i = 0; i < lq; ++i) {
        const std::size_t visible = mask.visible_keys(b, i);
        if (visible == 0) {
          throw ContractError("attention: query " + std::to_string(i) + " of batch entry " +
                              std::to_string(b) + " has no visible key");
        }
        T peak = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < visible; ++j) peak = std::max(peak, scores(i, j) * scale_factor);
        if (!std::isfinite(peak)) throw NumericError("attention: non-finite score");
        T total = 0;
        for (std::size_t j = 0; j < visible; ++j) {
          const T e = std::exp(scores(i, j) * scale_factor - peak);
          p[i * lk + j] = e;
          total += e;
        }
        for (std::size_t j = 0; j < visible; ++j) p[i * lk + j] /= total;
      }
      const auto pm = detail::ConstMatrixMap<T>(p, lq, lk);
      om.block(h * dh, b * lq, dh, lq).noalias() = vm.block(h * dh, b * lk, dh, lk) * pm.transpose();
    }
  }
  if (weights) *weights = probs;

  return Tensor<T>::from_op(
      {d, nq}, std::move(out), {q, k, v},
      [=, probs = std::move(probs)](Node<T>& self) {
        auto& nq_node = *self.parents[0];
        auto& nk_node = *self.parents[1];
        auto& nv_node = *self.parents[2];
        const auto qv = view(nq_node.data, d, nq);
        const auto kv = view(nk_node.data, d, nk);
        const auto vv = view(nv_node.data, d, nk);
        const auto dout = view(self.grad, d, nq);
        detail::RowMatrix<T> dp(lq, lk), ds(lq, lk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const auto pm =
                detail::ConstMatrixMap<T>(probs.data() + ((b * heads + h) * lq) * lk, lq, lk);
            const auto dob = dout.block(h * dh, b * lq, dh, lq);
            if (nv_node.requires_grad) {
              view(nv_node.grad_buffer(), d, nk).block(h * dh, b * lk, dh, lk).noalias() += dob * pm;
            }
            if (!nq_node.requires_grad && !nk_node.requires_grad) continue;
            dp.noalias() = dob.transpose() * vv.block(h * dh, b * lk, dh, lk);
            for (std::size_t i = 0; i < lq; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j < lk; ++j) dot += dp(i, j) * pm(i, j);
              for (std::size_t j = 0; j < lk; ++j) ds(i, j) = pm(i, j) * (dp(i, j) - dot) * scale_factor;
            }
            if (nq_node.requires_grad) {
              view(nq_node.grad_buffer(), d, nq).block(h * dh, b * lq, dh, lq).noalias() +=
                  kv.block(h * dh, b * lk, dh, lk) * ds.transpose();
            }
            if (nk_node.requires_grad) {
              view(nk_node.grad_buffer(), d, nk).block(h * dh, b * lk, dh, lk).noalias() +=
                  qv.block(h * dh, b * lq, dh, lq) * ds;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t dim) {
  if (dim % 2 != 0) {
    throw ConfigError("positional encoding needs an even dimension, got " + std::to_string(dim));
  }
  std::vector<T> out(dim * length);
  for (std::size_t i = 0; i < dim; i += 2) {
    const double inv_wavelength = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
    for (std::size_t pos = 0; pos < length; ++pos) {
      const double angle = static_cast<double>(pos) * inv_wavelength;
      out[i * length + pos] = static_cast<T>(std::sin(angle));
      out[(i + 1) * length + pos] = static_cast<T>(std::cos(angle));
    }
  }
  return Tensor<T>({dim, length}, std::move(out));
}

template <typename T>
Tensor<T> embed(std::span<const TokenId> tokens, const EmbeddingTable<T>& table) {
  return embed_batch(tokens, 1, tokens.size(), table);
}

template <typename T>
Tensor<T> embed_batch(std::span<const TokenId> tokens, std::size_t batch, std::size_t length,
                      const EmbeddingTable<T>& table) {
  if (tokens.size() != batch * length) {
    throw DimensionError("embed: " + std::to_string(tokens.size()) + " tokens for a " +
                         std::to_string(batch) + "x" + std::to_string(length) + " batch");
  }
  const std::size_t d = table.dim();
  const Tensor<T> words = embedding_columns(table.weights, tokens);
  const Tensor<T> pe = positional_encoding<T>(length, d);
  std::vector<T> tiled(d * batch * length);
  const auto& src = pe.data();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < length; ++t)
        tiled[i * batch * length + b * length + t] = src[i * length + t];
  return add(words, Tensor<T>({d, batch * length}, std::move(tiled)));
}

template <typename T>
MultiHeadAttention<T> MultiHeadAttention<T>::create(ParameterSet<T>& params,
                                                    const std::string& prefix, Partition partition,
                                                    std::size_t dim, std::size_t heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError(prefix + ": " + std::to_string(heads) + " heads do not divide dimension " +
                      std::to_string(dim));
  }
  MultiHeadAttention m;
  m.heads = heads;
  m.w_q = params.create(prefix + ".w_q", partition, {dim, dim}, Init::uniform_fan_in);
  m.w_k = params.create(prefix + ".w_k", partition, {dim, dim}, Init::uniform_fan_in);
  m.w_v = params.create(prefix + ".w_v", partition, {dim, dim}, Init::uniform_fan_in);
  m.w_o = params.create(prefix + ".w_o", partition, {dim, dim}, Init::uniform_fan_in);
  return m;
}

template <typename T>
ProjectedMemory<T> project_memory(const Tensor<T>& k, const Tensor<T>& v,
                                  const MultiHeadAttention<T>& params) {
  if (k.cols() != v.cols()) {
    throw DimensionError("attention: keys " + shape_string(k.shape()) + " and values " +
                         shape_string(v.shape()) + " differ in length");
  }
  return {matmul(params.w_k, k), matmul(params.w_v, v)};
}

template <typename T>
Tensor<T> attend(const Tensor<T>& q, const ProjectedMemory<T>& memory, const AttentionMask& mask,
                 const MultiHeadAttention<T>& params, std::vector<T>* weights) {
  const Tensor<T> heads_out = scaled_dot_product_attention(
      matmul(params.w_q, q), memory.keys, memory.values, mask, params.heads, weights);
  return matmul(params.w_o, heads_out);
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionMask& mask, const MultiHeadAttention<T>& params,
                               std::vector<T>* weights) {
  return attend(q, project_memory(k, v, params), mask, params, weights);
}

template <typename T>
FeedForward<T> FeedForward<T>::create(ParameterSet<T>& params, const std::string& prefix,
                                      Partition partition, std::size_t dim, std::size_t filter) {
  FeedForward f;
  f.w1 = params.create(prefix + ".w1", partition, {filter, dim}, Init::uniform_fan_in);
  f.b1 = params.create(prefix + ".b1", partition, {filter}, Init::zeros);
  f.w2 = params.create(prefix + ".w2", partition, {dim, filter}, Init::uniform_fan_in);
  f.b2 = params.create(prefix + ".b2", partition, {dim}, Init::zeros);
  return f;
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForward<T>& params) {
  const Tensor<T> hidden = relu(add_column_bias(matmul(params.w1, x), params.b1));
  return add_column_bias(matmul(params.w2, hidden), params.b2);
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::create(ParameterSet<T>& params, const std::string& prefix,
                                              Partition partition, std::size_t dim) {
  return {params.create(prefix + ".gain", partition, {dim}, Init::ones),
          params.create(prefix + ".bias", partition, {dim}, Init::zeros)};
}

template <typename T>
Tensor<T> residual_sublayer(const Tensor<T>& h, const Tensor<T>& sublayer_output,
                            const LayerNormParams<T>& norm) {
  return layer_norm(add(h, sublayer_output), norm.gain, norm.bias);
}

#define DOCNMT_INSTANTIATE_CORE(T)                                                            \
  template Tensor<T> scaled_dot_product_attention(const Tensor<T>&, const Tensor<T>&,         \
                                                  const Tensor<T>&, const AttentionMask&,     \
                                                  std::size_t, std::vector<T>*);              \
  template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);                        \
  template Tensor<T> embed(std::span<const TokenId>, const EmbeddingTable<T>&);               \
  template Tensor<T> embed_batch(std::span<const TokenId>, std::size_t, std::size_t,          \
                                 const EmbeddingTable<T>&);                                   \
  template struct MultiHeadAttention<T>;                                                      \
  template ProjectedMemory<T> project_memory(const Tensor<T>&, const Tensor<T>&,              \
                                             const MultiHeadAttention<T>&);                   \
  template Tensor<T> attend(const Tensor<T>&, const ProjectedMemory<T>&,                      \
                            const AttentionMask&, const MultiHeadAttention<T>&,               \
                            std::vector<T>*);                                                 \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&,                 \
                                          const Tensor<T>&, const AttentionMask&,             \
                                          const MultiHeadAttention<T>&, std::vector<T>*);     \
  template struct FeedForward<T>;                                                             \
  template Tensor<T> feed_forward(const Tensor<T>&, const FeedForward<T>&);                   \
  template struct LayerNormParams<T>;                                                         \
  template Tensor<T> residual_sublayer(const Tensor<T>&, const Tensor<T>&,                    \
                                       const LayerNormParams<T>&);

DOCNMT_INSTANTIATE_CORE(float)
DOCNMT_INSTANTIATE_CORE(double)

}  // namespace docnmt
