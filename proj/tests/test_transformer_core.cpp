#include <doctest.h>

#include <cmath>
#include <random>

#include "docnmt/errors.hpp"
#include "docnmt/transformer_core.hpp"

using namespace docnmt;
using Td = Tensor<double>;

namespace {

Td random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(r * c);
  for (auto& x : v) x = u(rng);
  return Td({r, c}, v);
}

Td identity(std::size_t d) {
  Td m = Td::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) m.mutable_data()[i * d + i] = 1;
  return m;
}

MultiHeadAttention<double> random_attention(std::size_t d, std::size_t heads, std::mt19937_64& rng) {
  return {heads, random_matrix(d, d, rng), random_matrix(d, d, rng), random_matrix(d, d, rng),
          random_matrix(d, d, rng)};
}

double max_abs_diff(const Td& a, const Td& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// Per-head loop written directly from the definition, one query at a time.
Td attention_oracle(const Td& q, const Td& k, const Td& v, const MultiHeadAttention<double>& p,
                    const AttentionMask& mask, std::size_t lq, std::size_t lk, std::size_t batch) {
  const Td qp = matmul(p.w_q, q), kp = matmul(p.w_k, k), vp = matmul(p.w_v, v);
  const std::size_t d = q.rows(), dh = d / p.heads;
  Td concat = Td::zeros({d, q.cols()});
  auto out = concat.mutable_data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < p.heads; ++h)
      for (std::size_t i = 0; i < lq; ++i) {
        std::vector<double> w(lk, 0.0);
        double z = 0;
        for (std::size_t j = 0; j < lk; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          double s = 0;
          for (std::size_t r = 0; r < dh; ++r) s += qp(h * dh + r, b * lq + i) * kp(h * dh + r, b * lk + j);
          w[j] = std::exp(s / std::sqrt(double(dh)));
          z += w[j];
        }
        for (std::size_t r = 0; r < dh; ++r) {
          double acc = 0;
          for (std::size_t j = 0; j < lk; ++j) acc += w[j] / z * vp(h * dh + r, b * lk + j);
          out[(h * dh + r) * q.cols() + b * lq + i] = acc;
        }
      }
  return matmul(p.w_o, concat);
}

}  // namespace

TEST_CASE("positional encoding examples") {
  const Td pe = positional_encoding<double>(5, 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(pe(i, 0) == (i % 2 == 0 ? 0.0 : 1.0));
  const Td two = positional_encoding<double>(2, 2);
  CHECK(two(0, 1) == doctest::Approx(std::sin(1.0)));
  CHECK(two(1, 1) == doctest::Approx(std::cos(1.0)));
  const Td big = positional_encoding<double>(50, 16);
  for (double x : big.data()) CHECK((x >= -1 && x <= 1));
  CHECK(big(4, 7) == doctest::Approx(std::sin(7 / std::pow(10000.0, 4.0 / 16))));
  CHECK(big(5, 7) == doctest::Approx(std::cos(7 / std::pow(10000.0, 4.0 / 16))));
  CHECK_THROWS_AS(positional_encoding<double>(3, 5), ConfigError);
}

TEST_CASE("embed examples") {
  std::mt19937_64 rng(2);
  const EmbeddingTable<double> table{random_matrix(6, 4, rng)};
  const Td empty = embed<double>(std::span<const TokenId>{}, table);
  CHECK(empty.shape() == Shape{4, 0});

  const TokenId one[] = {3};
  const Td single = embed<double>(one, table);
  for (std::size_t i = 0; i < 4; ++i) CHECK(single(i, 0) == table.weights(3, i) + (i % 2 ? 1.0 : 0.0));

  const TokenId twice[] = {5, 5};
  const Td pair = embed<double>(twice, table);
  const Td pe = positional_encoding<double>(2, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(pair(i, 1) - pair(i, 0) == doctest::Approx(pe(i, 1) - pe(i, 0)).epsilon(1e-12));
  }
  const TokenId bad[] = {6};
  CHECK_THROWS_AS(embed<double>(bad, table), ContractError);
}

TEST_CASE("embed_batch restarts positions per row") {
  std::mt19937_64 rng(4);
  const EmbeddingTable<double> table{random_matrix(6, 4, rng)};
  const TokenId tokens[] = {1, 2, 3, 4, 5, 0};
  const Td batched = embed_batch<double>(tokens, 2, 3, table);
  const TokenId second[] = {4, 5, 0};
  const Td alone = embed<double>(second, table);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t t = 0; t < 3; ++t) CHECK(batched(i, 3 + t) == alone(i, t));
}

TEST_CASE("attention masks expose key prefixes") {
  const auto causal = AttentionMask::causal(3, 2);
  CHECK(causal.visible_keys(1, 0) == 1);
  CHECK(causal.visible_keys(0, 2) == 3);
  const auto pad = AttentionMask::padding(2, 4, {4, 2});
  CHECK(pad.visible_keys(0, 1) == 4);
  CHECK(pad.visible_keys(1, 1) == 2);
  CHECK_FALSE(pad.allowed(1, 0, 2));
  const auto both = AttentionMask::padding_causal(4, {4, 2});
  CHECK(both.visible_keys(1, 3) == 2);
  CHECK(both.visible_keys(1, 0) == 1);
  const auto m = both.matrix(1);
  CHECK(m[3] == std::vector<bool>{true, true, false, false});
  CHECK(AttentionMask::none(2, 3).visible_keys(0, 0) == 3);
}

TEST_CASE("attention over a single key returns the projected value") {
  std::mt19937_64 rng(5);
  const auto p = random_attention(4, 2, rng);
  const Td k = random_matrix(4, 1, rng), v = random_matrix(4, 1, rng);
  const Td expected = matmul(p.w_o, matmul(p.w_v, v));
  for (int trial = 0; trial < 3; ++trial) {
    const Td q = random_matrix(4, 2, rng);
    const Td out = multi_head_attention(q, k, v, AttentionMask::none(2, 1), p);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) CHECK(out(i, c) == doctest::Approx(expected(i, 0)).epsilon(1e-12));
  }
}

TEST_CASE("two identical keys with identity projections average the values") {
  const MultiHeadAttention<double> p{1, identity(2), identity(2), identity(2), identity(2)};
  const Td k = Td::matrix({{0.3, 0.3}, {-0.7, -0.7}});
  const Td v = Td::matrix({{1, 3}, {2, -4}});
  const Td q = Td::matrix({{5}, {2}});
  const Td out = multi_head_attention(q, k, v, AttentionMask::none(1, 2), p);
  CHECK(out(0, 0) == doctest::Approx(2));
  CHECK(out(1, 0) == doctest::Approx(-1));
}

TEST_CASE("single-head attention matches a dense computation") {
  std::mt19937_64 rng(7);
  const auto p = random_attention(2, 1, rng);
  const Td q = random_matrix(2, 2, rng), k = random_matrix(2, 2, rng), v = random_matrix(2, 2, rng);
  const Td scores = scale(matmul(transpose(matmul(p.w_q, q)), matmul(p.w_k, k)), 1 / std::sqrt(2.0));
  const Td weights = softmax(scores, 1);
  const Td dense = matmul(p.w_o, matmul(matmul(p.w_v, v), transpose(weights)));
  CHECK(max_abs_diff(multi_head_attention(q, k, v, AttentionMask::none(2, 2), p), dense) < 1e-12);
}

TEST_CASE("multi-head attention equals the per-head loop") {
  std::mt19937_64 rng(8);
  for (std::size_t heads : {1, 2, 4}) {
    const auto p = random_attention(8, heads, rng);
    const Td q = random_matrix(8, 2 * 3, rng), k = random_matrix(8, 2 * 5, rng), v = random_matrix(8, 2 * 5, rng);
    const auto none = AttentionMask::none(3, 5, 2);
    CHECK(max_abs_diff(multi_head_attention(q, k, v, none, p), attention_oracle(q, k, v, p, none, 3, 5, 2)) < 1e-12);
    const auto pad = AttentionMask::padding(3, 5, {5, 2});
    CHECK(max_abs_diff(multi_head_attention(q, k, v, pad, p), attention_oracle(q, k, v, p, pad, 3, 5, 2)) < 1e-12);
    const Td s = random_matrix(8, 2 * 4, rng);
    const auto pc = AttentionMask::padding_causal(4, {4, 3});
    CHECK(max_abs_diff(multi_head_attention(s, s, s, pc, p), attention_oracle(s, s, s, p, pc, 4, 4, 2)) < 1e-12);
  }
}

TEST_CASE("attention weights are row-stochastic with exact zeros under the mask") {
  std::mt19937_64 rng(9);
  const auto p = random_attention(8, 2, rng);
  const Td x = random_matrix(8, 2 * 4, rng);
  std::vector<double> w;
  const auto mask = AttentionMask::padding_causal(4, {4, 2});
  multi_head_attention(x, x, x, mask, p, &w);
  REQUIRE(w.size() == 2 * 2 * 4 * 4);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 4; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 4; ++j) {
          const double x_ = w[((b * 2 + h) * 4 + i) * 4 + j];
          if (!mask.allowed(b, i, j)) CHECK(x_ == 0.0);
          s += x_;
        }
        CHECK(std::abs(s - 1) < 1e-6);
      }
}

TEST_CASE("query without visible keys is a contract error") {
  std::mt19937_64 rng(10);
  const auto p = random_attention(4, 1, rng);
  const Td q = random_matrix(4, 2, rng), k = random_matrix(4, 4, rng);
  CHECK_THROWS_AS(multi_head_attention(q, k, k, AttentionMask::padding(1, 2, {2, 0}), p), ContractError);
}

TEST_CASE("causal self-attention ignores future positions") {
  std::mt19937_64 rng(11);
  const auto p = random_attention(8, 4, rng);
  Td x = random_matrix(8, 5, rng);
  const Td before = multi_head_attention(x, x, x, AttentionMask::causal(5), p);
  for (std::size_t i = 0; i < 8; ++i) x.mutable_data()[i * 5 + 3] += 10, x.mutable_data()[i * 5 + 4] -= 3;
  const Td after = multi_head_attention(x, x, x, AttentionMask::causal(5), p);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t t = 0; t < 3; ++t) CHECK(after(i, t) == before(i, t));
}

TEST_CASE("projected memory path equals direct attention") {
  std::mt19937_64 rng(12);
  const auto p = random_attention(8, 2, rng);
  const Td q = random_matrix(8, 3, rng), m = random_matrix(8, 6, rng);
  const auto mem = project_memory(m, m, p);
  CHECK(max_abs_diff(attend(q, mem, AttentionMask::none(3, 6), p),
                     multi_head_attention(q, m, m, AttentionMask::none(3, 6), p)) < 1e-12);
}

TEST_CASE("feed-forward examples") {
  std::mt19937_64 rng(13);
  const FeedForward<double> f{random_matrix(16, 4, rng), Td({16}, std::vector<double>(16, 0.1)),
                              random_matrix(4, 16, rng), Td({4}, {0.5, -0.5, 0, 1})};
  const Td x = random_matrix(4, 3, rng);
  const Td y = feed_forward(x, f);
  const Td permuted = concat_columns<double>({slice_columns(x, 2, 3), slice_columns(x, 0, 2)});
  const Td yp = feed_forward(permuted, f);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(yp(i, 0) == doctest::Approx(y(i, 2)).epsilon(1e-13));
    CHECK(yp(i, 1) == doctest::Approx(y(i, 0)).epsilon(1e-13));
    CHECK(yp(i, 2) == doctest::Approx(y(i, 1)).epsilon(1e-13));
  }
  const FeedForward<double> zero{Td::zeros({16, 4}), Td::zeros({16}), Td::zeros({4, 16}), Td::zeros({4})};
  const Td zero_out = feed_forward(x, zero);
  for (double v : zero_out.data()) CHECK(v == 0.0);
  const FeedForward<double> scalar{Td::matrix({{2}}), Td::zeros({1}), Td::matrix({{3}}), Td::zeros({1})};
  CHECK(feed_forward(Td::matrix({{1}}), scalar).item() == 6);
}

TEST_CASE("residual sublayer examples") {
  std::mt19937_64 rng(14);
  const LayerNormParams<double> unit{Td::full({4}, 1.0), Td::zeros({4})};
  const Td h = random_matrix(4, 3, rng), s = random_matrix(4, 3, rng);
  CHECK(max_abs_diff(residual_sublayer(h, Td::zeros({4, 3}), unit), layer_norm(h, unit.gain, unit.bias)) == 0);
  CHECK(max_abs_diff(residual_sublayer(Td::zeros({4, 3}), s, unit), layer_norm(s, unit.gain, unit.bias)) == 0);
  const LayerNormParams<double> biased{Td::full({4}, 1.0), Td({4}, {1, 2, 3, 4})};
  const Td z = residual_sublayer(Td::zeros({4, 3}), Td::zeros({4, 3}), biased);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) CHECK(z(i, c) == double(i + 1));
  CHECK_THROWS_AS(residual_sublayer(h, Td::zeros({4, 2}), unit), DimensionError);
}

TEST_CASE("module constructors register named parameters") {
  ParameterSet<double> params(1);
  const auto mha = MultiHeadAttention<double>::create(params, "att", Partition::document, 8, 2);
  const auto ffn = FeedForward<double>::create(params, "ffn", Partition::sentence, 8, 32);
  CHECK(mha.head_dim() == 4);
  CHECK(params.find("att.w_q") != nullptr);
  CHECK(params.find("ffn.w1")->value.shape() == Shape{32, 8});
  CHECK(params.count(Partition::document) == 4);
  CHECK(params.count(Partition::sentence) == 4);
  CHECK_THROWS_AS(MultiHeadAttention<double>::create(params, "bad", Partition::sentence, 6, 4), ConfigError);
}

TEST_CASE("initial values depend on seed and name only") {
  ParameterSet<double> a(3), b(3);
  a.create("first", Partition::sentence, {4, 4}, Init::uniform_fan_in);
  const Td wa = a.create("second", Partition::sentence, {4, 4}, Init::uniform_fan_in);
  const Td wb = b.create("second", Partition::sentence, {4, 4}, Init::uniform_fan_in);
  CHECK(std::vector<double>(wa.data().begin(), wa.data().end()) ==
        std::vector<double>(wb.data().begin(), wb.data().end()));
}
