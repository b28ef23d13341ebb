#include "doctest.h"

#include <cmath>
#include <vector>

#include "elusive/rng.hpp"
#include "elusive/tensor.hpp"
#include "gradcheck.hpp"

using namespace elusive;
using ad::Matrix;
using ad::Tensor;

namespace {

Matrix<double> random_matrix(Rng& rng, ad::Index rows, ad::Index cols, double scale = 1.0) {
  Matrix<double> m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, scale);
  return m;
}

Tensor<float> make(ad::Shape shape, std::vector<float> data, bool grad = false) {
  return Tensor<float>::from_data(std::move(shape), data, grad);
}

// Fixed random weights turn any tensor into a non-trivial scalar objective.
template <typename S>
Tensor<S> weighted_sum(const Tensor<S>& t, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<S> w(t.rows(), t.cols());
  for (ad::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(rng.normal());
  return ad::sum(ad::mul(t, Tensor<S>::leaf(t.shape(), w)));
}

}  // namespace

TEST_CASE("matmul examples") {
  auto eye = make({2, 2}, {1, 0, 0, 1});
  auto b = make({2, 2}, {3, 4, 5, 6});
  auto c = ad::matmul(eye, b);
  CHECK(c.value() == b.value());

  auto row = make({1, 2}, {1, 2});
  auto col = make({2, 1}, {3, 4});
  CHECK(ad::matmul(row, col).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul reports both shapes on mismatch") {
  auto a = make({2, 3}, std::vector<float>(6, 1.0f));
  auto b = make({2, 2}, std::vector<float>(4, 1.0f));
  try {
    ad::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul leading-batch expansion") {
  Rng rng(7);
  auto a = Tensor<double>::leaf({2, 3, 4}, random_matrix(rng, 6, 4));
  auto b = Tensor<double>::leaf({4, 5}, random_matrix(rng, 4, 5));
  auto c = ad::matmul(a, b);
  CHECK(c.shape() == ad::Shape{2, 3, 5});
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(11);
  auto fn = [](auto& leaves) { return weighted_sum(ad::matmul(leaves[0], leaves[1]), 5); };
  const double err = testing::gradcheck(fn, {random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)},
                                        {{3, 4}, {4, 2}});
  CHECK(err < 1e-4);
}

TEST_CASE("softmax examples") {
  auto uniform = ad::softmax_lastdim(make({4}, {0, 0, 0, 0}));
  for (int j = 0; j < 4; ++j) CHECK(uniform.value()(0, j) == doctest::Approx(0.25));

  auto stable = ad::softmax_lastdim(make({2}, {1000, 0}));
  CHECK(std::abs(stable.value()(0, 0) - 1.0) < 1e-6);
  CHECK(std::abs(stable.value()(0, 1)) < 1e-6);

  // Reference values from direct double-precision evaluation of exp(x)/sum exp(x).
  auto s = ad::softmax_lastdim(make({3}, {1, 2, 3}));
  CHECK(s.value()(0, 0) == doctest::Approx(0.09003057).epsilon(1e-5));
  CHECK(s.value()(0, 1) == doctest::Approx(0.24472847).epsilon(1e-5));
  CHECK(s.value()(0, 2) == doctest::Approx(0.66524096).epsilon(1e-5));
}

TEST_CASE("softmax rows are distributions") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = Tensor<float>::leaf({5, 9}, random_matrix(rng, 5, 9, 10.0).cast<float>());
    auto p = ad::softmax_lastdim(x);
    for (ad::Index i = 0; i < 5; ++i) {
      CHECK(std::abs(p.value().row(i).cast<double>().sum() - 1.0) < 1e-6);
      CHECK(p.value().row(i).minCoeff() >= 0.0f);
      CHECK(p.value().row(i).maxCoeff() <= 1.0f);
    }
  }
}

TEST_CASE("cross entropy examples") {
  SUBCASE("certain targets give zero loss") {
    auto logits = make({2, 3}, {1000, 0, 0, 0, 0, 1000});
    auto loss = ad::cross_entropy_lm(logits, std::vector<int>{0, 2}, {false, false});
    CHECK(loss.item() == doctest::Approx(0.0));
  }
  SUBCASE("uniform logits give ln V") {
    auto logits = make({3, 4}, std::vector<float>(12, 0.5f));
    auto loss = ad::cross_entropy_lm(logits, std::vector<int>{0, 1, 3}, {false, false, false});
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  }
  SUBCASE("ignored positions do not count") {
    auto logits = make({2, 2}, {0, 0, 50, -50});
    auto loss = ad::cross_entropy_lm(logits, std::vector<int>{0, 1}, {false, true});
    CHECK(loss.item() == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("all ignored is an error") {
    auto logits = make({2, 2}, {0, 0, 0, 0});
    CHECK_THROWS_WITH_AS(ad::cross_entropy_lm(logits, std::vector<int>{0, 1}, {true, true}),
                         doctest::Contains("empty loss support"), ContractError);
  }
  SUBCASE("target out of range") {
    auto logits = make({1, 2}, {0, 0});
    CHECK_THROWS_AS(ad::cross_entropy_lm(logits, std::vector<int>{2}, {false}), IndexError);
  }
}

TEST_CASE("backward on scalar expressions") {
  auto x = Tensor<float>::scalar(2.0f, true);
  ad::backward(ad::scale(x, 3.0f));
  CHECK(x.grad()(0, 0) == doctest::Approx(3.0));

  auto y = Tensor<float>::scalar(5.0f, true);
  ad::backward(ad::mul(y, y));
  CHECK(y.grad()(0, 0) == doctest::Approx(10.0));

  auto z = Tensor<float>::scalar(1.5f, true);
  ad::backward(ad::add(z, z));
  CHECK(z.grad()(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("backward requires a scalar root") {
  auto x = make({2}, {1, 2}, true);
  CHECK_THROWS_AS(ad::backward(ad::scale(x, 2.0f)), ContractError);
}

TEST_CASE("tape visits shared nodes once") {
  auto x = make({2}, {1, 2}, true);
  auto h = ad::mul(x, x);
  auto y = ad::sum(ad::add(h, h));  // h fans out twice
  ad::ComputationTape<float> tape(y);
  CHECK(tape.order().size() == 4);  // x, h, add, sum
  ad::backward(y);
  // d/dx sum(2 x^2) = 4x
  CHECK(x.grad()(0, 0) == doctest::Approx(4.0));
  CHECK(x.grad()(0, 1) == doctest::Approx(8.0));
}

TEST_CASE("leaf gradients accumulate across backward calls") {
  auto x = Tensor<float>::scalar(1.0f, true);
  ad::backward(ad::scale(x, 2.0f));
  ad::backward(ad::scale(x, 3.0f));
  CHECK(x.grad()(0, 0) == doctest::Approx(5.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("op gradients match finite differences") {
  Rng rng(2024);
  SUBCASE("linear") {
    auto fn = [](auto& l) { return weighted_sum(ad::linear(l[0], l[1]), 1); };
    CHECK(testing::gradcheck(fn, {random_matrix(rng, 4, 3), random_matrix(rng, 5, 3)},
                             {{4, 3}, {5, 3}}) < 1e-3);
  }
  SUBCASE("softmax") {
    auto fn = [](auto& l) { return weighted_sum(ad::softmax_lastdim(l[0]), 2); };
    CHECK(testing::gradcheck(fn, {random_matrix(rng, 3, 6)}, {{3, 6}}) < 1e-3);
  }
  SUBCASE("silu") {
    auto fn = [](auto& l) { return weighted_sum(ad::silu(l[0]), 3); };
    CHECK(testing::gradcheck(fn, {random_matrix(rng, 3, 4)}, {{3, 4}}) < 1e-3);
  }
  SUBCASE("rms_norm") {
    auto fn = [](auto& l) { return weighted_sum(ad::rms_norm(l[0], l[1]), 4); };
    CHECK(testing::gradcheck(fn, {random_matrix(rng, 3, 8), random_matrix(rng, 1, 8)},
                             {{3, 8}, {8}}) < 1e-3);
  }
  SUBCASE("rope") {
    const std::vector<int> pos{0, 3, 7};
    auto fn = [&](auto& l) { return weighted_sum(ad::rope(l[0], pos, 4), 5); };
    CHECK(testing::gradcheck(fn, {random_matrix(rng, 3, 8)}, {{3, 8}}) < 1e-3);
  }
  SUBCASE("embedding with repeated ids") {
    const std::vector<int> ids{2, 0, 2};
    auto fn = [&](auto& l) { return weighted_sum(ad::embedding(l[0], ids), 6); };
    CHECK(testing::gradcheck(fn, {random_matrix(rng, 4, 3)}, {{4, 3}}) < 1e-3);
  }
  SUBCASE("causal attention over two segments") {
    const std::vector<ad::Segment> segs{{0, 3}, {3, 4}};
    auto fn = [&](auto& l) {
      return weighted_sum(ad::causal_attention(l[0], l[1], l[2], segs, 2), 7);
    };
    CHECK(testing::gradcheck(fn,
                             {random_matrix(rng, 7, 4), random_matrix(rng, 7, 4),
                              random_matrix(rng, 7, 4)},
                             {{7, 4}, {7, 4}, {7, 4}}) < 1e-3);
  }
  SUBCASE("cross entropy") {
    const std::vector<int> targets{1, 0, 3};
    auto fn = [&](auto& l) {
      return ad::cross_entropy_lm(l[0], targets, std::vector<bool>{false, true, false});
    };
    CHECK(testing::gradcheck(fn, {random_matrix(rng, 3, 4)}, {{3, 4}}) < 1e-3);
  }
}

TEST_CASE("causal attention never looks ahead or across segments") {
  Rng rng(9);
  const std::vector<ad::Segment> segs{{0, 4}, {4, 3}};
  ad::AttentionProbs<float> probs;
  auto q = Tensor<float>::leaf({7, 4}, random_matrix(rng, 7, 4).cast<float>());
  auto k = Tensor<float>::leaf({7, 4}, random_matrix(rng, 7, 4).cast<float>());
  auto v = Tensor<float>::leaf({7, 4}, random_matrix(rng, 7, 4).cast<float>());
  auto out = ad::causal_attention(q, k, v, segs, 2, &probs);
  REQUIRE(probs.per_segment.size() == 2);
  for (const auto& heads : probs.per_segment) {
    REQUIRE(heads.size() == 2);
    for (const auto& p : heads) {
      for (ad::Index i = 0; i < p.rows(); ++i) {
        CHECK(std::abs(p.row(i).head(i + 1).cast<double>().sum() - 1.0) < 1e-5);
        if (i + 1 < p.cols()) CHECK(p.row(i).tail(p.cols() - i - 1).cwiseAbs().maxCoeff() == 0.0f);
      }
    }
  }
  // Changing the second segment leaves the first segment's output untouched.
  auto v2 = v.detach();
  v2.mutable_value().row(5).setConstant(42.0f);
  auto out2 = ad::causal_attention(q, k, v2, segs, 2);
  CHECK(out.value().topRows(4) == out2.value().topRows(4));
}

TEST_CASE("rope is isometric and identity at position zero") {
  Rng rng(5);
  Matrix<double> x = random_matrix(rng, 1, 8);
  const std::vector<int> zero{0};
  CHECK((ad::rope_rotate<double>(x, zero, 8, 10000.0, false) - x).norm() < 1e-12);
  for (int p : {1, 17, 250}) {
    const std::vector<int> pos{p};
    CHECK(std::abs(ad::rope_rotate<double>(x, pos, 8, 10000.0, false).norm() - x.norm()) < 1e-6);
  }
  CHECK_THROWS_AS(ad::rope_rotate<double>(random_matrix(rng, 1, 6), zero, 3, 10000.0, false),
                  ConfigError);
}
