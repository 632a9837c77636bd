#include <doctest.h>

#include "verinet/tensor.hpp"

using namespace verinet;

namespace {

// Independent triple-loop reference for matmul.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at2(i, p) * b.at2(p, j);
      out.at2(i, j) = s;
    }
  return out;
}

// Independent six-nested-loop reference for conv2d.
Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                    std::size_t stride, std::size_t padding) {
  std::size_t nb = x.extent(0), ci = x.extent(1), hi = x.extent(2),
              wi = x.extent(3);
  std::size_t ko = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  std::size_t ho = (hi + 2 * padding - kh) / stride + 1;
  std::size_t wo = (wi + 2 * padding - kw) / stride + 1;
  Tensor out({nb, ko, ho, wo});
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t k = 0; k < ko; ++k)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double s = b[k];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t fy = 0; fy < kh; ++fy)
              for (std::size_t fx = 0; fx < kw; ++fx) {
                long iy = long(oy * stride + fy) - long(padding);
                long ix = long(ox * stride + fx) - long(padding);
                if (iy < 0 || iy >= long(hi) || ix < 0 || ix >= long(wi))
                  continue;
                s += x.at4(n, c, std::size_t(iy), std::size_t(ix)) *
                     w.at4(k, c, fy, fx);
              }
          out.at4(n, k, oy, ox) = s;
        }
  return out;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-2.0, 2.0);
  return t;
}

}  // namespace

TEST_CASE("matmul identity and small cases") {
  Tensor i2 = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor v = Tensor::matrix(2, 1, {3, 4});
  Tensor r = matmul(i2, v);
  CHECK(r.at2(0, 0) == 3.0);
  CHECK(r.at2(1, 0) == 4.0);

  Tensor a = Tensor::matrix(1, 2, {1, -1});
  Tensor b = Tensor::matrix(2, 1, {2, 5});
  CHECK(matmul(a, b)[0] == -3.0);
}

TEST_CASE("matmul shape errors") {
  Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul matches naive triple-loop oracle on random shapes") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t m = 1 + rng.uniform_index(6);
    std::size_t k = 1 + rng.uniform_index(6);
    std::size_t n = 1 + rng.uniform_index(6);
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor got = matmul(a, b);
    Tensor want = naive_matmul(a, b);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));
  }
}

TEST_CASE("matmul_nt and matmul_tn agree with explicit transposes") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t m = 1 + rng.uniform_index(5);
    std::size_t k = 1 + rng.uniform_index(5);
    std::size_t n = 1 + rng.uniform_index(5);
    Tensor a = random_tensor({m, k}, rng);
    Tensor bt = random_tensor({n, k}, rng);
    Tensor b({k, n});
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < n; ++j) b.at2(i, j) = bt.at2(j, i);
    Tensor want = naive_matmul(a, b);
    Tensor got = matmul_nt(a, bt);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));

    Tensor at({k, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) at.at2(j, i) = a.at2(i, j);
    Tensor got2 = matmul_tn(at, b);
    for (std::size_t i = 0; i < got2.size(); ++i)
      CHECK(got2[i] == doctest::Approx(want[i]).epsilon(1e-14));
  }
}

TEST_CASE("conv2d scalar kernel doubles the input") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor w = Tensor::full({1, 1, 1, 1}, 2.0);
  Tensor b({1});
  Tensor out = conv2d(x, w, b, 1, 0);
  CHECK(out.shape() == std::vector<std::size_t>{1, 1, 3, 3});
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 2.0);
}

TEST_CASE("conv2d output shape arithmetic") {
  Tensor x({1, 1, 4, 4});
  Tensor w({1, 1, 2, 2});
  Tensor b({1});
  CHECK(conv2d(x, w, b, 2, 0).shape() ==
        std::vector<std::size_t>{1, 1, 2, 2});
  CHECK_THROWS_AS(conv2d(Tensor({1, 2, 4, 4}), w, b, 1, 0), ShapeError);
}

TEST_CASE("conv2d matches nested-loop oracle") {
  Rng rng(13);
  Tensor x = random_tensor({1, 2, 6, 6}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u}) {
      Tensor got = conv2d(x, w, b, stride, pad);
      Tensor want = naive_conv2d(x, w, b, stride, pad);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));
    }
}

TEST_CASE("conv2d randomized against oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t c = 1 + rng.uniform_index(3);
    std::size_t h = 3 + rng.uniform_index(4);
    std::size_t k = 1 + rng.uniform_index(3);
    std::size_t f = 1 + rng.uniform_index(3);
    std::size_t stride = 1 + rng.uniform_index(2);
    std::size_t pad = rng.uniform_index(2);
    if (h + 2 * pad < f) continue;
    Tensor x = random_tensor({1, c, h, h}, rng);
    Tensor w = random_tensor({k, c, f, f}, rng);
    Tensor b = random_tensor({k}, rng);
    Tensor got = conv2d(x, w, b, stride, pad);
    Tensor want = naive_conv2d(x, w, b, stride, pad);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-13));
  }
}

TEST_CASE("elementwise basics") {
  Tensor a = Tensor::vector({-1, 0, 2});
  Tensor r = abs(a);
  CHECK(r[0] == 1.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);

  Tensor rl = relu(Tensor::vector({-3, 0.5}));
  CHECK(rl[0] == 0.0);
  CHECK(rl[1] == 0.5);

  Tensor mx = maximum(Tensor::vector({1, 5}), Tensor::vector({4, 2}));
  CHECK(mx[0] == 4.0);
  CHECK(mx[1] == 5.0);
}

TEST_CASE("scalar broadcast and error paths") {
  Tensor a = Tensor::vector({1, 2, 3});
  Tensor s = Tensor::scalar(10.0);
  Tensor r = add(a, s);
  CHECK(r[2] == 13.0);
  CHECK_THROWS_AS(add(a, Tensor::vector({1, 2})), ShapeError);
  CHECK_THROWS_AS(log(Tensor::vector({1.0, 0.0})), NumericError);
  CHECK_THROWS_AS(log(Tensor::vector({-1.0})), NumericError);
}

TEST_CASE("operations are deterministic across repeated evaluation") {
  Rng rng(23);
  Tensor a = random_tensor({7, 9}, rng);
  Tensor b = random_tensor({9, 5}, rng);
  Tensor r1 = matmul(a, b);
  Tensor r2 = matmul(a, b);
  for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("rng determinism: same seed gives same stream") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  Rng c(42);
  for (int i = 0; i < 10; ++i) c.normal();  // stream advances consistently
  std::string state = c.save_state();
  double next = c.normal();
  Rng d(0);
  d.load_state(state);
  CHECK(d.normal() == next);
}

TEST_CASE("truncated normal respects the cap") {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i)
    CHECK(std::fabs(rng.truncated_normal(0.5, 2.0)) <= 1.0);
}
