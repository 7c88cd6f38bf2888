#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "trouspi/tensor.hpp"

using namespace trouspi;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng, double lo = -1.0,
                               double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Straight six-nested-loop reference for dilated same-padding cross-correlation.
std::vector<double> conv_reference(const std::vector<double>& x,
                                   const std::vector<double>& w,
                                   const std::vector<double>& bias, std::size_t B,
                                   std::size_t C, std::size_t H, std::size_t W,
                                   std::size_t K, std::size_t kh, std::size_t kw,
                                   long r1, long r2) {
  std::vector<double> out(B * K * H * W, 0.0);
  long ch = (static_cast<long>(kh) - 1) / 2, cw = (static_cast<long>(kw) - 1) / 2;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (long m = 0; m < static_cast<long>(H); ++m)
        for (long q = 0; q < static_cast<long>(W); ++q) {
          double acc = bias[k];
          for (std::size_t c = 0; c < C; ++c)
            for (long i = 0; i < static_cast<long>(kh); ++i)
              for (long j = 0; j < static_cast<long>(kw); ++j) {
                long mi = m + (i - ch) * r1;
                long qj = q + (j - cw) * r2;
                if (mi < 0 || mi >= static_cast<long>(H) || qj < 0 ||
                    qj >= static_cast<long>(W))
                  continue;
                acc += x[((n * C + c) * H + mi) * W + qj] *
                       w[((k * C + c) * kh + i) * kw + j];
              }
          out[((n * K + k) * H + m) * W + q] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("tensor construction and access", "[tensor]") {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  REQUIRE(t.shape() == Shape{2, 3});
  REQUIRE(t.size() == 6);
  REQUIRE(t.at({1, 2}) == 6.0);
  REQUIRE(!t.requires_grad());

  Tensor s = Tensor::scalar(3.5);
  REQUIRE(s.item() == 3.5);
  REQUIRE(s.ndim() == 0);

  REQUIRE_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), Error);
  REQUIRE_THROWS_AS(t.item(), Error);

  Tensor p = Tensor::leaf({2}, {1, 2});
  REQUIRE(p.requires_grad());
  REQUIRE(p.is_leaf());
}

TEST_CASE("elementwise arithmetic forward and gradients", "[tensor]") {
  Tensor a = Tensor::leaf({2}, {1, 2});
  Tensor b = Tensor::leaf({2}, {3, 4});

  SECTION("product rule: d(sum(a*b))/da equals b") {
    Tensor loss = sum_all(a * b);
    REQUIRE(loss.item() == Catch::Approx(11.0));
    backward(loss);
    REQUIRE(a.grad() == std::vector<double>{3, 4});
    REQUIRE(b.grad() == std::vector<double>{1, 2});
  }

  SECTION("shape mismatch is an error") {
    Tensor c = Tensor::from({3}, {1, 2, 3});
    REQUIRE_THROWS_AS(a + c, Error);
    REQUIRE_THROWS_AS(a * c, Error);
  }

  SECTION("scalar operand forms") {
    Tensor y = 2.0 * a + 1.0;
    REQUIRE(y.data() == std::vector<double>{3, 5});
    Tensor z = 1.0 - a;
    REQUIRE(z.data() == std::vector<double>{0, -1});
    Tensor q = a / 2.0;
    REQUIRE(q.data() == std::vector<double>{0.5, 1.0});
  }

  SECTION("division gradients") {
    Rng rng(7);
    Tensor x = Tensor::leaf({4}, random_vec(4, rng, 0.5, 2.0));
    Tensor y = Tensor::leaf({4}, random_vec(4, rng, 0.5, 2.0));
    auto rep = gradient_check([&] { return sum_all(x / y); },
                              {{"x", x}, {"y", y}});
    REQUIRE(rep.max_relative_error < 1e-6);
  }
}

TEST_CASE("repeated backward accumulates into leaf gradients", "[tensor]") {
  Tensor a = Tensor::leaf({2}, {1, 2});
  Tensor loss = sum_all(a * a);
  backward(loss);
  REQUIRE(a.grad() == std::vector<double>{2, 4});
  backward(loss);
  REQUIRE(a.grad() == std::vector<double>{4, 8});
  a.zero_grad();
  REQUIRE(!a.has_grad());
}

TEST_CASE("fan-out paths accumulate correctly", "[tensor]") {
  Tensor a = Tensor::leaf({3}, {1, -2, 3});
  Tensor b = a + a;                  // 2a
  Tensor loss = sum_all(b * b);      // 4*sum(a^2), d/da = 8a
  backward(loss);
  REQUIRE(a.grad() == std::vector<double>{8, -16, 24});
}

TEST_CASE("backward requires a scalar", "[tensor]") {
  Tensor a = Tensor::leaf({2}, {1, 2});
  REQUIRE_THROWS_AS(backward(a * 2.0), Error);
}

TEST_CASE("activation functions", "[tensor]") {
  // Values stay away from 0 so finite differences are valid at the relu kink.
  Tensor x = Tensor::leaf({5}, {-2, -0.5, 0.1, 0.5, 2});
  REQUIRE(sigmoid(Tensor::scalar(0.0)).item() == Catch::Approx(0.5));
  REQUIRE(tanh(Tensor::scalar(0.0)).item() == 0.0);
  REQUIRE(leaky_relu(Tensor::scalar(-1.0)).item() == Catch::Approx(-0.2));
  REQUIRE(leaky_relu(Tensor::scalar(3.0)).item() == Catch::Approx(3.0));
  REQUIRE(relu(Tensor::scalar(-1.0)).item() == 0.0);

  auto rep = gradient_check(
      [&] {
        return sum_all(sigmoid(x) + tanh(x) * leaky_relu(x, 0.2) + exp(x * 0.1));
      },
      {{"x", x}});
  REQUIRE(rep.max_relative_error < 1e-6);
}

TEST_CASE("log and clamp", "[tensor]") {
  Tensor x = Tensor::leaf({3}, {0.2, 0.5, 0.9});
  auto rep = gradient_check([&] { return sum_all(log(clamp(x, 1e-7, 1 - 1e-7))); },
                            {{"x", x}});
  REQUIRE(rep.max_relative_error < 1e-6);

  // Clamp blocks gradient outside the interval.
  Tensor y = Tensor::leaf({2}, {-1.0, 2.0});
  backward(sum_all(clamp(y, 0.0, 1.0)));
  REQUIRE(y.grad() == std::vector<double>{0, 0});
}

TEST_CASE("matmul forward and gradients", "[tensor]") {
  Tensor a = Tensor::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::leaf({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 2});
  REQUIRE(c.data() == std::vector<double>{58, 64, 139, 154});

  REQUIRE_THROWS_AS(matmul(a, a), Error);

  Rng rng(11);
  Tensor probe = Tensor::from({2, 2}, random_vec(4, rng));
  auto rep = gradient_check([&] { return sum_all(matmul(a, b) * probe); },
                            {{"a", a}, {"b", b}});
  REQUIRE(rep.max_relative_error < 1e-6);
}

TEST_CASE("dilated convolution matches the hand-computed row example", "[tensor]") {
  // One 1x5 row, all-ones 3x3 kernel, dilation (1,2): only the kernel's centre
  // row can land inside the image, and its taps sit 2 columns apart.
  Tensor x = Tensor::from({1, 1, 5}, {1, 2, 3, 4, 5});
  Tensor w = Tensor::from({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(x, w, b, 1, 2);
  REQUIRE(y.shape() == Shape{1, 1, 5});
  std::vector<double> expect{4, 6, 9, 6, 8};
  for (std::size_t i = 0; i < 5; ++i)
    REQUIRE(y.data()[i] == Catch::Approx(expect[i]));
  REQUIRE(y.data()[2] == Catch::Approx(9.0));
}

TEST_CASE("convolution matches brute-force reference on random input", "[tensor]") {
  Rng rng(23);
  std::size_t B = 2, C = 3, H = 5, W = 7, K = 4;
  for (auto [r1, r2] : std::vector<std::pair<long, long>>{{1, 1}, {2, 3}, {3, 1}}) {
    auto xv = random_vec(B * C * H * W, rng);
    auto wv = random_vec(K * C * 9, rng);
    auto bv = random_vec(K, rng);
    Tensor y = conv2d(Tensor::from({B, C, H, W}, xv), Tensor::from({K, C, 3, 3}, wv),
                      Tensor::from({K}, bv), r1, r2);
    auto ref = conv_reference(xv, wv, bv, B, C, H, W, K, 3, 3, r1, r2);
    REQUIRE(y.shape() == Shape{B, K, H, W});
    for (std::size_t i = 0; i < ref.size(); ++i)
      REQUIRE(y.data()[i] == Catch::Approx(ref[i]).margin(1e-12));
  }
}

TEST_CASE("convolution input validation", "[tensor]") {
  Tensor x = Tensor::zeros({2, 4, 4});
  Tensor w = Tensor::zeros({3, 5, 3, 3});  // expects 5 channels, input has 2
  REQUIRE_THROWS_AS(conv2d(x, w, Tensor::zeros({3}), 1, 1), Error);
  Tensor weven = Tensor::zeros({3, 2, 2, 2});
  REQUIRE_THROWS_AS(conv2d(x, weven, Tensor::zeros({3}), 1, 1), Error);
}

TEST_CASE("convolution gradients", "[tensor]") {
  Rng rng(31);
  Tensor x = Tensor::leaf({2, 2, 4, 5}, random_vec(2 * 2 * 4 * 5, rng));
  Tensor w = Tensor::leaf({3, 2, 3, 3}, random_vec(3 * 2 * 9, rng));
  Tensor b = Tensor::leaf({3}, random_vec(3, rng));
  Tensor probe = Tensor::from({2, 3, 4, 5}, random_vec(2 * 3 * 4 * 5, rng));
  auto rep = gradient_check(
      [&] { return sum_all(conv2d(x, w, b, 1, 2) * probe); },
      {{"x", x}, {"w", w}, {"b", b}});
  REQUIRE(rep.max_relative_error < 1e-5);
}

TEST_CASE("max pooling truncates odd extents and routes gradients", "[tensor]") {
  // 1 channel, 5x5: pooled output is 2x2 over the top-left 4x4 region.
  std::vector<double> v(25);
  for (std::size_t i = 0; i < 25; ++i) v[i] = static_cast<double>(i);
  Tensor x = Tensor::from({1, 5, 5}, v);
  Tensor y = max_pool2d(x);
  REQUIRE(y.shape() == Shape{1, 2, 2});
  REQUIRE(y.data() == std::vector<double>{6, 8, 16, 18});

  REQUIRE_THROWS_AS(max_pool2d(Tensor::zeros({1, 1, 5})), Error);

  SECTION("ties route the gradient to the lowest flat index") {
    Tensor flat = Tensor::leaf({1, 2, 2}, {1, 1, 1, 1});
    backward(sum_all(max_pool2d(flat)));
    REQUIRE(flat.grad() == std::vector<double>{1, 0, 0, 0});
  }

  SECTION("gradient check on distinct values") {
    Rng rng(37);
    Tensor z = Tensor::leaf({2, 3, 6, 9}, random_vec(2 * 3 * 6 * 9, rng));
    Tensor probe = Tensor::from({2, 3, 3, 4}, random_vec(2 * 3 * 3 * 4, rng));
    auto rep = gradient_check([&] { return sum_all(max_pool2d(z) * probe); },
                              {{"z", z}});
    REQUIRE(rep.max_relative_error < 1e-5);
  }
}

TEST_CASE("reductions", "[tensor]") {
  Tensor x = Tensor::from({2, 3}, {1, 5, 2, 4, 3, 6});
  REQUIRE(reduce_sum(x, 0).data() == std::vector<double>{5, 8, 8});
  REQUIRE(reduce_sum(x, 1).data() == std::vector<double>{8, 13});
  REQUIRE(reduce_mean(x, 1).data() == std::vector<double>{8.0 / 3, 13.0 / 3});
  REQUIRE(reduce_max(x, 0).data() == std::vector<double>{4, 5, 6});
  REQUIRE(reduce_max(x, 1).data() == std::vector<double>{5, 6});
  REQUIRE(sum_all(x).item() == 21.0);
  REQUIRE(mean_all(x).item() == Catch::Approx(3.5));

  SECTION("max ties pick the lowest index") {
    Tensor t = Tensor::leaf({3}, {2, 2, 2});
    backward(sum_all(reduce_max(t, 0)));
    REQUIRE(t.grad() == std::vector<double>{1, 0, 0});
  }

  SECTION("gradients") {
    Rng rng(41);
    Tensor z = Tensor::leaf({3, 4, 5}, random_vec(60, rng));
    Tensor probe = Tensor::from({3, 5}, random_vec(15, rng));
    auto rep = gradient_check(
        [&] {
          return sum_all(reduce_max(z, 1) * probe) +
                 sum_all(reduce_mean(z, 2)) * 0.5 + mean_all(z);
        },
        {{"z", z}});
    REQUIRE(rep.max_relative_error < 1e-5);
  }
}

TEST_CASE("softmax normalises and differentiates", "[tensor]") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 1, 1, 1});
  Tensor s = softmax(x, 1);
  REQUIRE(s.data()[0] + s.data()[1] + s.data()[2] == Catch::Approx(1.0));
  REQUIRE(s.data()[3] == Catch::Approx(1.0 / 3));
  // Shift invariance: softmax(x + c) == softmax(x).
  Tensor s2 = softmax(x + 100.0, 1);
  for (std::size_t i = 0; i < 6; ++i)
    REQUIRE(s.data()[i] == Catch::Approx(s2.data()[i]));

  Rng rng(43);
  Tensor z = Tensor::leaf({2, 4}, random_vec(8, rng));
  Tensor probe = Tensor::from({2, 4}, random_vec(8, rng));
  auto rep = gradient_check([&] { return sum_all(softmax(z, 1) * probe); },
                            {{"z", z}});
  REQUIRE(rep.max_relative_error < 1e-6);
}

TEST_CASE("shape manipulation ops", "[tensor]") {
  Rng rng(47);
  Tensor x = Tensor::leaf({2, 3, 4}, random_vec(24, rng));

  SECTION("reshape round-trips and is size-checked") {
    Tensor y = reshape(x, {6, 4});
    REQUIRE(y.shape() == Shape{6, 4});
    REQUIRE(y.data() == x.data());
    REQUIRE_THROWS_AS(reshape(x, {5, 5}), Error);
    auto rep = gradient_check(
        [&] { return sum_all(reshape(x, {4, 6}) * Tensor::full({4, 6}, 0.5)); },
        {{"x", x}});
    REQUIRE(rep.max_relative_error < 1e-6);
  }

  SECTION("concat on each axis") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    REQUIRE(concat({a, b}, 0).data() == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
    REQUIRE(concat({a, b}, 1).data() == std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8});
    REQUIRE_THROWS_AS(concat({a, Tensor::zeros({3, 3})}, 0), Error);

    Tensor u = Tensor::leaf({2, 2}, {1, 2, 3, 4});
    Tensor v = Tensor::leaf({2, 3}, {9, 8, 7, 6, 5, 4});
    Tensor probe = Tensor::from({2, 5}, random_vec(10, rng));
    auto rep = gradient_check([&] { return sum_all(concat({u, v}, 1) * probe); },
                              {{"u", u}, {"v", v}});
    REQUIRE(rep.max_relative_error < 1e-6);
  }

  SECTION("slice extracts blocks and scatters gradients") {
    Tensor m = Tensor::from({3, 4}, {0, 1, 2, 3, 10, 11, 12, 13, 20, 21, 22, 23});
    Tensor s = slice(m, {1, 1}, {2, 2});
    REQUIRE(s.shape() == Shape{2, 2});
    REQUIRE(s.data() == std::vector<double>{11, 12, 21, 22});
    REQUIRE_THROWS_AS(slice(m, {2, 0}, {2, 4}), Error);

    Tensor probe = Tensor::from({2, 2, 2}, random_vec(8, rng));
    auto rep = gradient_check(
        [&] { return sum_all(slice(x, {0, 1, 2}, {2, 2, 2}) * probe); },
        {{"x", x}});
    REQUIRE(rep.max_relative_error < 1e-6);
  }

  SECTION("reverse flips one axis") {
    Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(reverse(m, 0).data() == std::vector<double>{4, 5, 6, 1, 2, 3});
    REQUIRE(reverse(m, 1).data() == std::vector<double>{3, 2, 1, 6, 5, 4});
    // Reversing twice is the identity.
    REQUIRE(reverse(reverse(m, 1), 1).data() == m.data());
    Tensor probe = Tensor::from({2, 3, 4}, random_vec(24, rng));
    auto rep = gradient_check([&] { return sum_all(reverse(x, 1) * probe); },
                              {{"x", x}});
    REQUIRE(rep.max_relative_error < 1e-6);
  }
}

TEST_CASE("broadcast helpers", "[tensor]") {
  Rng rng(53);

  SECTION("add_rowwise") {
    Tensor x = Tensor::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::leaf({3}, {10, 20, 30});
    REQUIRE(add_rowwise(x, b).data() ==
            std::vector<double>{11, 22, 33, 14, 25, 36});
    Tensor probe = Tensor::from({2, 3}, random_vec(6, rng));
    auto rep = gradient_check([&] { return sum_all(add_rowwise(x, b) * probe); },
                              {{"x", x}, {"b", b}});
    REQUIRE(rep.max_relative_error < 1e-6);
  }

  SECTION("add_time_broadcast") {
    Tensor x = Tensor::leaf({2, 2, 2}, random_vec(8, rng));
    Tensor y = Tensor::leaf({2, 2}, random_vec(4, rng));
    Tensor out = add_time_broadcast(x, y);
    REQUIRE(out.at({1, 0, 1}) ==
            Catch::Approx(x.at({1, 0, 1}) + y.at({1, 1})));
    Tensor probe = Tensor::from({2, 2, 2}, random_vec(8, rng));
    auto rep = gradient_check(
        [&] { return sum_all(add_time_broadcast(x, y) * probe); },
        {{"x", x}, {"y", y}});
    REQUIRE(rep.max_relative_error < 1e-6);
  }

  SECTION("scale_rows and weighted_sum_rows") {
    Tensor x = Tensor::leaf({3, 2}, random_vec(6, rng));
    Tensor c = Tensor::leaf({3}, random_vec(3, rng));
    Tensor sr = scale_rows(x, c);
    REQUIRE(sr.at({1, 1}) == Catch::Approx(x.at({1, 1}) * c.at({1})));

    Tensor X = Tensor::leaf({2, 3, 2}, random_vec(12, rng));
    Tensor w = Tensor::leaf({2, 3}, random_vec(6, rng));
    Tensor ws = weighted_sum_rows(X, w);
    REQUIRE(ws.shape() == Shape{2, 2});
    double expect = 0.0;
    for (std::size_t t = 0; t < 3; ++t) expect += w.at({1, t}) * X.at({1, t, 0});
    REQUIRE(ws.at({1, 0}) == Catch::Approx(expect));

    Tensor probe = Tensor::from({2, 2}, random_vec(4, rng));
    auto rep = gradient_check(
        [&] {
          return sum_all(weighted_sum_rows(X, w) * probe) + sum_all(scale_rows(x, c));
        },
        {{"X", X}, {"w", w}, {"x", x}, {"c", c}});
    REQUIRE(rep.max_relative_error < 1e-6);
  }

  SECTION("channel and spatial broadcasts") {
    Tensor x = Tensor::leaf({2, 3, 2, 2}, random_vec(24, rng));
    Tensor s_shared = Tensor::leaf({3}, random_vec(3, rng));
    Tensor s_batch = Tensor::leaf({2, 3}, random_vec(6, rng));
    Tensor gate = Tensor::leaf({2, 2, 2}, random_vec(8, rng));

    Tensor y = scale_channels(x, s_shared);
    REQUIRE(y.at({1, 2, 0, 1}) ==
            Catch::Approx(x.at({1, 2, 0, 1}) * s_shared.at({2})));
    Tensor z = scale_channels(x, s_batch);
    REQUIRE(z.at({1, 2, 0, 1}) ==
            Catch::Approx(x.at({1, 2, 0, 1}) * s_batch.at({1, 2})));
    Tensor a = add_channels(x, s_shared);
    REQUIRE(a.at({0, 1, 1, 0}) ==
            Catch::Approx(x.at({0, 1, 1, 0}) + s_shared.at({1})));
    Tensor sp = scale_spatial(x, gate);
    REQUIRE(sp.at({1, 1, 1, 1}) ==
            Catch::Approx(x.at({1, 1, 1, 1}) * gate.at({1, 1, 1})));

    Tensor probe = Tensor::from({2, 3, 2, 2}, random_vec(24, rng));
    auto rep = gradient_check(
        [&] {
          return sum_all(scale_channels(x, s_shared) * probe) +
                 sum_all(scale_channels(x, s_batch)) * 0.3 +
                 sum_all(add_channels(x, s_shared)) * 0.1 +
                 sum_all(scale_spatial(x, gate) * probe) * 0.7;
        },
        {{"x", x}, {"s_shared", s_shared}, {"s_batch", s_batch}, {"gate", gate}});
    REQUIRE(rep.max_relative_error < 1e-5);
  }
}

TEST_CASE("batch norm training mode normalises per channel", "[tensor]") {
  Rng rng(59);
  std::size_t B = 4, C = 3, H = 2, W = 2;
  Tensor x = Tensor::leaf({B, C, H, W}, random_vec(B * C * H * W, rng, -3, 3));
  Tensor gamma = Tensor::leaf({C}, {1, 1, 1});
  Tensor beta = Tensor::leaf({C}, {0, 0, 0});
  auto res = batch_norm_train(x, gamma, beta, 1e-5);

  // Output statistics per channel: mean ~0, variance ~1.
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0, var = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H * W; ++i) {
        double v = res.y.data()[(b * C + c) * H * W + i];
        mean += v;
        ++n;
      }
    mean /= n;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H * W; ++i) {
        double v = res.y.data()[(b * C + c) * H * W + i] - mean;
        var += v * v;
      }
    var /= n;
    REQUIRE(mean == Catch::Approx(0.0).margin(1e-9));
    REQUIRE(var == Catch::Approx(1.0).margin(1e-3));
  }
  REQUIRE(res.batch_mean.size() == C);
  REQUIRE(res.batch_var.size() == C);

  SECTION("gradient check through the fused op") {
    Tensor probe = Tensor::from({B, C, H, W}, random_vec(B * C * H * W, rng));
    Tensor g2 = Tensor::leaf({C}, random_vec(C, rng, 0.5, 1.5));
    Tensor b2 = Tensor::leaf({C}, random_vec(C, rng));
    auto rep = gradient_check(
        [&] { return sum_all(batch_norm_train(x, g2, b2, 1e-5).y * probe); },
        {{"x", x}, {"gamma", g2}, {"beta", b2}});
    REQUIRE(rep.max_relative_error < 1e-4);
  }
}

TEST_CASE("batch norm eval mode applies running statistics", "[tensor]") {
  Tensor x = Tensor::leaf({1, 2, 1, 2}, {1, 2, 3, 4});
  Tensor gamma = Tensor::leaf({2}, {2, 1});
  Tensor beta = Tensor::leaf({2}, {0.5, -0.5});
  std::vector<double> rm{1.0, 2.0}, rv{4.0, 1.0};
  Tensor y = batch_norm_eval(x, gamma, beta, rm, rv, 0.0);
  // channel 0: 2*(x-1)/2 + 0.5 ; channel 1: (x-2)/1 - 0.5
  REQUIRE(y.data()[0] == Catch::Approx(0.5));
  REQUIRE(y.data()[1] == Catch::Approx(1.5));
  REQUIRE(y.data()[2] == Catch::Approx(0.5));
  REQUIRE(y.data()[3] == Catch::Approx(1.5));

  Rng rng(61);
  Tensor probe = Tensor::from({1, 2, 1, 2}, random_vec(4, rng));
  auto rep = gradient_check(
      [&] { return sum_all(batch_norm_eval(x, gamma, beta, rm, rv, 1e-5) * probe); },
      {{"x", x}, {"gamma", gamma}, {"beta", beta}});
  REQUIRE(rep.max_relative_error < 1e-6);
}

TEST_CASE("dropout zeroes and rescales with a frozen mask", "[tensor]") {
  Rng rng(67);
  std::size_t n = 20000;
  Tensor x = Tensor::leaf({n}, std::vector<double>(n, 1.0));
  Tensor y = dropout(x, 0.5, rng);
  std::size_t zeros = 0;
  for (double v : y.data()) {
    if (v == 0.0)
      ++zeros;
    else
      REQUIRE(v == Catch::Approx(2.0));
  }
  double frac = static_cast<double>(zeros) / n;
  REQUIRE(frac > 0.47);
  REQUIRE(frac < 0.53);

  // Backward uses the same mask that produced the forward values.
  backward(sum_all(y));
  for (std::size_t i = 0; i < n; ++i)
    REQUIRE(x.grad()[i] == Catch::Approx(y.data()[i]));

  SECTION("rate zero is the identity") {
    Tensor z = dropout(x, 0.0, rng);
    REQUIRE(z.data() == x.data());
  }
  SECTION("rate must be below one") {
    REQUIRE_THROWS_AS(dropout(x, 1.0, rng), Error);
  }
}

TEST_CASE("gradient_check reports per-parameter errors", "[tensor]") {
  Tensor a = Tensor::leaf({2}, {0.3, -0.4});
  Tensor unused = Tensor::leaf({2}, {1.0, 1.0});
  auto rep = gradient_check([&] { return sum_all(sigmoid(a)); },
                            {{"a", a}, {"unused", unused}});
  REQUIRE(rep.per_parameter.size() == 2);
  REQUIRE(rep.per_parameter[0].name == "a");
  REQUIRE(rep.max_relative_error < 1e-6);
  // The unused parameter's analytic and numeric gradients are both zero.
  REQUIRE(rep.per_parameter[1].max_rel_err == 0.0);
}
