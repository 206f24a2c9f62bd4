#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fundus/rng.hpp"
#include "fundus/tensor.hpp"
#include "gradcheck.hpp"

using namespace fundus;
using namespace fundus::ad;

namespace {

std::vector<double> randvec(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  Rng rng(seed);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Direct-summation zero-padded convolution oracle.
std::vector<double> conv_oracle(const std::vector<double>& x, int ic, int h, int w,
                                const std::vector<double>& wt, int oc, int kh, int kw, int stride,
                                int pad, const std::vector<double>& bias) {
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(oc) * oh * ow, 0.0);
  for (int o = 0; o < oc; ++o)
    for (int oi = 0; oi < oh; ++oi)
      for (int oj = 0; oj < ow; ++oj) {
        double acc = bias.empty() ? 0.0 : bias[o];
        for (int c = 0; c < ic; ++c)
          for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
              const int si = oi * stride - pad + ki;
              const int sj = oj * stride - pad + kj;
              if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
              acc += wt[((o * ic + c) * kh + ki) * kw + kj] * x[(c * h + si) * w + sj];
            }
        out[(o * oh + oi) * ow + oj] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d forward matches the oracle across stride and padding") {
  const auto x = randvec(2 * 5 * 6, 1);
  const auto wt = randvec(3 * 2 * 3 * 3, 2);
  const auto bias = randvec(3, 3);
  for (auto [stride, pad] : {std::pair{1, 1}, {2, 1}, {1, 0}}) {
    Tape<double> tape(false);
    auto xt = tape.leaf({1, 2, 5, 6}, x);
    auto w = tape.leaf({3, 2, 3, 3}, wt);
    auto b = tape.leaf({1, 3, 1, 1}, bias);
    auto y = conv2d(xt, w, b, stride, pad);
    const auto want = conv_oracle(x, 2, 5, 6, wt, 3, 3, 3, stride, pad, bias);
    REQUIRE(y.v().size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(y.v()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d 1x1 without bias is a channel mix") {
  const auto x = randvec(2 * 4 * 4, 4);
  const auto wt = randvec(3 * 2, 5);
  Tape<double> tape(false);
  auto xt = tape.leaf({1, 2, 4, 4}, x);
  auto w = tape.leaf({3, 2, 1, 1}, wt);
  auto y = conv2d(xt, w, Tensor<double>(), 1, 0);
  const auto want = conv_oracle(x, 2, 4, 4, wt, 3, 1, 1, 1, 0, {});
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(y.v()[i] == doctest::Approx(want[i]));
}

TEST_CASE("conv2d gradients match finite differences") {
  const auto x0 = randvec(2 * 6 * 6, 6);
  const auto w0 = randvec(3 * 2 * 3 * 3, 7);
  const auto b0 = randvec(3, 8);

  auto loss_from_x = [&](Tape<double>& t, Tensor<double> in) {
    auto w = t.leaf({3, 2, 3, 3}, w0);
    auto b = t.leaf({1, 3, 1, 1}, b0);
    return mean_all(square(conv2d(in, w, b, 2, 1)));
  };
  auto rx = gradcheck::run(x0, {1, 2, 6, 6}, loss_from_x);
  CHECK(rx.max_rel < 1e-6);

  auto loss_from_w = [&](Tape<double>& t, Tensor<double> w) {
    auto in = t.leaf({1, 2, 6, 6}, x0);
    auto b = t.leaf({1, 3, 1, 1}, b0);
    return mean_all(square(conv2d(in, w, b, 1, 1)));
  };
  auto rw = gradcheck::run(w0, {3, 2, 3, 3}, loss_from_w);
  CHECK(rw.max_rel < 1e-6);

  auto loss_from_b = [&](Tape<double>& t, Tensor<double> b) {
    auto in = t.leaf({1, 2, 6, 6}, x0);
    auto w = t.leaf({3, 2, 3, 3}, w0);
    return mean_all(square(conv2d(in, w, b, 1, 1)));
  };
  auto rb = gradcheck::run(b0, {1, 3, 1, 1}, loss_from_b);
  CHECK(rb.max_rel < 1e-6);
}

TEST_CASE("conv2d rejects mismatched shapes") {
  Tape<double> tape(false);
  auto x = tape.leaf({1, 2, 4, 4}, randvec(32, 9));
  auto w = tape.leaf({3, 5, 3, 3}, randvec(135, 10));
  CHECK_THROWS_AS(conv2d(x, w, Tensor<double>(), 1, 1), ContractError);
}

TEST_CASE("laplacian impulse and constant responses") {
  std::vector<double> flat(25, 0.7);
  Tape<double> tape(false);
  auto c = tape.leaf({1, 1, 5, 5}, flat);
  for (double v : laplacian(c).v()) CHECK(v == doctest::Approx(0.0));

  std::vector<double> imp(25, 0.0);
  imp[2 * 5 + 2] = 1.0;
  auto i = tape.leaf({1, 1, 5, 5}, imp);
  const auto resp = laplacian(i).v();
  CHECK(resp[2 * 5 + 2] == -4.0);
  CHECK(resp[1 * 5 + 2] == 1.0);
  CHECK(resp[3 * 5 + 2] == 1.0);
  CHECK(resp[2 * 5 + 1] == 1.0);
  CHECK(resp[2 * 5 + 3] == 1.0);
  CHECK(resp[0] == 0.0);
}

TEST_CASE("laplacian matches a brute-force reflect oracle") {
  const auto x = randvec(2 * 5 * 5, 11);
  Tape<double> tape(false);
  auto xt = tape.leaf({1, 2, 5, 5}, x);
  const auto got = laplacian(xt).v();
  auto fold = [](int i, int n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - 1 - i : i); };
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        const double want = x[(c * 5 + fold(i - 1, 5)) * 5 + j] +
                            x[(c * 5 + fold(i + 1, 5)) * 5 + j] +
                            x[(c * 5 + i) * 5 + fold(j - 1, 5)] +
                            x[(c * 5 + i) * 5 + fold(j + 1, 5)] - 4.0 * x[(c * 5 + i) * 5 + j];
        CHECK(got[(c * 5 + i) * 5 + j] == doctest::Approx(want).epsilon(1e-12));
      }

  auto r = gradcheck::run(x, {1, 2, 5, 5}, [](Tape<double>& t, Tensor<double> in) {
    return mean_all(square(laplacian(in)));
  });
  CHECK(r.max_rel < 1e-6);
}

TEST_CASE("bilinear resize identity, known 1-d values, gradient") {
  const auto x = randvec(3 * 4 * 4, 12);
  Tape<double> tape(false);
  auto xt = tape.leaf({1, 3, 4, 4}, x);
  auto same = bilinear_resize(xt, 4, 4);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(same.v()[i] == x[i]);

  std::vector<double> row{0.0, 1.0};
  auto rt = tape.leaf({1, 1, 1, 2}, row);
  const auto up = bilinear_resize(rt, 1, 4).v();
  CHECK(up[0] == doctest::Approx(0.0));
  CHECK(up[1] == doctest::Approx(0.25));
  CHECK(up[2] == doctest::Approx(0.75));
  CHECK(up[3] == doctest::Approx(1.0));

  std::vector<double> four{0.1, 0.5, 0.7, 0.9};
  auto ft = tape.leaf({1, 1, 1, 4}, four);
  const auto down = bilinear_resize(ft, 1, 2).v();
  CHECK(down[0] == doctest::Approx(0.3));
  CHECK(down[1] == doctest::Approx(0.8));

  auto r = gradcheck::run(x, {1, 3, 4, 4}, [](Tape<double>& t, Tensor<double> in) {
    return mean_all(square(bilinear_resize(in, 7, 3)));
  });
  CHECK(r.max_rel < 1e-6);
}

TEST_CASE("elementwise op gradients") {
  auto x = randvec(24, 13);
  for (double& v : x) if (std::abs(v) < 0.05) v = 0.1;  // keep relu/abs kinks away

  auto check = [&](auto make) {
    auto r = gradcheck::run(x, {1, 2, 3, 4}, make);
    CHECK(r.max_rel < 1e-6);
  };
  check([](Tape<double>& t, Tensor<double> in) { return mean_all(relu(in)); });
  check([](Tape<double>& t, Tensor<double> in) { return mean_all(sigmoid(in)); });
  check([](Tape<double>& t, Tensor<double> in) { return mean_all(square(in)); });
  check([](Tape<double>& t, Tensor<double> in) { return mean_all(abs_val(in)); });
  check([](Tape<double>& t, Tensor<double> in) { return mean_all(mul_scalar(add_scalar(in, 0.3), -1.7)); });
  check([&](Tape<double>& t, Tensor<double> in) {
    auto other = t.leaf({1, 2, 3, 4}, randvec(24, 14));
    return mean_all(mul(sub(add(in, other), mul_scalar(other, 0.5)), in));
  });
}

TEST_CASE("relu and sigmoid forward values") {
  Tape<double> tape(false);
  auto x = tape.leaf({1, 1, 1, 3}, std::vector<double>{-1.0, 0.0, 2.0});
  const auto rv = relu(x).v();
  CHECK(rv[0] == 0.0);
  CHECK(rv[1] == 0.0);
  CHECK(rv[2] == 2.0);
  const auto sv = sigmoid(x).v();
  CHECK(sv[0] == doctest::Approx(1.0 / (1.0 + std::exp(1.0))));
  CHECK(sv[1] == 0.5);
  CHECK(sv[2] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
}

TEST_CASE("global average pool and channel scaling") {
  const auto x = randvec(2 * 3 * 3, 15);
  Tape<double> tape(false);
  auto xt = tape.leaf({1, 2, 3, 3}, x);
  const auto pooled = global_avg_pool(xt).v();
  for (int c = 0; c < 2; ++c) {
    double acc = 0.0;
    for (int i = 0; i < 9; ++i) acc += x[c * 9 + i];
    CHECK(pooled[c] == doctest::Approx(acc / 9.0).epsilon(1e-12));
  }

  auto gate = tape.leaf({1, 2, 1, 1}, std::vector<double>{0.5, 2.0});
  const auto scaled = scale_channels(xt, gate).v();
  for (int i = 0; i < 9; ++i) {
    CHECK(scaled[i] == doctest::Approx(0.5 * x[i]));
    CHECK(scaled[9 + i] == doctest::Approx(2.0 * x[9 + i]));
  }

  auto rx = gradcheck::run(x, {1, 2, 3, 3}, [](Tape<double>& t, Tensor<double> in) {
    auto g = t.leaf({1, 2, 1, 1}, std::vector<double>{0.3, -1.2});
    return mean_all(square(scale_channels(in, g)));
  });
  CHECK(rx.max_rel < 1e-6);
  std::vector<double> g0{0.3, -1.2};
  auto rg = gradcheck::run(g0, {1, 2, 1, 1}, [&](Tape<double>& t, Tensor<double> g) {
    auto in = t.leaf({1, 2, 3, 3}, x);
    return mean_all(square(scale_channels(in, g)));
  });
  CHECK(rg.max_rel < 1e-6);
  auto rp = gradcheck::run(x, {1, 2, 3, 3}, [](Tape<double>& t, Tensor<double> in) {
    return mean_all(square(global_avg_pool(in)));
  });
  CHECK(rp.max_rel < 1e-6);
}

TEST_CASE("channel and width concatenation round trips") {
  const auto a = randvec(2 * 3 * 4, 16);
  const auto b = randvec(1 * 3 * 4, 17);
  Tape<double> tape(false);
  auto at = tape.leaf({1, 2, 3, 4}, a);
  auto bt = tape.leaf({1, 1, 3, 4}, b);
  auto cat = concat_ch(at, bt);
  CHECK(cat.shape() == Shape{1, 3, 3, 4});
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(cat.v()[i] == a[i]);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(cat.v()[a.size() + i] == b[i]);

  auto left = crop_w(at, 0, 2);
  auto right = crop_w(at, 2, 2);
  auto glued = concat_w(left, right);
  CHECK(glued.shape() == at.shape());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(glued.v()[i] == a[i]);
  CHECK_THROWS_AS(crop_w(at, 3, 2), ContractError);

  auto r = gradcheck::run(a, {1, 2, 3, 4}, [&](Tape<double>& t, Tensor<double> in) {
    auto other = t.leaf({1, 1, 3, 4}, b);
    auto joined = concat_ch(in, other);
    auto halves = concat_w(crop_w(joined, 2, 2), crop_w(joined, 0, 2));
    return mean_all(square(halves));
  });
  CHECK(r.max_rel < 1e-6);
}

TEST_CASE("mean_all spreads gradient uniformly") {
  const auto x = randvec(12, 18);
  Tape<double> tape(true);
  auto xt = tape.leaf({1, 1, 3, 4}, x);
  auto m = mean_all(xt);
  tape.backward(m);
  for (double g : xt.g()) CHECK(g == doctest::Approx(1.0 / 12.0).epsilon(1e-12));
}

TEST_CASE("charbonnier floor is exact, value and gradient correct") {
  std::vector<double> p(12, 0.42), q(12, 0.42);
  Tape<double> tape(false);
  auto pt = tape.leaf({1, 1, 3, 4}, p);
  auto qt = tape.leaf({1, 1, 3, 4}, q);
  CHECK(charbonnier_mean(pt, qt, 0.001).v()[0] == 0.001);

  auto one = tape.leaf({1, 1, 1, 1}, std::vector<double>{0.5});
  auto two = tape.leaf({1, 1, 1, 1}, std::vector<double>{0.497});
  CHECK(charbonnier_mean(one, two, 0.001).v()[0] ==
        doctest::Approx(std::sqrt(9e-6 + 1e-6)).epsilon(1e-9));
  CHECK(charbonnier_mean(one, two, 0.001).v()[0] == charbonnier_mean(two, one, 0.001).v()[0]);

  const auto a = randvec(24, 19, 0.0, 1.0);
  const auto b = randvec(24, 20, 0.0, 1.0);
  auto rp = gradcheck::run(a, {1, 2, 3, 4}, [&](Tape<double>& t, Tensor<double> in) {
    auto target = t.leaf({1, 2, 3, 4}, b);
    return charbonnier_mean(in, target, 0.001);
  });
  CHECK(rp.max_rel < 1e-6);
  auto rt = gradcheck::run(b, {1, 2, 3, 4}, [&](Tape<double>& t, Tensor<double> in) {
    auto pred = t.leaf({1, 2, 3, 4}, a);
    return charbonnier_mean(pred, in, 0.001);
  });
  CHECK(rt.max_rel < 1e-6);
}

TEST_CASE("tape guards") {
  Tape<double> t1(true), t2(true);
  auto a = t1.leaf({1, 1, 1, 2}, std::vector<double>{1.0, 2.0});
  auto b = t2.leaf({1, 1, 1, 2}, std::vector<double>{3.0, 4.0});
  CHECK_THROWS_AS(add(a, b), ContractError);
  CHECK_THROWS_AS(t1.backward(a), ContractError);  // non-scalar

  Tape<double> frozen(false);
  auto c = frozen.leaf({1, 1, 1, 1}, std::vector<double>{1.0});
  CHECK_THROWS_AS(frozen.backward(c), ContractError);

  // grads accumulate across two backward-reachable paths
  Tape<double> t3(true);
  auto x = t3.leaf({1, 1, 1, 1}, std::vector<double>{3.0});
  auto y = add(mul(x, x), x);  // x^2 + x, d/dx = 2x + 1 = 7
  t3.backward(y);
  CHECK(x.g()[0] == doctest::Approx(7.0));
}
