#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "crcnn/ops.hpp"
#include "crcnn/rng.hpp"
#include "oracles.hpp"

using namespace crcnn;

namespace {

Tensor4 random_tensor(Dims4 d, Rng& rng, double lo = -1, double hi = 1) {
  Tensor4 t(d);
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor4 t(2, 3, 4, 5);
  CHECK(t.size() == 2u * 3 * 4 * 5);
  CHECK(t.dims.str() == "(2,3,4,5)");
  t.at(1, 2, 3, 4) = 7.f;
  CHECK(t.data.back() == 7.f);
  CHECK_THROWS_AS(Tensor4(0, 1, 1, 1), ShapeError);
  CHECK(t.all_finite());
  t.data[3] = NAN;
  CHECK(!t.all_finite());
}

TEST_CASE("conv2d zero-padding arithmetic on all-ones") {
  Tensor4 in(1, 1, 3, 3);
  in.fill(1.f);
  ConvParams p(1, 1);
  p.kernel.fill(1.f);
  Tensor4 out = conv2d_forward(in, p);
  CHECK(out.at(0, 0, 1, 1) == doctest::Approx(9.0));
  CHECK(out.at(0, 0, 0, 0) == doctest::Approx(4.0));
  CHECK(out.at(0, 0, 0, 1) == doctest::Approx(6.0));
}

TEST_CASE("conv2d zero kernel emits bias everywhere") {
  Rng rng(11);
  Tensor4 in = random_tensor({2, 3, 4, 4}, rng);
  ConvParams p(2, 3);
  p.bias.assign(2, 7.f);
  Tensor4 out = conv2d_forward(in, p);
  for (float v : out.data) CHECK(v == 7.f);
}

TEST_CASE("conv2d matches the six-loop oracle") {
  Rng rng(42);
  Tensor4 in = random_tensor({2, 3, 5, 4}, rng);
  ConvParams p(2, 3);
  for (auto& v : p.kernel.data) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : p.bias) v = static_cast<float>(rng.uniform(-1, 1));
  Tensor4 ours = conv2d_forward(in, p);
  Tensor4 ref = oracle::conv3x3_naive(in, p.kernel, p.bias);
  for (std::size_t i = 0; i < ours.size(); ++i)
    CHECK(ours.data[i] ==
          doctest::Approx(ref.data[i]).epsilon(1e-6).scale(std::abs(ref.data[i]) + 1));
}

TEST_CASE("conv2d channel mismatch names both shapes") {
  Tensor4 in(1, 2, 3, 3);
  ConvParams p(1, 3);
  CHECK_THROWS_WITH_AS(conv2d_forward(in, p),
                       doctest::Contains("(1,2,3,3)"), ShapeError);
}

TEST_CASE("conv2d forward is identical across thread counts") {
  Rng rng(1);
  Tensor4 in = random_tensor({5, 4, 6, 6}, rng);
  ConvParams p(3, 4);
  for (auto& v : p.kernel.data) v = static_cast<float>(rng.uniform(-1, 1));
  Tensor4 a = conv2d_forward(in, p, 1);
  Tensor4 b = conv2d_forward(in, p, 3);
  CHECK(a.data == b.data);
}

TEST_CASE("conv2d linearity with zero bias") {
  Rng rng(5);
  Tensor4 x = random_tensor({1, 2, 5, 5}, rng);
  Tensor4 y = random_tensor({1, 2, 5, 5}, rng);
  ConvParams p(2, 2);
  for (auto& v : p.kernel.data) v = static_cast<float>(rng.uniform(-1, 1));
  const float alpha = 0.7f, beta = -1.3f;
  Tensor4 mix(x.dims);
  for (std::size_t i = 0; i < x.size(); ++i) mix.data[i] = alpha * x.data[i] + beta * y.data[i];
  Tensor4 lhs = conv2d_forward(mix, p);
  Tensor4 rx = conv2d_forward(x, p), ry = conv2d_forward(y, p);
  for (std::size_t i = 0; i < lhs.size(); ++i)
    CHECK(lhs.data[i] == doctest::Approx(alpha * rx.data[i] + beta * ry.data[i])
                             .epsilon(1e-6)
                             .scale(std::abs(lhs.data[i]) + 1));
}

TEST_CASE("conv2d backward trivial cases") {
  SUBCASE("zero grad_out gives zero gradients") {
    Rng rng(3);
    Tensor4 in = random_tensor({1, 2, 3, 3}, rng);
    ConvParams p(2, 2);
    for (auto& v : p.kernel.data) v = static_cast<float>(rng.uniform(-1, 1));
    Tensor4 gout(1, 2, 3, 3);
    auto g = conv2d_backward(in, p, gout);
    for (float v : g.input.data) CHECK(v == 0.f);
    for (float v : g.kernel.data) CHECK(v == 0.f);
    for (float v : g.bias) CHECK(v == 0.f);
  }
  SUBCASE("single pixel reaches only the center tap") {
    Tensor4 in(1, 1, 1, 1);
    in.data[0] = 2.5f;
    ConvParams p(1, 1);
    p.kernel.at(0, 0, 1, 1) = 3.f;
    Tensor4 gout(1, 1, 1, 1);
    gout.data[0] = 4.f;
    auto g = conv2d_backward(in, p, gout);
    CHECK(g.bias[0] == 4.f);
    CHECK(g.kernel.at(0, 0, 1, 1) == 2.5f * 4.f);
    CHECK(g.kernel.at(0, 0, 0, 0) == 0.f);  // taps outside the pixel see padding
    CHECK(g.input.data[0] == 3.f * 4.f);
  }
  SUBCASE("grad_out shape mismatch") {
    Tensor4 in(1, 1, 3, 3);
    ConvParams p(2, 1);
    Tensor4 gout(1, 1, 3, 3);
    CHECK_THROWS_AS(conv2d_backward(in, p, gout), ShapeError);
  }
}

TEST_CASE("batchnorm examples") {
  SUBCASE("identity on already-normalized input") {
    Rng rng(9);
    Tensor4 in(2, 1, 4, 4);
    for (auto& v : in.data) v = static_cast<float>(rng.normal());
    // force exact zero mean / unit variance per channel
    double mean = 0;
    for (float v : in.data) mean += v;
    mean /= static_cast<double>(in.size());
    double var = 0;
    for (float& v : in.data) {
      v -= static_cast<float>(mean);
      var += static_cast<double>(v) * v;
    }
    var /= static_cast<double>(in.size());
    for (float& v : in.data) v /= static_cast<float>(std::sqrt(var));
    BatchNormParams p(1);
    Tensor4 out = batchnorm_forward(in, p, Mode::train);
    for (std::size_t i = 0; i < in.size(); ++i)
      CHECK(out.data[i] == doctest::Approx(in.data[i]).epsilon(1e-3));
  }
  SUBCASE("gamma = 0 collapses to beta") {
    Rng rng(10);
    Tensor4 in = random_tensor({2, 2, 3, 3}, rng);
    BatchNormParams p(2);
    p.gamma.assign(2, 0.f);
    p.beta = {0.5f, -1.f};
    Tensor4 out = batchnorm_forward(in, p, Mode::train);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 3; ++y)
          for (int x = 0; x < 3; ++x) CHECK(out.at(n, c, y, x) == p.beta[c]);
  }
  SUBCASE("train-mode statistics match the scalar oracle") {
    Rng rng(12);
    Tensor4 in = random_tensor({3, 4, 5, 5}, rng, -3, 3);
    BatchNormParams p(4);
    for (auto& v : p.gamma) v = static_cast<float>(rng.uniform(0.5, 1.5));
    for (auto& v : p.beta) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    Tensor4 out = batchnorm_forward(in, p, Mode::train);
    auto ref = oracle::batchnorm_naive(in, p.gamma, p.beta, p.epsilon);
    for (std::size_t i = 0; i < out.size(); ++i)
      CHECK(out.data[i] == doctest::Approx(ref.out.data[i]).epsilon(1e-5));
    // normalized output: per-channel mean ~0, variance ~1 before affine
    BatchNormParams plain(4);
    Tensor4 norm = batchnorm_forward(in, plain, Mode::train);
    for (int c = 0; c < 4; ++c) {
      double mean = 0, var = 0;
      const std::size_t count = 3u * 5 * 5;
      for (int n = 0; n < 3; ++n)
        for (int y = 0; y < 5; ++y)
          for (int x = 0; x < 5; ++x) mean += norm.at(n, c, y, x);
      mean /= static_cast<double>(count);
      for (int n = 0; n < 3; ++n)
        for (int y = 0; y < 5; ++y)
          for (int x = 0; x < 5; ++x)
            var += (norm.at(n, c, y, x) - mean) * (norm.at(n, c, y, x) - mean);
      var /= static_cast<double>(count);
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(var - 1.0) < 1e-3);
    }
  }
  SUBCASE("degenerate train batch is rejected") {
    Tensor4 in(1, 2, 1, 1);
    BatchNormParams p(2);
    CHECK_THROWS_AS(batchnorm_forward(in, p, Mode::train), DataError);
    CHECK_NOTHROW(batchnorm_forward(in, p, Mode::infer));
  }
  SUBCASE("infer mode uses running statistics only") {
    Rng rng(13);
    Tensor4 in = random_tensor({2, 1, 2, 2}, rng);
    BatchNormParams p(1);
    p.running_mean = {0.25f};
    p.running_var = {4.f};
    Tensor4 out = batchnorm_forward(in, p, Mode::infer);
    for (std::size_t i = 0; i < in.size(); ++i)
      CHECK(out.data[i] ==
            doctest::Approx((in.data[i] - 0.25f) / std::sqrt(4.f + p.epsilon)).epsilon(1e-5));
  }
  SUBCASE("running statistics move toward batch statistics") {
    Rng rng(14);
    Tensor4 in = random_tensor({2, 1, 4, 4}, rng, 2, 4);  // mean ~3
    BatchNormParams p(1);
    batchnorm_forward(in, p, Mode::train);
    CHECK(p.running_mean[0] > 0.1f);
    CHECK(p.running_var[0] < 1.f);  // batch variance well below the init 1
    CHECK(p.running_var[0] >= 0.f);
  }
}

TEST_CASE("batchnorm backward definition cases") {
  Rng rng(21);
  Tensor4 in = random_tensor({2, 2, 3, 3}, rng);
  BatchNormParams p(2);
  BatchNormCacheT<float> cache;
  batchnorm_forward(in, p, Mode::train, &cache);

  SUBCASE("zero grad_out") {
    Tensor4 gout(in.dims);
    auto g = batchnorm_backward(p, cache, gout);
    for (float v : g.input.data) CHECK(v == 0.f);
    for (float v : g.gamma) CHECK(v == 0.f);
    for (float v : g.beta) CHECK(v == 0.f);
  }
  SUBCASE("gamma gradient is sum of grad_out times normalized input") {
    Tensor4 gout = random_tensor(in.dims, rng);
    auto g = batchnorm_backward(p, cache, gout);
    for (int c = 0; c < 2; ++c) {
      double want = 0;
      for (int n = 0; n < 2; ++n)
        for (int y = 0; y < 3; ++y)
          for (int x = 0; x < 3; ++x)
            want += static_cast<double>(gout.at(n, c, y, x)) * cache.xhat.at(n, c, y, x);
      CHECK(g.gamma[c] == doctest::Approx(want).epsilon(1e-5));
    }
  }
}

TEST_CASE("activations") {
  Tensor4 x(1, 1, 1, 3);
  x.data = {-3.f, 0.f, 3.f};
  Tensor4 r = relu(x);
  CHECK(r.data[0] == 0.f);
  CHECK(r.data[1] == 0.f);
  CHECK(r.data[2] == 3.f);
  Tensor4 s = sigmoid(x);
  CHECK(s.data[1] == doctest::Approx(0.5));
  CHECK(s.data[0] == doctest::Approx(1.0 / (1.0 + std::exp(3.0))));
  CHECK(identity(x).data == x.data);

  Tensor4 gout(1, 1, 1, 3);
  gout.fill(1.f);
  Tensor4 gr = relu_backward(r, gout);
  CHECK(gr.data[0] == 0.f);
  CHECK(gr.data[2] == 1.f);
  Tensor4 gs = sigmoid_backward(s, gout);
  CHECK(gs.data[1] == doctest::Approx(0.25));
  CHECK(identity_backward(x, gout).data == gout.data);
}

TEST_CASE("frobenius loss") {
  SUBCASE("zero at target == pred") {
    Rng rng(31);
    Tensor4 t = random_tensor({3, 1, 2, 2}, rng);
    auto [loss, grad] = frobenius_loss(t, t);
    CHECK(loss == 0.0);
    for (float v : grad.data) CHECK(v == 0.f);
  }
  SUBCASE("single 1x1 patch hand value") {
    Tensor4 b(1, 1, 1, 1), a(1, 1, 1, 1);
    b.data[0] = 1.0f;
    a.data[0] = 0.5f;
    auto [loss, grad] = frobenius_loss(b, a);
    CHECK(loss == doctest::Approx(0.125));
    CHECK(grad.data[0] == doctest::Approx(-0.5));
  }
  SUBCASE("duplicating every patch leaves the loss unchanged") {
    Rng rng(32);
    Tensor4 t = random_tensor({4, 1, 3, 3}, rng), p = random_tensor({4, 1, 3, 3}, rng);
    Tensor4 t2(8, 1, 3, 3), p2(8, 1, 3, 3);
    std::copy(t.data.begin(), t.data.end(), t2.data.begin());
    std::copy(t.data.begin(), t.data.end(), t2.data.begin() + t.size());
    std::copy(p.data.begin(), p.data.end(), p2.data.begin());
    std::copy(p.data.begin(), p.data.end(), p2.data.begin() + p.size());
    CHECK(frobenius_loss(t, p).first == doctest::Approx(frobenius_loss(t2, p2).first));
  }
  SUBCASE("matches the naive oracle and stays non-negative") {
    Rng rng(33);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor4 t = random_tensor({2, 1, 4, 4}, rng), p = random_tensor({2, 1, 4, 4}, rng);
      const double loss = frobenius_loss(t, p).first;
      CHECK(loss >= 0.0);
      CHECK(loss == doctest::Approx(oracle::frobenius_naive(t, p)).epsilon(1e-6));
    }
  }
  SUBCASE("shape mismatch") {
    Tensor4 a(1, 1, 2, 2), b(1, 1, 2, 3);
    CHECK_THROWS_AS(frobenius_loss(a, b), ShapeError);
  }
}

TEST_CASE("bce loss") {
  SUBCASE("ln 2 at g=1, pred=0.5") {
    Tensor4 g(1, 1, 1, 1), p(1, 1, 1, 1);
    g.data[0] = 1.f;
    p.data[0] = 0.5f;
    CHECK(bce_loss(g, p).first == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  }
  SUBCASE("clamp boundary keeps confident correct predictions tiny") {
    Tensor4 g(1, 1, 1, 2), p(1, 1, 1, 2);
    g.data = {1.f, 0.f};
    p.data = {1.f - 1e-7f, 1e-7f};
    const double loss = bce_loss(g, p).first;
    CHECK(loss >= 0.0);
    CHECK(loss < 1e-5);
  }
  SUBCASE("matches the scalar oracle") {
    Rng rng(41);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor4 g(2, 1, 3, 3), p(2, 1, 3, 3);
      for (auto& v : g.data) v = rng.uniform() < 0.5 ? 0.f : 1.f;
      for (auto& v : p.data) v = static_cast<float>(rng.uniform(0.01, 0.99));
      const double loss = bce_loss(g, p).first;
      CHECK(loss >= 0.0);
      CHECK(loss == doctest::Approx(oracle::bce_naive(g, p)).epsilon(1e-6));
    }
  }
  SUBCASE("non-binary mask is rejected") {
    Tensor4 g(1, 1, 1, 1), p(1, 1, 1, 1);
    g.data[0] = 0.5f;
    p.data[0] = 0.5f;
    CHECK_THROWS_WITH_AS(bce_loss(g, p), doctest::Contains("not in {0,1}"), DataError);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    std::vector<float> param{1.f, -2.f, 3.f};
    std::vector<float> grad{0.f, 0.f, 0.f};
    auto state = AdamState::for_sizes({3}, 0.01f);
    adam_step<float>({std::span<float>(param)}, {std::span<const float>(grad)}, state);
    CHECK(param == std::vector<float>{1.f, -2.f, 3.f});
    CHECK(state.step == 1);
  }
  SUBCASE("first step moves by ~lr against the gradient sign") {
    std::vector<float> param{0.f, 0.f};
    std::vector<float> grad{2.f, -0.5f};
    auto state = AdamState::for_sizes({2}, 0.01f);
    adam_step<float>({std::span<float>(param)}, {std::span<const float>(grad)}, state);
    CHECK(param[0] == doctest::Approx(-0.01).epsilon(1e-4));
    CHECK(param[1] == doctest::Approx(0.01).epsilon(1e-4));
  }
  SUBCASE("five steps on a quadratic match the scalar trace") {
    // d/dp of 0.5*(p-3)^2 = p-3
    AdamStateT<double> state = AdamStateT<double>::for_sizes({1}, 0.1);
    std::vector<double> param{0.0};
    oracle::ScalarAdam ref;
    double ref_param = 0.0;
    for (int i = 0; i < 5; ++i) {
      std::vector<double> grad{param[0] - 3.0};
      adam_step<double>({std::span<double>(param)}, {std::span<const double>(grad)}, state);
      ref_param = ref.step(ref_param, ref_param - 3.0, 0.1);
      CHECK(param[0] == doctest::Approx(ref_param).epsilon(1e-12));
    }
  }
  SUBCASE("moment shapes must mirror parameters") {
    std::vector<float> param{1.f, 2.f};
    std::vector<float> grad{1.f};
    auto state = AdamState::for_sizes({2}, 0.01f);
    CHECK_THROWS_AS(
        (adam_step<float>({std::span<float>(param)}, {std::span<const float>(grad)}, state)),
        ShapeError);
  }
}

TEST_CASE("conv2d backward stays within 1e-6 of the single-threaded reference") {
  Rng rng(77);
  Tensor4 in = random_tensor({7, 4, 6, 6}, rng);
  ConvParams p(4, 4);
  for (auto& v : p.kernel.data) v = static_cast<float>(rng.uniform(-1, 1));
  Tensor4 gout = random_tensor({7, 4, 6, 6}, rng);
  auto ref = conv2d_backward(in, p, gout, 1);
  for (int threads : {2, 3}) {
    auto got = conv2d_backward(in, p, gout, threads);
    CHECK(got.input.data == ref.input.data);  // disjoint per-sample planes
    for (std::size_t i = 0; i < ref.kernel.size(); ++i)
      CHECK(got.kernel.data[i] == doctest::Approx(ref.kernel.data[i])
                                      .epsilon(1e-6)
                                      .scale(std::abs(ref.kernel.data[i]) + 1));
    for (std::size_t i = 0; i < ref.bias.size(); ++i)
      CHECK(got.bias[i] ==
            doctest::Approx(ref.bias[i]).epsilon(1e-6).scale(std::abs(ref.bias[i]) + 1));
  }
}

TEST_CASE("ops are bit-deterministic across repeated runs") {
  Rng rng(55);
  Tensor4 in = random_tensor({2, 3, 6, 6}, rng);
  ConvParams p(3, 3);
  for (auto& v : p.kernel.data) v = static_cast<float>(rng.uniform(-1, 1));
  CHECK(conv2d_forward(in, p).data == conv2d_forward(in, p).data);
  Tensor4 gout = random_tensor({2, 3, 6, 6}, rng);
  auto g1 = conv2d_backward(in, p, gout);
  auto g2 = conv2d_backward(in, p, gout);
  CHECK(g1.kernel.data == g2.kernel.data);
  CHECK(g1.input.data == g2.input.data);
}
