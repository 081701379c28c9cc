#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>

#include "crcnn/image.hpp"
#include "crcnn/pipeline.hpp"
#include "crcnn/rng.hpp"
#include "oracles.hpp"

using namespace crcnn;

namespace {

Frame random_frame(int w, int h, Rng& rng) {
  Frame f(w, h);
  for (auto& v : f.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  return f;
}

}  // namespace

TEST_CASE("grayscale conversion") {
  RgbImage rgb;
  rgb.width = 3;
  rgb.height = 1;
  rgb.pixels = {255, 255, 255, /**/ 255, 0, 0, /**/ 97, 97, 97};
  Frame g = to_grayscale(rgb);
  CHECK(g.pixels[0] == 255);
  CHECK(g.pixels[1] == 76);  // round(0.299 * 255)
  CHECK(g.pixels[2] == 97);  // r=g=b passes through
  RgbImage bad;
  bad.width = 2;
  bad.height = 1;
  bad.pixels = {1, 2, 3};
  CHECK_THROWS_AS(to_grayscale(bad), DataError);
}

TEST_CASE("median background") {
  SUBCASE("identical frames reproduce the frame") {
    Rng rng(1);
    Frame f = random_frame(5, 4, rng);
    Tensor4 bg = compute_background({f, f, f});
    for (std::size_t i = 0; i < f.pixels.size(); ++i)
      CHECK(bg.data[i] == doctest::Approx(f.pixels[i] / 255.0));
  }
  SUBCASE("odd count takes the middle order statistic") {
    Frame a(1, 1), b(1, 1), c(1, 1);
    a.pixels[0] = 10;
    b.pixels[0] = 20;
    c.pixels[0] = 200;
    Tensor4 bg = compute_background({c, a, b});  // order must not matter
    CHECK(bg.data[0] == doctest::Approx(20.0 / 255.0));
  }
  SUBCASE("even count averages the two central order statistics") {
    Frame a(1, 1), b(1, 1);
    a.pixels[0] = 10;
    b.pixels[0] = 30;
    Tensor4 bg = compute_background({a, b});
    CHECK(bg.data[0] == doctest::Approx(20.0 / 255.0));
  }
  SUBCASE("matches the full-sort oracle on random stacks") {
    Rng rng(2);
    for (int rep = 0; rep < 30; ++rep) {
      const int count = 1 + rng.below_int(7);
      const int w = 1 + rng.below_int(8), h = 1 + rng.below_int(8);
      std::vector<Frame> frames;
      for (int k = 0; k < count; ++k) frames.push_back(random_frame(w, h, rng));
      Tensor4 bg = compute_background(frames);
      auto ref = oracle::median_fullsort(frames);
      for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(bg.data[i] == doctest::Approx(ref[i] / 255.0).epsilon(1e-6));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(compute_background({}), DataError);
    Frame a(2, 2), b(3, 2);
    CHECK_THROWS_AS(compute_background({a, b}), DataError);
  }
}

TEST_CASE("normalization") {
  SUBCASE("mu = 0 is plain scaling") {
    Frame f(2, 1);
    f.pixels = {0, 255};
    NormalizedFrame n = normalize(f, 0.0);
    CHECK(n.tensor.data[0] == 0.f);
    CHECK(n.tensor.data[1] == 1.f);
  }
  SUBCASE("constant frame centered by its own mean is ~0") {
    Frame f(4, 4, 128);
    const double mu = dataset_mean({f});
    NormalizedFrame n = normalize(f, mu);
    for (float v : n.tensor.data) CHECK(std::abs(v) <= 1.0 / 510.0);
  }
  SUBCASE("dataset mean of constant 0 and constant 255 frames is 0.5") {
    Frame z(3, 3, 0), o(3, 3, 255);
    CHECK(dataset_mean({z, o}) == doctest::Approx(0.5));
  }
  SUBCASE("normalization inverts back to the source bytes") {
    Rng rng(3);
    Frame f = random_frame(6, 5, rng);
    const double mu = 0.37;
    NormalizedFrame n = normalize(f, mu);
    for (std::size_t i = 0; i < f.pixels.size(); ++i) {
      const long back = std::lround((n.tensor.data[i] + mu) * 255.0);
      CHECK(back == f.pixels[i]);
    }
  }
}

TEST_CASE("patch planning") {
  SUBCASE("4x4 image, p=2, overlap=0.5 gives the 3x3 grid") {
    PatchLayout layout = plan_patches(4, 4, 2, 0.5);
    CHECK(layout.stride == 1);
    REQUIRE(layout.origins.size() == 9);
    std::vector<std::pair<int, int>> want;
    for (int y : {0, 1, 2})
      for (int x : {0, 1, 2}) want.emplace_back(y, x);
    CHECK(layout.origins == want);
  }
  SUBCASE("p = h = w gives exactly one patch at the origin") {
    PatchLayout layout = plan_patches(7, 7, 7, 0.6);
    REQUIRE(layout.origins.size() == 1);
    CHECK(layout.origins[0] == std::pair<int, int>{0, 0});
  }
  SUBCASE("invalid requests") {
    CHECK_THROWS_AS(plan_patches(4, 4, 5, 0.5), DataError);   // exceeds dims
    CHECK_THROWS_AS(plan_patches(99, 99, 51, 0.5), DataError);  // exceeds the 50 cap
    CHECK_THROWS_AS(plan_patches(8, 8, 4, 0.4), DataError);   // overlap bounds
    CHECK_THROWS_AS(plan_patches(8, 8, 4, 0.8), DataError);
  }
  SUBCASE("coverage and stride bounds hold over random cases") {
    Rng rng(4);
    for (int rep = 0; rep < 200; ++rep) {
      const int h = 2 + rng.below_int(40), w = 2 + rng.below_int(40);
      const int p = 1 + rng.below_int(std::min({50, h, w}));
      const double overlap = 0.5 + rng.uniform() * 0.25;
      PatchLayout layout = plan_patches(h, w, p, overlap);
      CHECK(layout.stride >= 1);
      CHECK(1.0 - static_cast<double>(layout.stride) / p >= 0.5 - 0.5 / p - 1e-9);
      std::vector<char> covered(static_cast<std::size_t>(h) * w, 0);
      for (auto [oy, ox] : layout.origins) {
        CHECK(oy + p <= h);
        CHECK(ox + p <= w);
        for (int y = oy; y < oy + p; ++y)
          for (int x = ox; x < ox + p; ++x) covered[static_cast<std::size_t>(y) * w + x] = 1;
      }
      CHECK(std::count(covered.begin(), covered.end(), 0) == 0);
    }
  }
}

TEST_CASE("patch extraction and background replication") {
  Rng rng(5);
  Tensor4 image(1, 1, 6, 6);
  for (auto& v : image.data) v = static_cast<float>(rng.uniform(0, 1));
  PatchSet set = extract_patches(image, 3, 0.5);
  PatchLayout layout = plan_patches(6, 6, 3, 0.5);
  REQUIRE(set.origins == layout.origins);

  SUBCASE("patch content equals direct slicing") {
    for (std::size_t i = 0; i < set.origins.size(); ++i) {
      auto [oy, ox] = set.origins[i];
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x)
          CHECK(set.patches.at(static_cast<int>(i), 0, y, x) == image.at(0, 0, oy + y, ox + x));
    }
  }
  SUBCASE("replication repeats origins per copy") {
    PatchSet bg = replicate_background_patches(image, layout, 3);
    CHECK(bg.patches.n() == 3 * static_cast<int>(layout.origins.size()));
    for (std::size_t i = 0; i < bg.origins.size(); ++i)
      CHECK(bg.origins[i] == layout.origins[i % layout.origins.size()]);
    for (int k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < layout.origins.size(); ++i) {
        const int idx = k * static_cast<int>(layout.origins.size()) + static_cast<int>(i);
        auto [oy, ox] = layout.origins[i];
        CHECK(bg.patches.at(idx, 0, 1, 1) == image.at(0, 0, oy + 1, ox + 1));
      }
    Tensor4 wrong(1, 1, 5, 6);
    CHECK_THROWS_AS(replicate_background_patches(wrong, layout, 1), ShapeError);
  }
  SUBCASE("reassembly of unmodified patches is exact") {
    Tensor4 back = reassemble_average(set, 6, 6);
    CHECK(back.data == image.data);
  }
}

TEST_CASE("split and batch") {
  SUBCASE("10 patches split 8/2") {
    BatchPlan plan = split_and_batch(10, 0.8, 128, 7);
    CHECK(plan.train_indices.size() == 8);
    CHECK(plan.val_indices.size() == 2);
  }
  SUBCASE("same seed, same split and batch order") {
    BatchPlan a = split_and_batch(50, 0.8, 8, 3), b = split_and_batch(50, 0.8, 8, 3);
    CHECK(a.train_indices == b.train_indices);
    CHECK(a.val_indices == b.val_indices);
    CHECK(a.epoch_batches(4) == b.epoch_batches(4));
    CHECK(a.epoch_batches(1) != a.epoch_batches(2));  // reshuffled per epoch
  }
  SUBCASE("train + validation is the original multiset") {
    BatchPlan plan = split_and_batch(37, 0.8, 8, 11);
    std::vector<int> all = plan.train_indices;
    all.insert(all.end(), plan.val_indices.begin(), plan.val_indices.end());
    std::sort(all.begin(), all.end());
    for (int i = 0; i < 37; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
  }
  SUBCASE("batches are full except possibly the last") {
    BatchPlan plan = split_and_batch(300, 0.8, 128, 1);
    auto batches = plan.epoch_batches(1);
    REQUIRE(batches.size() == 2);  // 240 train patches
    CHECK(batches[0].size() == 128);
    CHECK(batches[1].size() == 112);
  }
  SUBCASE("empty set is rejected") { CHECK_THROWS_AS(split_and_batch(0, 0.8, 8, 0), DataError); }
}
