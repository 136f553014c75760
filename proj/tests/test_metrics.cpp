#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>

#include "ctnet/data.hpp"
#include "ctnet/error.hpp"
#include "ctnet/metrics.hpp"
#include "test_util.hpp"

using namespace ctnet;
using test::random_tensor;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

// X [n,f] times square R [f,f]
Tensor right_multiply(const Tensor& x, const Tensor& r) {
  const int n = x.dim(0), f = x.dim(1);
  Tensor out({n, f});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < f; ++j) {
      double acc = 0.0;
      for (int k = 0; k < f; ++k) acc += x[i * f + k] * r[k * f + j];
      out[i * f + j] = acc;
    }
  return out;
}

// random orthogonal matrix via Gram-Schmidt on random columns
Tensor random_orthogonal(int f, Rng& rng) {
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(f),
                                        std::vector<double>(static_cast<std::size_t>(f)));
  for (auto& col : cols)
    for (double& v : col) v = rng.gaussian();
  for (int i = 0; i < f; ++i) {
    for (int j = 0; j < i; ++j) {
      double dot = 0.0;
      for (int k = 0; k < f; ++k) dot += cols[i][k] * cols[j][k];
      for (int k = 0; k < f; ++k) cols[i][k] -= dot * cols[j][k];
    }
    double norm = 0.0;
    for (int k = 0; k < f; ++k) norm += cols[i][k] * cols[i][k];
    norm = std::sqrt(norm);
    for (int k = 0; k < f; ++k) cols[i][k] /= norm;
  }
  Tensor r({f, f});
  for (int row = 0; row < f; ++row)
    for (int col = 0; col < f; ++col) r[row * f + col] = cols[static_cast<std::size_t>(col)][static_cast<std::size_t>(row)];
  return r;
}

// direct HSIC route: cka = tr(Kc Lc) / sqrt(tr(Kc Kc) tr(Lc Lc)) with
// K = X X', L = Y Y', and double-centering by H = I - 11'/n
double cka_via_hsic(const Tensor& x, const Tensor& y) {
  const int n = x.dim(0);
  auto gram = [n](const Tensor& m) {
    const int f = m.dim(1);
    std::vector<double> k(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int c = 0; c < f; ++c) acc += m[i * f + c] * m[j * f + c];
        k[static_cast<std::size_t>(i) * n + j] = acc;
      }
    return k;
  };
  auto center = [n](std::vector<double> k) {
    std::vector<double> row(static_cast<std::size_t>(n), 0.0), col(static_cast<std::size_t>(n), 0.0);
    double all = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        row[static_cast<std::size_t>(i)] += k[static_cast<std::size_t>(i) * n + j] / n;
        col[static_cast<std::size_t>(j)] += k[static_cast<std::size_t>(i) * n + j] / n;
        all += k[static_cast<std::size_t>(i) * n + j] / (static_cast<double>(n) * n);
      }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        k[static_cast<std::size_t>(i) * n + j] +=
            all - row[static_cast<std::size_t>(i)] - col[static_cast<std::size_t>(j)];
    return k;
  };
  auto tr_prod = [n](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        acc += a[static_cast<std::size_t>(i) * n + j] * b[static_cast<std::size_t>(j) * n + i];
    return acc;
  };
  const auto kc = center(gram(x));
  const auto lc = center(gram(y));
  return tr_prod(kc, lc) / std::sqrt(tr_prod(kc, kc) * tr_prod(lc, lc));
}

}  // namespace

TEST_SUITE("psnr") {
  TEST_CASE("closed forms") {
    ImageBuffer a = ImageBuffer::blank(4, 4, 1);
    CHECK(std::isinf(psnr(a, a)));
    CHECK(format_db(psnr(a, a)) == "inf");

    ImageBuffer b = a;
    for (double& v : b.values) v += 16.0 / 255.0;
    CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(255.0 * 255.0 / 256.0))
                            .epsilon(1e-12));
    CHECK(psnr(a, b) == doctest::Approx(24.0487).epsilon(1e-4));

    ImageBuffer c = a;
    for (double& v : c.values) v += 1.0;  // MSE == peak^2
    CHECK(psnr(a, c) == doctest::Approx(0.0).epsilon(1e-12));

    CHECK_THROWS_AS(psnr(a, ImageBuffer::blank(4, 5, 1)), ShapeError);
  }

  TEST_CASE("strictly decreasing in MSE; invariant under a shared permutation") {
    ImageBuffer base = test::synthetic_image(6, 6, 1, 55);
    ImageBuffer small = base, big = base;
    for (std::size_t i = 0; i < base.values.size(); ++i) {
      small.values[i] += (i % 2 ? 0.01 : -0.01);
      big.values[i] += (i % 2 ? 0.03 : -0.03);
    }
    CHECK(psnr(base, small) > psnr(base, big));

    ImageBuffer pa = base, pb = small;
    std::reverse(pa.values.begin(), pa.values.end());
    std::reverse(pb.values.begin(), pb.values.end());
    CHECK(psnr(pa, pb) == doctest::Approx(psnr(base, small)).epsilon(1e-12));
  }
}

TEST_SUITE("linear cka") {
  TEST_CASE("self-similarity, symmetry, invariances") {
    Rng rng(401);
    const Tensor x = random_tensor({20, 5}, rng);
    const Tensor y = random_tensor({20, 3}, rng);

    CHECK(std::abs(linear_cka(x, x) - 1.0) < 1e-10);
    CHECK(linear_cka(x, y) == doctest::Approx(linear_cka(y, x)).epsilon(1e-12));

    const Tensor r = random_orthogonal(5, rng);
    CHECK(std::abs(linear_cka(x, right_multiply(x, r)) - 1.0) < 1e-10);

    Tensor scaled = y;
    for (std::int64_t i = 0; i < scaled.size(); ++i) scaled[i] *= 3.7;
    CHECK(linear_cka(x, scaled) == doctest::Approx(linear_cka(x, y)).epsilon(1e-10));

    const double v = linear_cka(x, y);
    CHECK(v >= -1e-10);
    CHECK(v <= 1.0 + 1e-10);
  }

  TEST_CASE("three-sample two-feature case matches the HSIC brute force") {
    const Tensor x = Tensor::from_data({3, 2}, {1.0, 0.5, -2.0, 1.5, 0.25, -1.0});
    const Tensor y = Tensor::from_data({3, 2}, {0.75, -0.5, 2.0, 0.1, -1.25, 0.6});
    CHECK(std::abs(linear_cka(x, y) - cka_via_hsic(x, y)) < 1e-12);

    Rng rng(403);
    const Tensor bigger_x = random_tensor({9, 4}, rng);
    const Tensor bigger_y = random_tensor({9, 6}, rng);
    CHECK(std::abs(linear_cka(bigger_x, bigger_y) - cka_via_hsic(bigger_x, bigger_y)) <
          1e-12);
  }

  TEST_CASE("degenerate inputs are rejected") {
    Rng rng(407);
    const Tensor x = random_tensor({5, 2}, rng);
    CHECK_THROWS_AS(linear_cka(x, Tensor({5, 2})), NumericError);  // zero variance
    CHECK_THROWS_AS(linear_cka(x, Tensor::full({5, 2}, 3.0)), NumericError);
    CHECK_THROWS_AS(linear_cka(Tensor({1, 2}), Tensor({1, 2})), ShapeError);
    CHECK_THROWS_AS(linear_cka(x, random_tensor({4, 2}, rng)), ShapeError);
  }
}

TEST_SUITE("evaluate") {
  TEST_CASE("zero-weight model reproduces the noisy-input PSNR") {
    const ModelConfig cfg = ModelConfig::tiny(1);
    const ParamMap zeros = zero_weight_params(cfg);
    std::vector<std::pair<std::string, ImageBuffer>> images;
    images.emplace_back("img0", test::synthetic_image(12, 12, 1, 61));
    images.emplace_back("img1", test::synthetic_image(16, 12, 1, 62));

    const std::vector<double> sigmas = {15.0, 25.0};
    const auto rows = evaluate(cfg, zeros, "toy", images, sigmas, 5);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].dataset == "toy");
    CHECK(rows[0].sigma == 15.0);
    CHECK(rows[1].sigma == 25.0);
    CHECK(rows[2].image == "img1");

    for (std::size_t i = 0; i < images.size(); ++i)
      for (std::size_t s = 0; s < sigmas.size(); ++s) {
        Rng rng = Rng::keyed(5, i, s);
        auto [noisy, used] = add_awgn(images[i].second, NoiseSpec::fixed(sigmas[s]), rng);
        const double expected = psnr(quantize(noisy), images[i].second);
        CHECK(rows[i * 2 + s].psnr_db == doctest::Approx(expected).epsilon(1e-12));
      }
  }

  TEST_CASE("deterministic across reruns and thread counts") {
    const ModelConfig cfg = ModelConfig::tiny(1);
    const ParamMap params = init_params(cfg, 3);
    std::vector<std::pair<std::string, ImageBuffer>> images;
    for (int i = 0; i < 3; ++i)
      images.emplace_back("i" + std::to_string(i),
                          test::synthetic_image(10, 14, 1, 70 + static_cast<std::uint64_t>(i)));

    const auto a = evaluate(cfg, params, "d", images, {25.0}, 1, 1);
    const auto b = evaluate(cfg, params, "d", images, {25.0}, 1, 3);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].psnr_db == b[i].psnr_db);

    CHECK_THROWS_AS(evaluate(cfg, params, "d", {}, {25.0}, 1), ConfigError);
  }

  TEST_CASE("csv format") {
    std::vector<EvalRow> rows;
    rows.push_back({"set", 25.0, "a.png", 30.25});
    rows.push_back({"set", 50.0, "b.png", std::numeric_limits<double>::infinity()});
    const std::string path = test::tmp_path("eval.csv");
    write_eval_csv(rows, path);
    const std::string text = read_file(path);
    CHECK(text.find("dataset,sigma,image,psnr\n") == 0);
    CHECK(text.find("set,25,a.png,30.2500") != std::string::npos);
    CHECK(text.find("set,50,b.png,inf") != std::string::npos);
  }

  TEST_CASE("CTNET_THREADS caps the worker count") {
    setenv("CTNET_THREADS", "2", 1);
    CHECK(worker_thread_count(8) == 2);
    unsetenv("CTNET_THREADS");
    CHECK(worker_thread_count(8) == 8);
  }
}

TEST_SUITE("cka profile") {
  TEST_CASE("profile of a random-init model is symmetric and self-consistent") {
    const ModelConfig cfg = ModelConfig::tiny(1);
    const ParamMap params = init_params(cfg, 19);
    std::vector<ImageBuffer> probes = {test::synthetic_image(8, 8, 1, 81),
                                       test::synthetic_image(8, 8, 1, 82)};
    const CkaProfile profile = cka_profile(cfg, params, probes);

    const int l = static_cast<int>(profile.layers.size());
    REQUIRE(l >= 2);
    CHECK(profile.layers.size() + profile.degenerate.size() == trace_names(cfg).size());
    for (int i = 0; i < l; ++i) {
      CHECK(std::abs(profile.matrix[i * l + i] - 1.0) < 1e-10);
      for (int j = 0; j < l; ++j) {
        CHECK(profile.matrix[i * l + j] ==
              doctest::Approx(profile.matrix[j * l + i]).epsilon(1e-12));
        CHECK(profile.matrix[i * l + j] >= -1e-10);
        CHECK(profile.matrix[i * l + j] <= 1.0 + 1e-10);
      }
    }

    // ratios recomputed from the emitted matrix match the emitted ratios
    for (int i = 0; i < l; ++i) {
      int below = 0;
      for (int j = 0; j < l; ++j)
        if (j != i && profile.matrix[i * l + j] < kCkaThreshold) ++below;
      CHECK(profile.ratio_below[static_cast<std::size_t>(i)] ==
            doctest::Approx(static_cast<double>(below) / (l - 1)).epsilon(1e-15));
    }

    const std::string csv = test::tmp_path("cka.csv");
    write_cka_csv(profile, csv);
    const std::string text = read_file(csv);
    CHECK(text.rfind("layer,", 0) == 0);
    CHECK(text.find("ratio_below_0.6") != std::string::npos);

    const std::string pgm = test::tmp_path("cka.pgm");
    write_cka_heatmap_pgm(profile, pgm, 3);
    const ImageBuffer heat = load_image(pgm);
    CHECK(heat.height == l * 3);
    CHECK(heat.width == l * 3);
  }

  TEST_CASE("zero-weight model reports its zero-variance layers explicitly") {
    const ModelConfig cfg = ModelConfig::tiny(1);
    std::vector<ImageBuffer> probes = {test::synthetic_image(8, 8, 1, 83),
                                       test::synthetic_image(8, 8, 1, 84)};
    try {
      (void)cka_profile(cfg, zero_weight_params(cfg), probes);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("zero-variance") != std::string::npos);
    }
    CHECK_THROWS_AS(cka_profile(cfg, init_params(cfg, 1), {}), ConfigError);
  }
}
