#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ctnet/checkpoint.hpp"
#include "ctnet/error.hpp"
#include "ctnet/gradcheck.hpp"
#include "ctnet/metrics.hpp"
#include "ctnet/train.hpp"
#include "test_util.hpp"

using namespace ctnet;
using test::bit_equal;
using test::random_tensor;

TEST_SUITE("loss") {
  TEST_CASE("literal objective: single-pixel difference of 2 at n=1 gives 2.0") {
    Graph g;
    Tensor pred({1, 1, 2, 2});
    Tensor target({1, 1, 2, 2});
    pred[3] = 2.0;
    CHECK(mse_loss(g, g.leaf(pred), g.leaf(target)).val()[0] == 2.0);  // 4 / (2*1)
    CHECK(mse_loss(g, g.leaf(target), g.leaf(target)).val()[0] == 0.0);
    CHECK_THROWS_AS(mse_loss(g, g.leaf(Tensor({1, 2})), g.leaf(Tensor({2, 1}))),
                    ShapeError);
  }

  TEST_CASE("gradient is (pred - target) / n, exactly and by finite differences") {
    Rng rng(301);
    const Tensor target = random_tensor({4, 1, 3, 3}, rng);
    ParamMap params;
    params["pred"] = random_tensor({4, 1, 3, 3}, rng);

    Graph g;
    VarMap bound = bind_params(g, params, true);
    Var loss = mse_loss(g, bound.at("pred"), g.leaf(target));
    g.backward(loss);
    const Tensor& grad = bound.at("pred").grad();
    for (std::int64_t i = 0; i < grad.size(); ++i)
      CHECK(grad[i] ==
            doctest::Approx((params["pred"][i] - target[i]) / 4.0).epsilon(1e-14));

    GradCheckProblem problem;
    problem.eval = [&](const ParamMap& p) {
      Graph g2(false);
      return mse_loss(g2, g2.leaf(p.at("pred")), g2.leaf(target)).val()[0];
    };
    problem.grad = [&](const ParamMap& p) {
      Graph g2;
      VarMap b2 = bind_params(g2, p, true);
      g2.backward(mse_loss(g2, b2.at("pred"), g2.leaf(target)));
      ParamMap out;
      out.emplace("pred", b2.at("pred").grad());
      return out;
    };
    CHECK(finite_diff_check(problem, params, all_coordinates(params)).passed(1e-6));
  }

  TEST_CASE("non-negativity and the per-element-mean flag") {
    Rng rng(303);
    const Tensor a = random_tensor({2, 1, 2, 2}, rng);
    const Tensor b = random_tensor({2, 1, 2, 2}, rng);
    Graph g;
    const double by_sample = mse_loss(g, g.leaf(a), g.leaf(b), false).val()[0];
    const double by_pixel = mse_loss(g, g.leaf(a), g.leaf(b), true).val()[0];
    CHECK(by_sample > 0.0);
    CHECK(by_pixel == doctest::Approx(by_sample * 2.0 / 8.0).epsilon(1e-14));
  }
}

TEST_SUITE("schedule") {
  TEST_CASE("halving table hits the pinned values exactly") {
    TrainConfig cfg;  // epochs 33, halvings {15,22,24,26,28,30,31}, lr0 2e-4
    CHECK(lr_at(0, cfg) == 2e-4);
    CHECK(lr_at(13, cfg) == 2e-4);   // 14th epoch, before the first halving
    CHECK(lr_at(14, cfg) == 1e-4);   // the 15th epoch
    CHECK(lr_at(16, cfg) == 1e-4);
    CHECK(lr_at(32, cfg) == 1.5625e-6);  // all seven halvings
    CHECK_THROWS_AS(lr_at(33, cfg), ConfigError);
    CHECK_THROWS_AS(lr_at(-1, cfg), ConfigError);
  }

  TEST_CASE("piecewise constant and non-increasing") {
    TrainConfig cfg;
    double prev = lr_at(0, cfg);
    int distinct = 1;
    for (int e = 1; e < cfg.epochs; ++e) {
      const double lr = lr_at(e, cfg);
      CHECK(lr <= prev);
      if (lr != prev) ++distinct;
      prev = lr;
    }
    CHECK(distinct == 8);  // lr0 plus seven halvings
  }

  TEST_CASE("validation rejects out-of-range halving epochs") {
    TrainConfig cfg;
    cfg.epochs = 20;  // default halvings reach 31
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.halving_epochs = {15, 15};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.halving_epochs = {15, 18};
    CHECK_NOTHROW(cfg.validate());
  }
}

TEST_SUITE("adam") {
  TEST_CASE("matches a directly computed three-step reference to 1e-12") {
    TrainConfig cfg;
    cfg.lr0 = 0.1;
    ParamMap params;
    params["p"] = Tensor::from_data({1}, {1.0});
    AdamState st = AdamState::init(params);

    const double grads_seq[3] = {1.0, -0.5, 0.25};
    double m = 0.0, v = 0.0, ref = 1.0;
    for (int t = 1; t <= 3; ++t) {
      ParamMap grads;
      grads["p"] = Tensor::from_data({1}, {grads_seq[t - 1]});
      adam_step(params, grads, st, cfg.lr0, cfg);

      const double gi = grads_seq[t - 1];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * gi;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m / (1.0 - std::pow(cfg.beta1, t));
      const double vhat = v / (1.0 - std::pow(cfg.beta2, t));
      ref -= cfg.lr0 * mhat / (std::sqrt(vhat) + cfg.eps);
      CHECK(std::abs(params["p"][0] - ref) < 1e-12);
    }
    CHECK(st.t == 3);
  }

  TEST_CASE("zero gradients leave parameters untouched; lr 0 moves only state") {
    TrainConfig cfg;
    Rng rng(307);
    ParamMap params;
    params["w"] = random_tensor({3, 3}, rng);
    const Tensor before = params["w"];
    AdamState st = AdamState::init(params);

    ParamMap zero_grads;
    zero_grads["w"] = Tensor({3, 3});
    adam_step(params, zero_grads, st, 0.01, cfg);
    CHECK(bit_equal(params["w"], before));
    CHECK(st.t == 1);

    ParamMap grads;
    grads["w"] = random_tensor({3, 3}, rng);
    adam_step(params, grads, st, 0.0, cfg);
    CHECK(bit_equal(params["w"], before));
    CHECK(st.t == 2);
    bool moments_moved = false;
    for (std::int64_t i = 0; i < st.m.at("w").size(); ++i)
      moments_moved = moments_moved || st.m.at("w")[i] != 0.0;
    CHECK(moments_moved);
  }

  TEST_CASE("missing gradient is a contract error") {
    TrainConfig cfg;
    ParamMap params;
    params["w"] = Tensor({2});
    AdamState st = AdamState::init(params);
    ParamMap grads;  // empty
    CHECK_THROWS_AS(adam_step(params, grads, st, 0.1, cfg), ConfigError);
  }
}

TEST_SUITE("training loop") {
  namespace {
  TrainConfig toy_config(std::uint64_t seed) {
    TrainConfig tc;
    tc.batch_size = 4;
    tc.epochs = 2;
    tc.halving_epochs = {};
    tc.lr0 = 1e-3;
    tc.seed = seed;
    tc.noise = NoiseSpec::fixed(25.0);
    tc.patch_size = 8;
    tc.patches_per_image = 2;
    tc.augment = true;
    return tc;
  }

  std::vector<ImageBuffer> toy_images(int count) {
    std::vector<ImageBuffer> v;
    for (int i = 0; i < count; ++i)
      v.push_back(test::synthetic_image(12, 12, 1, 400 + static_cast<std::uint64_t>(i)));
    return v;
  }
  }  // namespace

  TEST_CASE("two runs with the same seed produce bit-identical parameters") {
    const ModelConfig mc = ModelConfig::tiny(1);
    const TrainConfig tc = toy_config(5);
    const auto images = toy_images(6);

    TrainResult a = train(mc, tc, images, {});
    TrainResult b = train(mc, tc, images, {});
    bool identical = true;
    for (const auto& [name, t] : a.params)
      identical = identical && bit_equal(t, b.params.at(name));
    CHECK(identical);
    CHECK(a.steps.size() == b.steps.size());
    CHECK(a.steps.size() == 6);  // 12 patches / batch 4 = 3 steps, 2 epochs

    TrainResult c = train(mc, toy_config(6), images, {});
    bool differs = false;
    for (const auto& [name, t] : a.params)
      differs = differs || !bit_equal(t, c.params.at(name));
    CHECK(differs);
  }

  TEST_CASE("metrics csv, checkpoint, and validation column") {
    const ModelConfig mc = ModelConfig::tiny(1);
    TrainConfig tc = toy_config(7);
    const auto images = toy_images(5);
    const std::string ckpt = test::tmp_path("train_ck.ctnt");
    const std::string csv = test::tmp_path("train_metrics.csv");

    TrainResult r = train(mc, tc, images, toy_images(2), ckpt, csv);
    CHECK(r.epochs.size() == 2);
    CHECK(std::isfinite(r.epochs.back().val_psnr));

    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,step,lr,loss,val_psnr");
    int lines = 0;
    for (std::string line; std::getline(in, line);) ++lines;
    CHECK(lines == static_cast<int>(r.steps.size() + r.epochs.size()));

    const Checkpoint ck = load_checkpoint(ckpt);
    CHECK(ck.train_state.epoch == 2);
    CHECK(ck.train_state.t == static_cast<std::int64_t>(r.steps.size()));
    bool same = true;
    for (const auto& [name, t] : ck.params) {
      Tensor narrowed = r.params.at(name);
      for (std::int64_t i = 0; i < narrowed.size(); ++i)
        narrowed[i] = static_cast<double>(static_cast<float>(narrowed[i]));
      same = same && bit_equal(t, narrowed);
    }
    CHECK(same);  // stored at 32-bit precision
  }

  TEST_CASE("steps_limit stops mid-epoch and still flushes a checkpoint") {
    const ModelConfig mc = ModelConfig::tiny(1);
    TrainConfig tc = toy_config(9);
    tc.steps_limit = 2;
    TrainResult r = train(mc, tc, toy_images(6), {});
    CHECK(r.steps.size() == 2);
  }

  TEST_CASE("non-finite loss aborts and keeps the last-good checkpoint") {
    const ModelConfig mc = ModelConfig::tiny(1);
    TrainConfig tc = toy_config(11);
    tc.lr0 = 1e18;  // guaranteed blow-up after the first update
    const std::string ckpt = test::tmp_path("abort_ck.ctnt");
    std::filesystem::remove(ckpt);

    TrainResult r = train(mc, tc, toy_images(6), {}, ckpt);
    CHECK(r.aborted_non_finite);
    if (std::filesystem::exists(ckpt)) {
      // written only if a full epoch finished before the blow-up
      CHECK_NOTHROW(load_checkpoint(ckpt));
    }
  }

  TEST_CASE("interruption flushes a checkpoint and stops") {
    const ModelConfig mc = ModelConfig::tiny(1);
    TrainConfig tc = toy_config(13);
    const std::string ckpt = test::tmp_path("interrupt_ck.ctnt");
    std::filesystem::remove(ckpt);
    int calls = 0;
    TrainResult r = train(mc, tc, toy_images(6), {}, ckpt, "",
                          [&calls] { return ++calls > 2; });
    CHECK(r.interrupted);
    CHECK(std::filesystem::exists(ckpt));
  }

  TEST_CASE("input validation") {
    const ModelConfig mc = ModelConfig::tiny(1);
    CHECK_THROWS_AS(train(mc, toy_config(1), {}, {}), ConfigError);
    CHECK_THROWS_AS(train(mc, toy_config(1), {test::synthetic_image(12, 12, 3, 1)}, {}),
                    ConfigError);
  }
}
