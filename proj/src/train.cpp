#include "ctnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "ctnet/checkpoint.hpp"
#include "ctnet/error.hpp"
#include "ctnet/metrics.hpp"

namespace ctnet {

namespace {

// Stream tags for deriving independent RNG streams from the run seed.
constexpr std::uint64_t kStreamPatches = 1;
constexpr std::uint64_t kStreamAugment = 2;
constexpr std::uint64_t kStreamShuffle = 3;
constexpr std::uint64_t kStreamNoise = 4;
constexpr std::uint64_t kStreamValNoise = 5;

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (lr0 <= 0.0) throw ConfigError("lr0 must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0,1)");
  if (eps <= 0.0) throw ConfigError("adam eps must be positive");
  if (patch_size < 1) throw ConfigError("patch_size must be at least 1");
  if (patches_per_image < 1) throw ConfigError("patches_per_image must be at least 1");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
  if (steps_limit < 0) throw ConfigError("steps_limit must be non-negative");
  int prev = 0;
  for (int e : halving_epochs) {
    if (e <= prev)
      throw ConfigError("halving epochs must be strictly increasing and positive");
    if (e >= epochs)
      throw ConfigError("halving epoch " + std::to_string(e) +
                        " is not below the epoch count " + std::to_string(epochs));
    prev = e;
  }
  noise.validate();
}

Var mse_loss(Graph& g, Var pred, Var target, bool pixel_mean) {
  if (!pred.val().same_shape(target.val()))
    throw ShapeError("mse_loss: shape mismatch " +
                     Tensor::shape_string(pred.val().shape()) + " vs " +
                     Tensor::shape_string(target.val().shape()));
  const double n = pixel_mean ? static_cast<double>(pred.val().size())
                              : static_cast<double>(pred.val().dim(0));
  Var ss = g.reduce_sum(g.square(g.sub(pred, target)));
  return g.scale(ss, 1.0 / (2.0 * n));
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw ConfigError("lr_at: epoch out of range");
  int halvings = 0;
  for (int e : cfg.halving_epochs)
    if (e <= epoch + 1) ++halvings;  // the schedule speaks in 1-based epochs
  return cfg.lr0 * std::pow(2.0, -halvings);
}

double model_loss(const ModelConfig& cfg, const ParamMap& params, const Tensor& noisy,
                  const Tensor& clean, bool pixel_mean) {
  Graph g(/*grad_enabled=*/false);
  VarMap bound = bind_params(g, params, false);
  Var out = ctnet_forward(g, cfg, bound, g.leaf(noisy));
  Var loss = mse_loss(g, out, g.leaf(clean), pixel_mean);
  return loss.val()[0];
}

LossGrads model_loss_grads(const ModelConfig& cfg, const ParamMap& params,
                           const Tensor& noisy, const Tensor& clean, bool pixel_mean) {
  Graph g;
  VarMap bound = bind_params(g, params, true);
  Var out = ctnet_forward(g, cfg, bound, g.leaf(noisy));
  Var loss = mse_loss(g, out, g.leaf(clean), pixel_mean);
  g.backward(loss);
  LossGrads result;
  result.loss = loss.val()[0];
  for (const auto& [name, var] : bound) result.grads.emplace(name, var.grad());
  return result;
}

AdamState AdamState::init(const ParamMap& params) {
  AdamState st;
  for (const auto& [name, t] : params) {
    st.m.emplace(name, Tensor(t.shape()));
    st.v.emplace(name, Tensor(t.shape()));
  }
  return st;
}

void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, double lr,
               const TrainConfig& cfg) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end())
      throw ConfigError("adam_step: missing gradient for '" + name + "'");
    const Tensor& grad = git->second;
    if (!grad.same_shape(p))
      throw ShapeError("adam_step: gradient shape mismatch for '" + name + "'");
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double gi = grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double validation_sigma(const NoiseSpec& spec) {
  return spec.mode == NoiseSpec::Mode::Fixed ? spec.sigma
                                             : 0.5 * (spec.sigma_min + spec.sigma_max);
}

namespace {

struct Corpus {
  std::vector<ImageBuffer> patches;
};

Corpus build_corpus(const TrainConfig& cfg, const std::vector<ImageBuffer>& images) {
  Corpus corpus;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::uint64_t sub_seed =
        Rng::keyed(cfg.seed, kStreamPatches, static_cast<std::uint64_t>(i)).next_u64();
    std::vector<ImageBuffer> cut =
        extract_patches(images[i], cfg.patch_size, cfg.patches_per_image, sub_seed);
    for (std::size_t p = 0; p < cut.size(); ++p) {
      if (cfg.augment) {
        Rng rng = Rng::keyed(cfg.seed, kStreamAugment, static_cast<std::uint64_t>(i),
                             static_cast<std::uint64_t>(p));
        cut[p] = augment(cut[p], static_cast<int>(rng.uniform_below(8)));
      }
      corpus.patches.push_back(std::move(cut[p]));
    }
  }
  return corpus;
}

void shuffle_order(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_below(i);
    std::swap(order[i - 1], order[j]);
  }
}

double grad_global_norm(const ParamMap& grads) {
  double ss = 0.0;
  for (const auto& [name, g] : grads)
    for (std::int64_t i = 0; i < g.size(); ++i) ss += g[i] * g[i];
  return std::sqrt(ss);
}

std::string csv_num(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

double validation_psnr(const ModelConfig& mc, const TrainConfig& tc,
                       const ParamMap& params, const std::vector<ImageBuffer>& val) {
  if (val.empty()) return std::numeric_limits<double>::quiet_NaN();
  const NoiseSpec spec = NoiseSpec::fixed(validation_sigma(tc.noise));
  double sum = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    Rng rng = Rng::keyed(tc.seed, kStreamValNoise, static_cast<std::uint64_t>(i));
    auto [noisy, sigma] = add_awgn(val[i], spec, rng);
    (void)sigma;
    const Tensor out = ctnet_apply(mc, params, image_to_tensor(noisy));
    sum += psnr(quantize(tensor_to_image(out)), val[i]);
  }
  return sum / static_cast<double>(val.size());
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const std::vector<ImageBuffer>& train_images,
                  const std::vector<ImageBuffer>& val_images,
                  const std::string& checkpoint_path, const std::string& metrics_csv_path,
                  const std::function<bool()>& stop) {
  model_cfg.validate();
  cfg.validate();
  if (train_images.empty()) throw ConfigError("train: empty dataset");
  for (const ImageBuffer& img : train_images)
    if (img.channels != model_cfg.image_channels)
      throw ConfigError("train: image channel count does not match the model");

  Corpus corpus = build_corpus(cfg, train_images);
  const std::size_t n_patches = corpus.patches.size();
  if (n_patches < static_cast<std::size_t>(cfg.batch_size))
    throw ConfigError("train: fewer patches than one batch");

  TrainResult result;
  result.params = init_params(model_cfg, cfg.seed);
  result.state = AdamState::init(result.params);

  std::ofstream csv;
  if (!metrics_csv_path.empty()) {
    csv.open(metrics_csv_path, std::ios::binary);
    if (!csv) throw IoError("cannot write metrics csv " + metrics_csv_path);
    csv << "epoch,step,lr,loss,val_psnr\n";
  }

  const auto save_state = [&](int completed_epochs) {
    if (checkpoint_path.empty()) return;
    Checkpoint ck;
    ck.config = model_cfg;
    ck.params = result.params;
    ck.adam_m = result.state.m;
    ck.adam_v = result.state.v;
    ck.train_state = {result.state.t, completed_epochs, cfg.seed};
    ck.build_id = "ctnet-trainer";
    save_checkpoint(ck, checkpoint_path);
  };

  const int ch = model_cfg.image_channels;
  const int ps = cfg.patch_size;
  std::int64_t global_step = 0;
  bool done = false;

  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    std::vector<std::size_t> order(n_patches);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = Rng::keyed(cfg.seed, kStreamShuffle, static_cast<std::uint64_t>(epoch));
    shuffle_order(order, shuffle_rng);

    double loss_sum = 0.0;
    int steps_this_epoch = 0;
    const std::size_t batches = n_patches / static_cast<std::size_t>(cfg.batch_size);

    for (std::size_t b = 0; b < batches; ++b) {
      if (stop && stop()) {
        save_state(epoch);
        result.interrupted = true;
        done = true;
        break;
      }

      Tensor noisy({cfg.batch_size, ch, ps, ps});
      Tensor clean({cfg.batch_size, ch, ps, ps});
      for (int s = 0; s < cfg.batch_size; ++s) {
        const std::size_t pi = order[b * static_cast<std::size_t>(cfg.batch_size) +
                                     static_cast<std::size_t>(s)];
        const ImageBuffer& patch = corpus.patches[pi];
        Rng rng = Rng::keyed(cfg.seed, kStreamNoise, static_cast<std::uint64_t>(epoch),
                             static_cast<std::uint64_t>(pi));
        auto [noisy_patch, sigma] = add_awgn(patch, cfg.noise, rng);
        (void)sigma;
        if (cfg.clip_noisy)
          for (double& v : noisy_patch.values) v = std::clamp(v, 0.0, 1.0);
        const Tensor cn = image_to_tensor(patch);
        const Tensor ny = image_to_tensor(noisy_patch);
        const std::int64_t plane = static_cast<std::int64_t>(ch) * ps * ps;
        std::copy(ny.data(), ny.data() + plane, noisy.data() + s * plane);
        std::copy(cn.data(), cn.data() + plane, clean.data() + s * plane);
      }

      LossGrads lg;
      try {
        lg = model_loss_grads(model_cfg, result.params, noisy, clean, cfg.pixel_mean_loss);
      } catch (const NumericError&) {
        result.aborted_non_finite = true;
        done = true;
        break;
      }
      if (!std::isfinite(lg.loss)) {
        result.aborted_non_finite = true;
        done = true;
        break;
      }

      if (cfg.grad_clip > 0.0) {
        const double norm = grad_global_norm(lg.grads);
        if (norm > cfg.grad_clip) {
          const double factor = cfg.grad_clip / norm;
          for (auto& [name, g] : lg.grads)
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= factor;
        }
      }

      adam_step(result.params, lg.grads, result.state, lr, cfg);
      ++global_step;
      ++steps_this_epoch;
      loss_sum += lg.loss;
      result.steps.push_back({epoch, global_step, lr, lg.loss});
      if (csv.is_open())
        csv << epoch << "," << global_step << "," << csv_num(lr) << ","
            << csv_num(lg.loss) << ",\n";

      if (cfg.steps_limit > 0 && global_step >= cfg.steps_limit) {
        done = true;
        break;
      }
    }

    if (result.aborted_non_finite) break;  // keep the previous epoch's checkpoint
    if (result.interrupted) break;

    if (steps_this_epoch > 0) {
      EpochLog log;
      log.epoch = epoch;
      log.step = global_step;
      log.lr = lr;
      log.mean_loss = loss_sum / steps_this_epoch;
      log.val_psnr = validation_psnr(model_cfg, cfg, result.params, val_images);
      result.epochs.push_back(log);
      if (csv.is_open()) {
        csv << epoch << "," << global_step << "," << csv_num(lr) << ","
            << csv_num(log.mean_loss) << ",";
        if (std::isnan(log.val_psnr))
          csv << "\n";
        else
          csv << format_db(log.val_psnr) << "\n";
      }
      save_state(epoch + 1);
    }
  }

  return result;
}

}  // namespace ctnet
