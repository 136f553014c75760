// Command-line front end: train, denoise, eval, inspect, gradcheck, cka.
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// failure.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ctnet/checkpoint.hpp"
#include "ctnet/data.hpp"
#include "ctnet/error.hpp"
#include "ctnet/gradcheck.hpp"
#include "ctnet/metrics.hpp"
#include "ctnet/model.hpp"
#include "ctnet/runconfig.hpp"
#include "ctnet/train.hpp"

namespace fs = std::filesystem;
using namespace ctnet;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::atomic<bool> g_interrupted{false};

void handle_sigint(int) { g_interrupted.store(true); }

std::vector<double> parse_sigma_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stod(item));
  }
  if (out.empty()) throw ConfigError("empty sigma list");
  return out;
}

std::vector<std::pair<std::string, ImageBuffer>> load_named_images(
    const std::vector<ManifestEntry>& entries) {
  std::vector<std::pair<std::string, ImageBuffer>> out;
  for (const ManifestEntry& e : entries)
    out.emplace_back(fs::path(e.path).filename().string(), load_image(e.path));
  return out;
}

// --- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string data_manifest;
  std::string val_manifest;
  std::string out_dir = ".";
  bool tiny = false;
  std::int64_t seed = -1;
  double sigma = -1.0;
  std::vector<double> blind;
  int epochs = 0;
  int steps = 0;
  double lr = 0.0;
};

int cmd_train(const TrainArgs& args) {
  const std::vector<ManifestEntry> entries = load_manifest(args.data_manifest);
  if (entries.empty()) throw IoError("manifest is empty: " + args.data_manifest);

  RunConfig rc;
  if (args.tiny)
    rc = tiny_run_config(entries.front().channels);
  else if (!args.config_path.empty())
    rc = load_run_config(args.config_path);
  if (!args.tiny && args.config_path.empty())
    rc.model.image_channels = entries.front().channels;

  if (args.seed >= 0) rc.train.seed = static_cast<std::uint64_t>(args.seed);
  if (args.sigma >= 0.0) rc.train.noise = NoiseSpec::fixed(args.sigma);
  if (!args.blind.empty()) rc.train.noise = NoiseSpec::blind(args.blind[0], args.blind[1]);
  if (args.epochs > 0) {
    rc.train.epochs = args.epochs;
    std::erase_if(rc.train.halving_epochs, [&](int e) { return e >= args.epochs; });
  }
  if (args.steps > 0) rc.train.steps_limit = args.steps;
  if (args.lr > 0.0) rc.train.lr0 = args.lr;
  rc.model.validate();
  rc.train.validate();

  const std::vector<ImageBuffer> images = load_manifest_images(entries);
  std::vector<ImageBuffer> val;
  if (!args.val_manifest.empty())
    val = load_manifest_images(load_manifest(args.val_manifest));

  fs::create_directories(args.out_dir);
  const std::string ckpt = (fs::path(args.out_dir) / "checkpoint.ctnt").string();
  const std::string csv = (fs::path(args.out_dir) / "metrics.csv").string();

  std::signal(SIGINT, handle_sigint);
  TrainResult result = train(rc.model, rc.train, images, val, ckpt, csv,
                             [] { return g_interrupted.load(); });

  if (result.aborted_non_finite) {
    std::cerr << "training aborted: loss became non-finite; last-good checkpoint kept\n";
    return kExitNumeric;
  }
  if (result.interrupted) {
    std::cerr << "interrupted; checkpoint flushed to " << ckpt << "\n";
    return 130;
  }
  std::cerr << "trained " << result.steps.size() << " steps; checkpoint: " << ckpt
            << "; metrics: " << csv << "\n";
  return 0;
}

// --- denoise ----------------------------------------------------------------

int cmd_denoise(const std::string& ckpt_path, const std::string& in_path,
                const std::string& out_path, double sigma, std::int64_t seed) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  ImageBuffer input = load_image(in_path);

  if (input.channels != ck.config.image_channels)
    throw ConfigError("input has " + std::to_string(input.channels) +
                      " channels but the checkpoint expects " +
                      std::to_string(ck.config.image_channels));

  ImageBuffer clean = input;
  double used_sigma = 0.0;
  if (sigma >= 0.0) {
    Rng rng = Rng::keyed(seed < 0 ? 0 : static_cast<std::uint64_t>(seed), 0xde);
    auto [noisy, s] = add_awgn(input, NoiseSpec::fixed(sigma), rng);
    input = std::move(noisy);
    used_sigma = s;
  }

  const Tensor out = ctnet_apply(ck.config, ck.params, image_to_tensor(input));
  const ImageBuffer denoised = quantize(tensor_to_image(out));
  save_image(denoised, out_path);

  if (sigma >= 0.0) {
    std::cout << "sigma=" << used_sigma << " noisy_psnr=" << format_db(psnr(quantize(input), clean))
              << " denoised_psnr=" << format_db(psnr(denoised, clean)) << "\n";
  }
  std::cerr << "wrote " << out_path << "\n";
  return 0;
}

// --- eval ----------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& sigmas_csv, const std::string& out_csv,
             const std::string& dataset_name, std::int64_t seed, int threads) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const std::vector<double> sigmas = parse_sigma_list(sigmas_csv);
  const auto images = load_named_images(load_manifest(manifest_path));

  const std::vector<EvalRow> rows =
      evaluate(ck.config, ck.params, dataset_name, images, sigmas,
               seed < 0 ? 0 : static_cast<std::uint64_t>(seed), threads);
  write_eval_csv(rows, out_csv);

  for (double s : sigmas) {
    double sum = 0.0;
    int n = 0;
    for (const EvalRow& r : rows)
      if (r.sigma == s && std::isfinite(r.psnr_db)) {
        sum += r.psnr_db;
        ++n;
      }
    if (n > 0)
      std::cout << "sigma=" << s << " mean_psnr=" << format_db(sum / n) << " (" << n
                << " images)\n";
  }
  std::cerr << "wrote " << out_csv << "\n";
  return 0;
}

// --- inspect ---------------------------------------------------------------------

int cmd_inspect(const std::string& config_path, bool tiny, int height, int width) {
  ModelConfig cfg;
  if (tiny)
    cfg = ModelConfig::tiny();
  else if (!config_path.empty())
    cfg = load_run_config(config_path).model;
  cfg.validate();

  const std::vector<BlockCost> blocks = per_block_costs(cfg, height, width);
  std::int64_t params = 0, flops = 0;
  std::printf("%-10s %14s %16s\n", "block", "parameters", "flops");
  for (const BlockCost& b : blocks) {
    std::printf("%-10s %14lld %16lld\n", b.block.c_str(),
                static_cast<long long>(b.params), static_cast<long long>(b.flops));
    params += b.params;
    flops += b.flops;
  }
  std::printf("%-10s %14lld %16lld  (for %dx%d input)\n", "total",
              static_cast<long long>(params), static_cast<long long>(flops), height,
              width);

  const ModelConfig reference;  // paper-scale defaults
  if (cfg.width == reference.width && cfg.window == reference.window &&
      cfg.heads == reference.heads && !cfg.disable_tm_in_sb && !cfg.disable_fms &&
      !cfg.disable_itm && !cfg.serial_only) {
    std::printf("published figures for this architecture: 49.03M parameters, "
                "6.91G flops; this build: %.2fM / %.2fG\n",
                static_cast<double>(params) / 1e6, static_cast<double>(flops) / 1e9);
  }
  return 0;
}

// --- gradcheck ----------------------------------------------------------------------

int cmd_gradcheck(const std::string& config_path, bool tiny, double tol, int coords,
                  std::int64_t seed_arg) {
  ModelConfig cfg = tiny || config_path.empty() ? ModelConfig::tiny()
                                                : load_run_config(config_path).model;
  cfg.validate();
  const std::uint64_t seed = seed_arg < 0 ? 7 : static_cast<std::uint64_t>(seed_arg);

  const int hw = 2 * cfg.window;
  Rng rng = Rng::keyed(seed, 0x6763);
  Tensor noisy({1, cfg.image_channels, hw, hw});
  Tensor clean({1, cfg.image_channels, hw, hw});
  for (std::int64_t i = 0; i < noisy.size(); ++i) noisy[i] = rng.uniform();
  for (std::int64_t i = 0; i < clean.size(); ++i) clean[i] = rng.uniform();

  const ParamMap params = init_params(cfg, seed + 1);
  GradCheckProblem problem;
  problem.eval = [&](const ParamMap& p) { return model_loss(cfg, p, noisy, clean); };
  problem.grad = [&](const ParamMap& p) {
    return model_loss_grads(cfg, p, noisy, clean).grads;
  };

  Rng coord_rng = Rng::keyed(seed, 0x636f);
  const std::vector<Coordinate> cs =
      sample_coordinates(params, static_cast<std::size_t>(coords), coord_rng);
  const FiniteDiffReport report = finite_diff_check(problem, params, cs);

  std::printf("checked %zu coordinates (%zu skipped at kinks), max rel err %.3e, tol %.1e\n",
              report.checked, report.skipped, report.max_rel_err, tol);
  if (const FiniteDiffEntry* w = report.worst())
    std::printf("worst: %s[%lld] analytic %.10e numeric %.10e\n", w->coord.param.c_str(),
                static_cast<long long>(w->coord.index), w->analytic, w->numeric);
  if (!report.passed(tol)) {
    std::fprintf(stderr, "gradient check FAILED\n");
    return kExitNumeric;
  }
  std::printf("gradient check passed\n");
  return 0;
}

// --- cka ------------------------------------------------------------------------------

int cmd_cka(const std::string& ckpt_path, const std::string& images_dir,
            const std::string& out_csv, const std::string& heatmap) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  ManifestBuild mb = build_manifest({images_dir});
  for (const std::string& err : mb.errors) std::cerr << "skipping " << err << "\n";
  if (mb.entries.empty()) throw IoError("no readable images under " + images_dir);

  std::vector<ImageBuffer> probes;
  for (const ManifestEntry& e : mb.entries) {
    ImageBuffer img = load_image(e.path);
    if (img.channels != ck.config.image_channels) {
      std::cerr << "skipping " << e.path << ": channel mismatch\n";
      continue;
    }
    probes.push_back(std::move(img));
  }
  if (probes.empty()) throw IoError("no probe images with matching channels");

  const CkaProfile profile = cka_profile(ck.config, ck.params, probes);
  write_cka_csv(profile, out_csv);
  if (!heatmap.empty()) write_cka_heatmap_pgm(profile, heatmap);

  for (const std::string& name : profile.degenerate)
    std::cerr << "zero-variance layer excluded: " << name << "\n";
  std::cerr << "wrote " << out_csv << " (" << profile.layers.size() << " layers)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CTNet denoising engine"};
  app.require_subcommand(1);

  TrainArgs targs;
  CLI::App* train_cmd = app.add_subcommand("train", "train a denoiser");
  train_cmd->add_option("--config", targs.config_path, "run config JSON");
  train_cmd->add_option("--data", targs.data_manifest, "training manifest JSON")
      ->required();
  train_cmd->add_option("--val", targs.val_manifest, "validation manifest JSON");
  train_cmd->add_option("--out", targs.out_dir, "output directory");
  train_cmd->add_flag("--tiny", targs.tiny, "desk-scale preset (width 8, window 4)");
  train_cmd->add_option("--seed", targs.seed, "run seed");
  train_cmd->add_option("--sigma", targs.sigma, "fixed noise sigma (8-bit units)");
  train_cmd->add_option("--blind", targs.blind, "blind noise range LO HI")
      ->expected(2);
  train_cmd->add_option("--epochs", targs.epochs, "override epoch count");
  train_cmd->add_option("--steps", targs.steps, "stop after this many steps");
  train_cmd->add_option("--lr", targs.lr, "override initial learning rate");

  std::string ckpt, in_path, out_path;
  double dn_sigma = -1.0;
  std::int64_t dn_seed = -1;
  CLI::App* denoise_cmd = app.add_subcommand("denoise", "denoise one image");
  denoise_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  denoise_cmd->add_option("--in", in_path, "input image")->required();
  denoise_cmd->add_option("--out", out_path, "output image")->required();
  denoise_cmd->add_option("--sigma", dn_sigma,
                          "synthesize noise at this sigma first and report PSNR");
  denoise_cmd->add_option("--seed", dn_seed, "noise seed");

  std::string ev_ckpt, ev_manifest, ev_sigmas = "15,25,50", ev_out, ev_name = "dataset";
  std::int64_t ev_seed = -1;
  int ev_threads = 0;
  CLI::App* eval_cmd = app.add_subcommand("eval", "PSNR table over a dataset");
  eval_cmd->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--dataset", ev_manifest, "dataset manifest JSON")->required();
  eval_cmd->add_option("--sigmas", ev_sigmas, "comma-separated sigma list");
  eval_cmd->add_option("--out", ev_out, "output CSV")->required();
  eval_cmd->add_option("--name", ev_name, "dataset name for the CSV");
  eval_cmd->add_option("--seed", ev_seed, "noise seed");
  eval_cmd->add_option("--threads", ev_threads, "worker threads (0 = auto)");

  std::string in_config;
  bool in_tiny = false;
  int in_h = 48, in_w = 48;
  CLI::App* inspect_cmd = app.add_subcommand("inspect", "parameter and flop counts");
  inspect_cmd->add_option("--config", in_config, "run config JSON");
  inspect_cmd->add_flag("--tiny", in_tiny, "desk-scale preset");
  inspect_cmd->add_option("--height", in_h, "input height for flop estimate");
  inspect_cmd->add_option("--width", in_w, "input width for flop estimate");

  std::string gc_config;
  bool gc_tiny = false;
  double gc_tol = 1e-4;
  int gc_coords = 100;
  std::int64_t gc_seed = -1;
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc_cmd->add_option("--config", gc_config, "run config JSON");
  gc_cmd->add_flag("--tiny", gc_tiny, "desk-scale preset (default)");
  gc_cmd->add_option("--tol", gc_tol, "max relative error");
  gc_cmd->add_option("--coords", gc_coords, "parameter coordinates to probe");
  gc_cmd->add_option("--seed", gc_seed, "seed");

  std::string ck_ckpt, ck_images, ck_out, ck_heatmap;
  CLI::App* cka_cmd = app.add_subcommand("cka", "layer similarity profile");
  cka_cmd->add_option("--ckpt", ck_ckpt, "checkpoint file")->required();
  cka_cmd->add_option("--images", ck_images, "directory of probe images")->required();
  cka_cmd->add_option("--out", ck_out, "output CSV")->required();
  cka_cmd->add_option("--heatmap", ck_heatmap, "optional PGM heatmap path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(targs);
    if (denoise_cmd->parsed())
      return cmd_denoise(ckpt, in_path, out_path, dn_sigma, dn_seed);
    if (eval_cmd->parsed())
      return cmd_eval(ev_ckpt, ev_manifest, ev_sigmas, ev_out, ev_name, ev_seed,
                      ev_threads);
    if (inspect_cmd->parsed()) return cmd_inspect(in_config, in_tiny, in_h, in_w);
    if (gc_cmd->parsed())
      return cmd_gradcheck(gc_config, gc_tiny, gc_tol, gc_coords, gc_seed);
    if (cka_cmd->parsed()) return cmd_cka(ck_ckpt, ck_images, ck_out, ck_heatmap);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitConfig;
}
