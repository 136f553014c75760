#include "ctnet/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "ctnet/data.hpp"
#include "ctnet/error.hpp"

namespace ctnet {

double image_mse(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw ShapeError("image_mse: shape mismatch");
  double ss = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    ss += d * d;
  }
  return ss / static_cast<double>(a.values.size());
}

double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak) {
  const double m = image_mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

std::string format_db(double db) {
  if (std::isinf(db)) return "inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << db;
  return os.str();
}

int worker_thread_count(int requested) {
  int n = requested > 0 ? requested
                        : static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* cap = std::getenv("CTNET_THREADS")) {
    const int limit = std::atoi(cap);
    if (limit >= 1) n = std::min(n, limit);
  }
  return n;
}

std::vector<EvalRow> evaluate(const ModelConfig& cfg, const ParamMap& params,
                              const std::string& dataset_name,
                              const std::vector<std::pair<std::string, ImageBuffer>>& images,
                              const std::vector<double>& sigmas, std::uint64_t seed,
                              int threads) {
  if (images.empty()) throw ConfigError("evaluate: empty dataset");
  for (const auto& [name, img] : images)
    if (img.channels != cfg.image_channels)
      throw ConfigError("evaluate: image '" + name + "' has " +
                        std::to_string(img.channels) + " channels, model expects " +
                        std::to_string(cfg.image_channels));

  struct Job {
    std::size_t image_idx;
    std::size_t sigma_idx;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t s = 0; s < sigmas.size(); ++s) jobs.push_back({i, s});

  std::vector<EvalRow> rows(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::string error;
  std::mutex error_mu;

  auto worker = [&] {
    while (true) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size() || failed.load()) break;
      try {
        const auto& [name, clean] = images[jobs[j].image_idx];
        const double sigma = sigmas[jobs[j].sigma_idx];
        Rng rng = Rng::keyed(seed, static_cast<std::uint64_t>(jobs[j].image_idx),
                             static_cast<std::uint64_t>(jobs[j].sigma_idx));
        auto [noisy, used] = add_awgn(clean, NoiseSpec::fixed(sigma), rng);
        (void)used;
        const Tensor out = ctnet_apply(cfg, params, image_to_tensor(noisy));
        const double db = psnr(quantize(tensor_to_image(out)), clean);
        rows[j] = {dataset_name, sigma, name, db};
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mu);
        failed.store(true);
        if (error.empty()) error = e.what();
      }
    }
  };

  const int n_threads = std::min<int>(worker_thread_count(threads),
                                      static_cast<int>(jobs.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failed.load()) throw NumericError("evaluate failed: " + error);
  return rows;
}

void write_eval_csv(const std::vector<EvalRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "dataset,sigma,image,psnr\n";
  for (const EvalRow& r : rows) {
    std::ostringstream sig;
    sig << r.sigma;
    out << r.dataset << "," << sig.str() << "," << r.image << ","
        << format_db(r.psnr_db) << "\n";
  }
}

namespace {

// Column-centered cross-covariance Frobenius norm squared: |Yc' Xc|_F^2.
double centered_cross_norm2(const Tensor& x, const Tensor& y) {
  const int n = x.dim(0);
  const int fx = x.dim(1), fy = y.dim(1);
  std::vector<double> mx(static_cast<std::size_t>(fx), 0.0);
  std::vector<double> my(static_cast<std::size_t>(fy), 0.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < fx; ++c) mx[static_cast<std::size_t>(c)] += x[r * fx + c];
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < fy; ++c) my[static_cast<std::size_t>(c)] += y[r * fy + c];
  for (double& v : mx) v /= n;
  for (double& v : my) v /= n;

  double total = 0.0;
  for (int a = 0; a < fy; ++a)
    for (int b = 0; b < fx; ++b) {
      double dot = 0.0;
      for (int r = 0; r < n; ++r)
        dot += (y[r * fy + a] - my[static_cast<std::size_t>(a)]) *
               (x[r * fx + b] - mx[static_cast<std::size_t>(b)]);
      total += dot * dot;
    }
  return total;
}

}  // namespace

double linear_cka(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2)
    throw ShapeError("linear_cka: activation matrices must be [samples, features]");
  if (x.dim(0) != y.dim(0))
    throw ShapeError("linear_cka: sample counts differ");
  if (x.dim(0) < 2) throw ShapeError("linear_cka: needs at least 2 samples");

  const double sxx = centered_cross_norm2(x, x);
  const double syy = centered_cross_norm2(y, y);
  if (sxx == 0.0 || syy == 0.0)
    throw NumericError("linear_cka: zero-variance activation matrix");
  const double sxy = centered_cross_norm2(x, y);
  return sxy / std::sqrt(sxx * syy);
}

namespace {

Tensor flatten_activation(const Tensor& t) {
  // [N,C,H,W] -> [N*H*W, C]
  const int n = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  Tensor out({n * h * w, c});
  std::int64_t row = 0;
  for (int in = 0; in < n; ++in)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++row)
        for (int ch = 0; ch < c; ++ch)
          out[row * c + ch] =
              t[((static_cast<std::int64_t>(in) * c + ch) * h + y) * w + x];
  return out;
}

Tensor append_rows(const Tensor& acc, const Tensor& more) {
  if (acc.empty()) return more;
  if (acc.dim(1) != more.dim(1)) throw ShapeError("append_rows: feature dims differ");
  Tensor out({acc.dim(0) + more.dim(0), acc.dim(1)});
  std::copy(acc.data(), acc.data() + acc.size(), out.data());
  std::copy(more.data(), more.data() + more.size(), out.data() + acc.size());
  return out;
}

}  // namespace

CkaProfile cka_profile(const ModelConfig& cfg, const ParamMap& params,
                       const std::vector<ImageBuffer>& probes) {
  if (probes.empty()) throw ConfigError("cka_profile: no probe images");

  const std::vector<std::string> names = trace_names(cfg);
  std::map<std::string, Tensor> stacks;
  for (const ImageBuffer& img : probes) {
    ActivationTrace trace;
    (void)ctnet_apply(cfg, params, image_to_tensor(img), &trace);
    for (const auto& [name, value] : trace.entries())
      stacks[name] = append_rows(stacks.count(name) ? stacks[name] : Tensor(),
                                 flatten_activation(value));
  }

  CkaProfile profile;
  std::vector<Tensor> mats;
  for (const std::string& name : names) {
    const Tensor& m = stacks.at(name);
    if (centered_cross_norm2(m, m) == 0.0) {
      profile.degenerate.push_back(name);
      continue;
    }
    profile.layers.push_back(name);
    mats.push_back(m);
  }
  const int l = static_cast<int>(profile.layers.size());
  if (l < 2) {
    std::string msg = "cka_profile: fewer than 2 traced layers have usable variance (" +
                      std::to_string(profile.degenerate.size()) +
                      " zero-variance layers";
    for (std::size_t i = 0; i < profile.degenerate.size() && i < 4; ++i)
      msg += (i ? ", " : ": ") + profile.degenerate[i];
    throw ConfigError(msg + ")");
  }

  profile.matrix = Tensor({l, l});
  for (int i = 0; i < l; ++i) {
    profile.matrix[i * l + i] = 1.0;
    for (int j = i + 1; j < l; ++j) {
      const double v = linear_cka(mats[static_cast<std::size_t>(i)],
                                  mats[static_cast<std::size_t>(j)]);
      profile.matrix[i * l + j] = v;
      profile.matrix[j * l + i] = v;
    }
  }

  profile.ratio_below.resize(static_cast<std::size_t>(l), 0.0);
  for (int i = 0; i < l; ++i) {
    int below = 0;
    for (int j = 0; j < l; ++j)
      if (j != i && profile.matrix[i * l + j] < kCkaThreshold) ++below;
    profile.ratio_below[static_cast<std::size_t>(i)] =
        static_cast<double>(below) / static_cast<double>(l - 1);
  }
  return profile;
}

void write_cka_csv(const CkaProfile& profile, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  const int l = static_cast<int>(profile.layers.size());
  out << "layer";
  for (const std::string& n : profile.layers) out << "," << n;
  out << ",ratio_below_0.6\n";
  out << std::setprecision(10);
  for (int i = 0; i < l; ++i) {
    out << profile.layers[static_cast<std::size_t>(i)];
    for (int j = 0; j < l; ++j) out << "," << profile.matrix[i * l + j];
    out << "," << profile.ratio_below[static_cast<std::size_t>(i)] << "\n";
  }
}

void write_cka_heatmap_pgm(const CkaProfile& profile, const std::string& path, int cell) {
  const int l = static_cast<int>(profile.layers.size());
  if (cell < 1) cell = 1;
  ImageBuffer img = ImageBuffer::blank(l * cell, l * cell, 1);
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) {
      const double v = std::clamp(profile.matrix[i * l + j], 0.0, 1.0);
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x) img.at(i * cell + y, j * cell + x, 0) = v;
    }
  save_image(img, path);
}

}  // namespace ctnet
