#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctnet/image.hpp"
#include "ctnet/model.hpp"
#include "ctnet/tensor.hpp"

namespace ctnet {

double image_mse(const ImageBuffer& a, const ImageBuffer& b);

// 10 * log10(peak^2 / MSE); +infinity for identical images.
double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak = 1.0);

// Fixed-point rendering for CSV; infinity becomes the string "inf".
std::string format_db(double db);

struct EvalRow {
  std::string dataset;
  double sigma = 0.0;
  std::string image;
  double psnr_db = 0.0;
};

// Per-image PSNR of the model output (quantized to 8 bits) against the clean
// image, over every (image, sigma) pair. Noise is keyed by (seed, image
// index, sigma index) so reruns are identical; images are processed in
// parallel, results assembled in order.
std::vector<EvalRow> evaluate(const ModelConfig& cfg, const ParamMap& params,
                              const std::string& dataset_name,
                              const std::vector<std::pair<std::string, ImageBuffer>>& images,
                              const std::vector<double>& sigmas, std::uint64_t seed,
                              int threads = 0);

void write_eval_csv(const std::vector<EvalRow>& rows, const std::string& path);

// Linear centered kernel alignment between two activation matrices holding
// the same samples: |Yc' Xc|_F^2 / (|Xc' Xc|_F |Yc' Yc|_F) with columns
// centered. Throws NumericError when either matrix has zero variance.
double linear_cka(const Tensor& x, const Tensor& y);

inline constexpr double kCkaThreshold = 0.6;

struct CkaProfile {
  std::vector<std::string> layers;         // traced layers with usable variance
  Tensor matrix;                           // [L, L] pairwise linear CKA
  std::vector<double> ratio_below;         // share of *other* layers with CKA < 0.6
  std::vector<std::string> degenerate;     // zero-variance layers, excluded
};

// Runs traced forwards over the probe images, flattens each traced layer to
// [pixels * images, channels], and assembles the pairwise CKA matrix.
CkaProfile cka_profile(const ModelConfig& cfg, const ParamMap& params,
                       const std::vector<ImageBuffer>& probes);

// CSV with a header row/column of layer names; last column is the ratio.
void write_cka_csv(const CkaProfile& profile, const std::string& path);

// Grayscale rendering of the matrix (white = 1) for quick visual inspection.
void write_cka_heatmap_pgm(const CkaProfile& profile, const std::string& path,
                           int cell = 8);

// Worker count for parallel evaluation: CTNET_THREADS caps it when set.
int worker_thread_count(int requested = 0);

}  // namespace ctnet
