#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ctnet/rng.hpp"
#include "ctnet/tensor.hpp"

namespace ctnet {

// A deterministic scalar function of a parameter set, together with the
// analytic gradients claimed for it. The two callables must be independent
// only in the sense that `eval` never touches gradient machinery; the whole
// point of the check is to compare `grad` against central differences of
// `eval`.
struct GradCheckProblem {
  std::function<double(const ParamMap&)> eval;
  std::function<ParamMap(const ParamMap&)> grad;
};

struct Coordinate {
  std::string param;
  std::int64_t index = 0;
};

struct FiniteDiffEntry {
  Coordinate coord;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
  bool skipped = false;  // one-sided slopes disagree: a nondifferentiable point
};

struct FiniteDiffReport {
  std::vector<FiniteDiffEntry> entries;
  double max_rel_err = 0.0;  // over non-skipped coordinates
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed(double tol) const { return checked > 0 && max_rel_err < tol; }
  const FiniteDiffEntry* worst() const;
};

// Central-difference check of `problem.grad` at `at`, over the given
// coordinates. rel_err = |ga - gn| / max(|ga|, |gn|, 1e-8). Coordinates where
// the forward and backward one-sided slopes disagree beyond `kink_tol`
// (relative) are reported as skipped instead of failed; that is what a kink
// of relu looks like under finite differences.
FiniteDiffReport finite_diff_check(const GradCheckProblem& problem, const ParamMap& at,
                                   const std::vector<Coordinate>& coords,
                                   double h = 1e-5, double kink_tol = 1e-2);

// Uniformly samples `count` parameter coordinates (without replacement while
// possible) for spot checks on large models.
std::vector<Coordinate> sample_coordinates(const ParamMap& params, std::size_t count,
                                           Rng& rng);

// Every coordinate of every parameter; for small problems.
std::vector<Coordinate> all_coordinates(const ParamMap& params);

}  // namespace ctnet
