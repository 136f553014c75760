#include "ctnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ctnet/error.hpp"

namespace ctnet {

const FiniteDiffEntry* FiniteDiffReport::worst() const {
  const FiniteDiffEntry* w = nullptr;
  for (const auto& e : entries)
    if (!e.skipped && (!w || e.rel_err > w->rel_err)) w = &e;
  return w;
}

FiniteDiffReport finite_diff_check(const GradCheckProblem& problem, const ParamMap& at,
                                   const std::vector<Coordinate>& coords, double h,
                                   double kink_tol) {
  FiniteDiffReport report;
  const double f0 = problem.eval(at);
  ParamMap analytic = problem.grad(at);
  ParamMap probe = at;

  for (const Coordinate& c : coords) {
    auto it = probe.find(c.param);
    if (it == probe.end())
      throw ConfigError("finite_diff_check: unknown parameter '" + c.param + "'");
    Tensor& t = it->second;
    if (c.index < 0 || c.index >= t.size())
      throw ConfigError("finite_diff_check: coordinate out of range in '" + c.param + "'");

    const double saved = t[c.index];
    t[c.index] = saved + h;
    const double fp = problem.eval(probe);
    t[c.index] = saved - h;
    const double fm = problem.eval(probe);
    t[c.index] = saved;

    FiniteDiffEntry e;
    e.coord = c;
    e.numeric = (fp - fm) / (2.0 * h);
    e.analytic = analytic.at(c.param)[c.index];

    const double slope_fwd = (fp - f0) / h;
    const double slope_bwd = (f0 - fm) / h;
    const double slope_scale = std::max({std::abs(slope_fwd), std::abs(slope_bwd), 1.0});
    if (std::abs(slope_fwd - slope_bwd) > kink_tol * slope_scale) {
      e.skipped = true;
      report.skipped++;
    } else {
      e.rel_err = std::abs(e.analytic - e.numeric) /
                  std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-8});
      report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
      report.checked++;
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

std::vector<Coordinate> sample_coordinates(const ParamMap& params, std::size_t count,
                                           Rng& rng) {
  std::vector<std::pair<std::string, std::int64_t>> spans;
  std::int64_t total = 0;
  for (const auto& [name, t] : params) {
    spans.emplace_back(name, t.size());
    total += t.size();
  }
  if (total == 0) return {};

  std::vector<Coordinate> out;
  std::set<std::pair<std::string, std::int64_t>> seen;
  const bool exhaustive = static_cast<std::int64_t>(count) >= total;
  while (out.size() < count) {
    std::int64_t flat = static_cast<std::int64_t>(rng.uniform_below(
        static_cast<std::uint64_t>(total)));
    for (const auto& [name, n] : spans) {
      if (flat < n) {
        if (exhaustive || seen.insert({name, flat}).second)
          out.push_back({name, flat});
        break;
      }
      flat -= n;
    }
  }
  return out;
}

std::vector<Coordinate> all_coordinates(const ParamMap& params) {
  std::vector<Coordinate> out;
  for (const auto& [name, t] : params)
    for (std::int64_t i = 0; i < t.size(); ++i) out.push_back({name, i});
  return out;
}

}  // namespace ctnet
