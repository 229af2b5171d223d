#include "omniflux/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "omniflux/errors.hpp"

namespace omniflux {

namespace {

std::vector<std::size_t> pick_entries(std::span<const double> analytic, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> all(analytic.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (limit == 0 || limit >= all.size()) return all;

  const std::size_t top = limit / 2;
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(top), all.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double fa = std::abs(analytic[a]), fb = std::abs(analytic[b]);
                      return fa != fb ? fa > fb : a < b;
                    });
  std::vector<std::size_t> picked(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(top));
  std::vector<std::size_t> rest(all.begin() + static_cast<std::ptrdiff_t>(top), all.end());
  std::shuffle(rest.begin(), rest.end(), rng);
  picked.insert(picked.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(limit - top));
  std::sort(picked.begin(), picked.end());
  return picked;
}

double evaluate(const LossFn& fn) {
  Graph graph;
  Tensor loss = fn(graph);
  return loss.item();
}

}  // namespace

GradCheckResult grad_check(const LossFn& fn, std::vector<Tensor> params, const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("grad_check: eps must be positive");
  for (auto& p : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: parameter does not require grad");
    p.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Graph graph;
    Tensor loss = fn(graph);
    graph.backward(loss);
    for (auto& p : params) {
      std::vector<double> g(p.numel(), 0.0);
      if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), g.begin());
      analytic.push_back(std::move(g));
      p.zero_grad();
    }
  }

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].data();
    for (std::size_t i : pick_entries(analytic[t], options.max_entries_per_tensor, rng)) {
      const double saved = values[i];
      values[i] = saved + options.eps;
      const double plus = evaluate(fn);
      values[i] = saved - options.eps;
      const double minus = evaluate(fn);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double err = std::abs(analytic[t][i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.entries_checked;
      if (err > result.max_rel_error || std::isnan(err)) {
        result.max_rel_error = std::isnan(err) ? INFINITY : err;
        result.worst_tensor = t;
        result.worst_index = i;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace omniflux
