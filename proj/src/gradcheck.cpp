// SPDX-License-Identifier: Apache-2.0
#include "protoseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "protoseg/error.hpp"

namespace protoseg {

namespace {

// Visiting order; sampled inputs are shuffled so replacements for skipped
// coordinates come from the same draw.
std::vector<std::size_t> coordinate_order(std::size_t numel, const GradientCheckOptions& opt,
                                          std::size_t input_index) {
  std::vector<std::size_t> idx(numel);
  std::iota(idx.begin(), idx.end(), 0);
  if (opt.max_elements_per_input == 0 || numel <= opt.max_elements_per_input) return idx;
  std::mt19937_64 rng(opt.sample_seed + 0x9E3779B97F4A7C15ULL * (input_index + 1));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

double scalar_of(const Var& v) {
  PROTOSEG_REQUIRE(v.value().numel() == 1, "gradient_check: function must be scalar-valued");
  return v.value()[0];
}

}  // namespace

GradientReport gradient_check_leaves(const std::function<Var()>& fn, std::vector<Var> leaves,
                                     const GradientCheckOptions& options) {
  GradientReport report;
  report.tolerance = options.tolerance;

  for (auto& l : leaves) l.zero_grad();
  Var out = fn();
  const double f0 = scalar_of(out);
  backward(out);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves) {
    analytic.push_back(l.grad());
    l.zero_grad();
  }

  std::ostringstream diag;
  bool finite = true;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (!analytic[i].all_finite()) {
      finite = false;
      diag << "input " << i << ": non-finite analytic gradient; ";
    }
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    Tensor& value = leaves[i].mutable_value();
    double input_worst = 0.0;
    std::size_t worst_at = 0;
    double worst_a = 0.0, worst_f = 0.0;
    const std::size_t limit =
        options.max_elements_per_input == 0 ? value.numel() : options.max_elements_per_input;
    std::size_t checked = 0;
    for (std::size_t e : coordinate_order(value.numel(), options, i)) {
      if (checked == limit) break;
      const double orig = value[e];
      value[e] = orig + options.step;
      double fp, fm;
      {
        NoGradGuard guard;
        fp = scalar_of(fn());
      }
      value[e] = orig - options.step;
      {
        NoGradGuard guard;
        fm = scalar_of(fn());
      }
      value[e] = orig;
      if (options.skip_kinks) {
        const double up = (fp - f0) / options.step, down = (f0 - fm) / options.step;
        if (std::abs(up - down) > options.tolerance * std::max({std::abs(up), std::abs(down), 1e-8})) {
          ++report.skipped_kinks;
          continue;
        }
      }
      ++checked;
      const double f = (fp - fm) / (2.0 * options.step);
      const double a = analytic[i][e];
      const double rel = std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-8});
      if (!(rel <= input_worst)) {
        input_worst = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        worst_at = e;
        worst_a = a;
        worst_f = f;
      }
    }
    if (checked == 0 && value.numel() > 0) {
      input_worst = std::numeric_limits<double>::infinity();
      diag << "input " << i << ": every coordinate straddles a kink; ";
    } else if (input_worst > options.tolerance) {
      diag << "input " << i << " element " << worst_at << ": analytic " << worst_a << " vs numeric "
           << worst_f << " (rel " << input_worst << "); ";
    }
    report.per_input_rel_error.push_back(input_worst);
    worst = std::max(worst, input_worst);
  }
  report.max_rel_error = finite ? worst : std::numeric_limits<double>::infinity();
  report.pass = finite && report.max_rel_error <= options.tolerance;
  report.diagnostic = diag.str();
  return report;
}

GradientReport gradient_check(const ScalarFunction& fn, const std::vector<Tensor>& inputs,
                              const GradientCheckOptions& options) {
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.emplace_back(t, true);
  return gradient_check_leaves([&] { return fn(leaves); }, leaves, options);
}

}  // namespace protoseg
