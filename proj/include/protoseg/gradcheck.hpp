// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "protoseg/autograd.hpp"

namespace protoseg {

struct GradientReport {
  std::vector<double> per_input_rel_error;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  /// Coordinates discarded by `skip_kinks`.
  std::size_t skipped_kinks = 0;
  std::string diagnostic;
};

struct GradientCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-3;
  /// Upper bound on checked coordinates per input; 0 checks every element.
  /// Sampled coordinates are drawn with a fixed seed.
  std::size_t max_elements_per_input = 0;
  std::uint64_t sample_seed = 7;
  /// Skip coordinates whose forward and backward one-sided slopes disagree by
  /// more than `tolerance` (the step straddles a ReLU or max-pool switch) and
  /// draw a replacement coordinate instead.
  bool skip_kinks = false;
};

/// Scalar-valued map over a list of differentiable leaves.
using ScalarFunction = std::function<Var(const std::vector<Var>&)>;

/// Compares reverse-mode gradients of `fn` at `inputs` against central finite
/// differences. Relative error per element is |a - f| / max(|a|, |f|, 1e-8).
GradientReport gradient_check(const ScalarFunction& fn, const std::vector<Tensor>& inputs,
                              const GradientCheckOptions& options = {});

/// Same, but perturbs existing leaves in place (e.g. model parameters) and
/// restores them afterwards. `fn` takes no arguments and reads the leaves.
GradientReport gradient_check_leaves(const std::function<Var()>& fn, std::vector<Var> leaves,
                                     const GradientCheckOptions& options = {});

}  // namespace protoseg
