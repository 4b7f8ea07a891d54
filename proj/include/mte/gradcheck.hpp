#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mte/tensor.hpp"

namespace mte {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;  // "<input>[<element>]" of the largest error
    Index checked = 0;

    bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
    double step = 1e-5;
    // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    double floor = 1e-3;
    // Check at most this many elements per input (evenly strided); 0 checks all.
    Index max_elements_per_input = 0;
};

// Compares reverse-mode gradients against central finite differences.
// `loss_fn` must recompute the scalar loss from the current values of `inputs`.
GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss_fn,
                                std::vector<std::pair<std::string, Tensor<double>>> inputs,
                                const GradCheckOptions& options = {});

struct GradSuiteEntry {
    std::string name;
    GradCheckResult result;
};

// Finite-difference checks of every differentiable op, the three base losses, the
// supervised loss and the full symmetrized pretraining loss on a depth-1, D=16,
// M=2, K=2, N=4 model (64-bit throughout).
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 0, const GradCheckOptions& options = {});

}  // namespace mte
