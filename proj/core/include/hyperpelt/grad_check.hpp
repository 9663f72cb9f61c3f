#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hyperpelt/tensor.hpp"

namespace hyperpelt {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_element = 0;
};

struct GradCheckReport {
    bool pass = false;
    double tol = 0.0;
    std::string worst_param;
    double worst_rel_err = 0.0;
    std::vector<GradCheckEntry> entries;

    std::string summary() const;
};

// A closure builds the loss on a fresh graph from the captured leaf params.
using LossClosure = std::function<Tensor(Graph&)>;

// Instrumentation hook applied to each parameter's autodiff gradient before
// comparison; used by tests to simulate a corrupted backward rule.
using GradTamper = std::function<void(const std::string&, std::span<float>)>;

// Compares reverse-mode gradients against central finite differences
// evaluated on a float64 replay of the recorded graph. The relative error
// per element is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8); the check
// passes iff every parameter stays below `tol`.
//
// The closure is evaluated twice up front; differing results raise
// determinism_error.
GradCheckReport grad_check(const LossClosure& closure,
                           const std::vector<NamedTensor>& params,
                           double eps, double tol,
                           const GradTamper& tamper = nullptr);

} // namespace hyperpelt
