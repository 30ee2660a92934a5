#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmunet/tensor.hpp"

// Central finite-difference verification of backward rules, in double
// precision. Each check owns its leaves and a closure that rebuilds the loss
// graph from them, so the same closure serves the analytic sweep and every
// perturbed re-evaluation.
namespace mmunet::gradcheck {

struct Check {
    std::string name;
    double threshold = 1e-4;
    std::vector<TensorPtr<double>> leaves;
    std::function<TensorPtr<double>()> loss;
};

struct Result {
    std::string name;
    double max_rel_err = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) over the
// checked elements. Leaves larger than max_elems_per_leaf are sampled.
double max_rel_error(const Check& check, double step, index_t max_elems_per_leaf,
                     std::uint64_t sample_seed);

// The standard battery over every differentiable operator plus the composite
// blocks. only_name filters to a single check when non-empty.
std::vector<Result> run_suite(std::uint64_t seed, const std::string& only_name = "");

}  // namespace mmunet::gradcheck
