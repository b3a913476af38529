#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "iglab/tensor.hpp"

namespace iglab {

// Small fixed probe networks used to exercise the tape end to end.
// TanhMlpStopGrad inserts a stop-gradient after the first layer; parameters
// upstream of it are "blocked" and their defined sensitivity is zero, so the
// numeric side of the check holds their stopped activation fixed.
enum class ProbeNet { Linear, TanhMlp, TanhMlpStopGrad };

struct ParamCheck {
    std::string name;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::vector<ParamCheck> per_param;
};

// Compares tape gradients of a sum-of-squares loss against central finite
// differences at the given eps. Deterministic for a given seed.
GradCheckReport finite_diff_check(ProbeNet net, uint64_t seed, double eps);

}  // namespace iglab
