#pragma once

#include <functional>
#include <string>

#include "dtl/graph.hpp"
#include "dtl/params.hpp"

namespace dtl {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    long checked_scalars = 0;
};

// Central-difference check of backward() against the recorded loss. `build`
// records the loss in a fresh f64 graph, reading weights through
// Graph::use() so perturbations are picked up on re-evaluation.
// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const std::function<NodeId(Graph&)>& build, ParamStore& params,
                           double eps = 1e-5);

}  // namespace dtl
