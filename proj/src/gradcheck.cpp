#include "dtl/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace dtl {

GradCheckResult grad_check(const std::function<NodeId(Graph&)>& build, ParamStore& params,
                           double eps) {
    if (!(eps > 0.0) || eps > 1e-2)
        throw std::invalid_argument("grad_check: eps must be in (0, 1e-2]");

    auto eval_loss = [&]() {
        Graph g(DType::F64);
        NodeId loss = build(g);
        return g.value(loss)[0];
    };

    Graph g(DType::F64);
    NodeId loss = build(g);
    if (g.dtype() != DType::F64)
        throw std::invalid_argument("grad_check: graph must be f64");
    GradStore grads = g.backward(loss);

    GradCheckResult result;
    for (Param* p : params.trainable()) {
        Tensor analytic = grads.count(p->name) ? grads[p->name] : Tensor::zeros(p->tensor.shape(), DType::F64);
        for (long i = 0; i < p->tensor.numel(); ++i) {
            double orig = p->tensor[i];
            p->tensor[i] = orig + eps;
            double lp = eval_loss();
            p->tensor[i] = orig - eps;
            double lm = eval_loss();
            p->tensor[i] = orig;
            double numeric = (lp - lm) / (2.0 * eps);
            double a = analytic[i];
            if (!std::isfinite(numeric) || !std::isfinite(a))
                throw std::runtime_error("grad_check: non-finite value at Param " + p->name);
            double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = p->name;
            }
            ++result.checked_scalars;
        }
    }
    return result;
}

}  // namespace dtl
