#include "dtl/csn.hpp"

#include <cmath>
#include <stdexcept>

namespace dtl {

void CSNConfig::validate(long n_blocks) const {
    if (inject_from < 1 || inject_from > n_blocks + 1)
        throw std::invalid_argument("CSNConfig: M=" + std::to_string(inject_from) +
                                    " outside [1," + std::to_string(n_blocks + 1) + "]");
    if (d_prime < 1) throw std::invalid_argument("CSNConfig: d_prime must be >= 1");
    if (beta <= 0.0) throw std::invalid_argument("CSNConfig: beta must be positive");
    if (variant == CSNVariant::DTLplus && (kernel < 1 || kernel % 2 == 0))
        throw std::invalid_argument("CSNConfig: conv kernel must be odd, got " +
                                    std::to_string(kernel));
}

void csn_init(const CSNConfig& cfg, long embed_dim, long n_blocks, std::uint64_t seed,
              ParamStore& out, DType dtype) {
    cfg.validate(n_blocks);
    Rng rng(seed);
    double bound = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    DType dt = dtype;
    for (long i = 1; i <= n_blocks; ++i) {
        Tensor a({embed_dim, cfg.d_prime}, dt);
        for (long j = 0; j < a.numel(); ++j) a[j] = rng.uniform(-bound, bound);
        a.quantize();
        out.add("csn.a." + std::to_string(i), std::move(a), true);
        out.add("csn.c." + std::to_string(i), Tensor::zeros({cfg.d_prime, embed_dim}, dt), true);
    }
    if (cfg.variant == CSNVariant::DTLplus) {
        Tensor k({embed_dim, cfg.kernel, cfg.kernel}, dt);
        for (long j = 0; j < k.numel(); ++j) k[j] = rng.uniform(-bound, bound);
        k.quantize();
        out.add("csn.g.kernel", std::move(k), true);
        out.add("csn.g.bias", Tensor::zeros({embed_dim}, dt), true);
    }
}

NodeId csn_step(Graph& g, NodeId h, NodeId z, const Param& a, const Param& c) {
    NodeId t = g.matmul(z, g.use(a));
    return g.add(h, g.matmul(t, g.use(c)));
}

NodeId csn_inject(Graph& g, NodeId z_next, NodeId h_next, int i, const CSNConfig& cfg,
                  const ParamStore& weights) {
    if (i < cfg.inject_from) return z_next;
    NodeId gated = g.swish(h_next, cfg.beta);
    if (cfg.variant == CSNVariant::DTL) return g.add(z_next, gated);

    const std::vector<long>& shape = g.value(gated).shape();
    long n = shape[0] - 1, d = shape[1];
    long side = static_cast<long>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n)
        throw std::invalid_argument("csn_inject: " + std::to_string(n) +
                                    " patch tokens do not form a square grid");
    NodeId cls = g.split_tokens(gated, 0, 1);
    NodeId patches = g.split_tokens(gated, 1, n + 1);
    NodeId grid = g.reshape(g.transpose(patches), {d, side, side});
    NodeId conv = g.depthwise_conv2d(grid, g.use(weights.get("csn.g.kernel")),
                                     g.use(weights.get("csn.g.bias")));
    NodeId back = g.transpose(g.reshape(conv, {d, n}));
    return g.add(z_next, g.concat_tokens(cls, back));
}

CSNStream::CSNStream(Graph& g, long n_tokens, long d) { stage_reset(g, n_tokens, d); }

void CSNStream::stage_reset(Graph& g, long n_tokens, long d) {
    n_tokens_ = n_tokens;
    d_ = d;
    h_ = g.leaf(Tensor::zeros({n_tokens, d}, g.dtype()));
}

NodeId CSNStream::step(Graph& g, NodeId z, const Param& a, const Param& c) {
    const std::vector<long>& zs = g.value(z).shape();
    if (zs != std::vector<long>{n_tokens_, d_})
        throw std::invalid_argument("CSNStream::step: tap " + shape_str(zs) +
                                    " does not match stage shape [" + std::to_string(n_tokens_) +
                                    "," + std::to_string(d_) + "]; stage_reset required");
    h_ = csn_step(g, h_, z, a, c);
    return h_;
}

}  // namespace dtl
