#pragma once

#include <cstdint>

#include "dtl/graph.hpp"
#include "dtl/params.hpp"

namespace dtl {

enum class CSNVariant { DTL, DTLplus };

struct CSNConfig {
    long d_prime = 2;       // rank of each a_i c_i pair
    long inject_from = 7;   // M, 1-based; i >= M receives the side state
    double beta = 100.0;    // Swish sharpness, fixed
    CSNVariant variant = CSNVariant::DTL;
    long kernel = 3;        // shared depthwise conv side, DTL+ only

    // M = n_blocks+1 degenerates to "never inject"
    void validate(long n_blocks) const;
};

// Creates the per-block low-rank pairs (a_i, c_i) and, for DTL+, the shared
// depthwise kernel. a_i ~ U(-1/sqrt(d), 1/sqrt(d)); c_i and the conv bias are
// exactly zero so the side path is an identity map at initialization.
void csn_init(const CSNConfig& cfg, long embed_dim, long n_blocks, std::uint64_t seed,
              ParamStore& out, DType dtype = DType::F32);

// h_next = h + (z a) c, associated left-to-right so the d x d product is
// never materialized.
NodeId csn_step(Graph& g, NodeId h, NodeId z, const Param& a, const Param& c);

// Adds theta(h) (DTL) or g(theta(h)) (DTL+) onto z_next when i >= M;
// otherwise returns z_next itself, no compute. For DTL+ the conv runs on the
// patch tokens reshaped to their sqrt(n) x sqrt(n) grid; the cls row (row 0)
// bypasses the conv.
NodeId csn_inject(Graph& g, NodeId z_next, NodeId h_next, int i, const CSNConfig& cfg,
                  const ParamStore& weights);

// Running side state for a (possibly multi-stage) backbone. Taps must match
// the current stage dimensionality; crossing a stage boundary requires an
// explicit stage_reset, which re-zeroes h at the new shape.
class CSNStream {
  public:
    CSNStream(Graph& g, long n_tokens, long d);

    void stage_reset(Graph& g, long n_tokens, long d);
    NodeId step(Graph& g, NodeId z, const Param& a, const Param& c);

    NodeId h() const { return h_; }
    long dim() const { return d_; }

  private:
    NodeId h_ = -1;
    long n_tokens_ = 0;
    long d_ = 0;
};

}  // namespace dtl
