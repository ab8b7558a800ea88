#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtl/graph.hpp"
#include "dtl/params.hpp"

namespace dtl {

struct ViTConfig {
    long n_blocks = 12;   // N
    long embed_dim = 64;  // d
    long heads = 4;
    long img = 32;
    long patch = 8;
    long mlp_ratio = 4;
    long n_classes = 10;
    DType dtype = DType::F32;

    long n_patches() const { return (img / patch) * (img / patch); }
    long n_tokens() const { return n_patches() + 1; }
    long grid() const { return img / patch; }
    void validate() const;

    static ViTConfig toy() { return ViTConfig{}; }
    // 2-block model small enough for finite-difference checks
    static ViTConfig micro() {
        ViTConfig c;
        c.n_blocks = 2;
        c.embed_dim = 8;
        c.heads = 2;
        c.img = 8;
        c.patch = 4;
        c.mlp_ratio = 2;
        c.n_classes = 3;
        c.dtype = DType::F64;
        return c;
    }
};

// Per-block rewiring points for the adapter strategies. Defaults pass
// everything through, which is the plain frozen backbone.
struct BlockHooks {
    virtual ~BlockHooks() = default;
    // x: LN1 output, base: x*W + b for the projection in question
    virtual NodeId q_proj(Graph&, int /*block*/, NodeId /*x*/, NodeId base) { return base; }
    virtual NodeId v_proj(Graph&, int /*block*/, NodeId /*x*/, NodeId base) { return base; }
    virtual NodeId ln1_out(Graph&, int /*block*/, NodeId y) { return y; }
    virtual NodeId ln2_out(Graph&, int /*block*/, NodeId y) { return y; }
    // after the o-projection / second FFN matmul, before the residual add
    virtual NodeId attn_out(Graph&, int /*block*/, NodeId y) { return y; }
    virtual NodeId ffn_out(Graph&, int /*block*/, NodeId y) { return y; }
    // x1: residual stream after the MHSA sublayer
    virtual NodeId block_out(Graph&, int /*block*/, NodeId /*x1*/, NodeId z_next) { return z_next; }
    virtual NodeId final_ln_out(Graph&, NodeId y) { return y; }
};

// Flattens [3,img,img] into the [n_patches, 3*patch*patch] matrix the patch
// projection consumes. Pure data prep, happens outside the graph.
Tensor image_to_patches(const Tensor& image, const ViTConfig& cfg);

// Toy pre-LN Vision Transformer. All weights live in a ParamStore so the
// adapter strategies can flip trainability and the manifest IO can walk them.
class ViTModel {
  public:
    ViTModel(ViTConfig cfg, std::uint64_t seed);

    const ViTConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // [3,img,img] image -> [n_tokens, d] tokens (cls first)
    NodeId patch_embed(Graph& g, const Tensor& image) const;
    // z_i -> z_{i+1}; i is 1-based in [1, N]
    NodeId block_forward(Graph& g, NodeId z, int i, BlockHooks* hooks = nullptr) const;
    // final LN + classification head over the cls row
    NodeId head_logits(Graph& g, NodeId tokens, long cls_row = 0, BlockHooks* hooks = nullptr) const;

    struct TapsResult {
        NodeId final_tokens = -1;
        std::vector<NodeId> taps;  // z_2 .. z_{N+1}
    };
    // Plain (adapter-free) forward returning every block-boundary output.
    TapsResult forward_with_taps(Graph& g, const Tensor& image) const;
    // Plain forward to logits.
    NodeId forward(Graph& g, const Tensor& image) const;

    void freeze_all();

  private:
    const Param& p(const std::string& name) const { return params_.get(name); }

    ViTConfig cfg_;
    ParamStore params_;
};

// ---- weight manifest IO (JSON index + raw little-endian buffer) ----

struct ManifestOptions {
    bool strict = true;  // unknown entries fail the load when true
};

// Writes every Param to `<path>.json` + `<path>.bin`. Round trip is bitwise.
void save_weights(const ParamStore& store, const std::string& path);
// Loads into existing Params; missing/mismatched names raise with an
// itemized list. Returns warnings for unknown entries when strict=false.
std::vector<std::string> load_weights(ParamStore& store, const std::string& path,
                                      const ManifestOptions& opts = {});

}  // namespace dtl
