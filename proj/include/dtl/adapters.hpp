#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dtl/csn.hpp"
#include "dtl/vit.hpp"

namespace dtl {

enum class AdapterKind {
    Full,
    Linear,
    BitFit,
    VPT,
    AdapterSerial,
    AdaptFormer,
    SSF,
    LoRA,
    DTL,
    DTLplus,
};

const char* adapter_kind_name(AdapterKind k);

struct AdapterSpec {
    AdapterKind kind = AdapterKind::Linear;
    // VPT
    long prompt_len = 4;
    bool vpt_deep = false;
    // AdapterSerial / AdaptFormer bottleneck width
    long bottleneck = 8;
    double adaptformer_s = 0.1;
    // LoRA
    long rank = 8;
    // DTL / DTL+
    CSNConfig csn;

    void validate(const ViTConfig& cfg) const;
    std::string name() const;

    static AdapterSpec full() { AdapterSpec s; s.kind = AdapterKind::Full; return s; }
    static AdapterSpec linear() { AdapterSpec s; s.kind = AdapterKind::Linear; return s; }
    static AdapterSpec bitfit() { AdapterSpec s; s.kind = AdapterKind::BitFit; return s; }
    static AdapterSpec vpt(long l = 4, bool deep = false);
    static AdapterSpec adapter_serial(long d_prime = 8);
    static AdapterSpec adaptformer(long d_prime = 8, double s = 0.1);
    static AdapterSpec ssf() { AdapterSpec s; s.kind = AdapterKind::SSF; return s; }
    static AdapterSpec lora(long r = 8);
    static AdapterSpec dtl(long M = 7, long d_prime = 2);
    static AdapterSpec dtl_plus(long M = 7, long d_prime = 2, long kernel = 3);
    static AdapterSpec dtl_plus_star(long d_prime = 2, long kernel = 3) {
        return dtl_plus(1, d_prime, kernel);
    }
    // Names accepted by the CLI: full, linear, bitfit, vpt, vpt-deep,
    // adapter, adaptformer, ssf, lora, dtl, dtl+, dtl+*
    static AdapterSpec parse(const std::string& name);
    static std::vector<std::string> known_names();
};

struct ParamCount {
    long adapter_params = 0;
    long head_params = 0;
};

// Closed-form trainable-parameter count (head reported separately).
ParamCount count_trainable(const AdapterSpec& spec, const ViTConfig& cfg);

struct UnitCensus {
    long in_block = 0;  // units inserted inside transformer blocks
    long total = 0;     // plus shared/embedding-level units
};

// Number of minimal structural units the strategy inserts.
UnitCensus structural_units(const AdapterSpec& spec, const ViTConfig& cfg);

// A frozen backbone with one fine-tuning strategy attached. Construction
// marks the trainable set on the backbone store (head always trainable) and
// creates the adapter's own parameters.
class AdaptedModel {
  public:
    AdaptedModel(ViTModel& backbone, AdapterSpec spec, std::uint64_t seed);
    ~AdaptedModel();

    NodeId forward(Graph& g, const Tensor& image);

    struct TapsResult {
        NodeId final_tokens = -1;
        std::vector<NodeId> taps;  // pre-injection z_2 .. z_{N+1}
        long cls_row = 0;
    };
    TapsResult forward_tokens(Graph& g, const Tensor& image);
    NodeId logits_from_tokens(Graph& g, NodeId tokens, long cls_row);

    ViTModel& backbone() { return backbone_; }
    const ViTModel& backbone() const { return backbone_; }
    const AdapterSpec& spec() const { return spec_; }
    ParamStore& adapter_params() { return adapter_params_; }
    const ParamStore& adapter_params() const { return adapter_params_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

    // Enumerated trainable scalars: {adapter (backbone-resident + side), head}.
    ParamCount enumerate_trainable() const;
    // Every trainable Param, adapter store + backbone, in stable order.
    std::vector<Param*> trainable_params();

  private:
    struct Hooks;
    void init_adapter_params(std::uint64_t seed);
    void mark_trainable_set();

    ViTModel& backbone_;
    AdapterSpec spec_;
    ParamStore adapter_params_;
    std::vector<std::string> warnings_;
    std::unique_ptr<Hooks> hooks_;
};

}  // namespace dtl
