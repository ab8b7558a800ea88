#include "dtl/adapters.hpp"

#include <cmath>
#include <stdexcept>

namespace dtl {

const char* adapter_kind_name(AdapterKind k) {
    switch (k) {
        case AdapterKind::Full: return "full";
        case AdapterKind::Linear: return "linear";
        case AdapterKind::BitFit: return "bitfit";
        case AdapterKind::VPT: return "vpt";
        case AdapterKind::AdapterSerial: return "adapter";
        case AdapterKind::AdaptFormer: return "adaptformer";
        case AdapterKind::SSF: return "ssf";
        case AdapterKind::LoRA: return "lora";
        case AdapterKind::DTL: return "dtl";
        case AdapterKind::DTLplus: return "dtl+";
    }
    return "?";
}

AdapterSpec AdapterSpec::vpt(long l, bool deep) {
    AdapterSpec s;
    s.kind = AdapterKind::VPT;
    s.prompt_len = l;
    s.vpt_deep = deep;
    return s;
}

AdapterSpec AdapterSpec::adapter_serial(long d_prime) {
    AdapterSpec s;
    s.kind = AdapterKind::AdapterSerial;
    s.bottleneck = d_prime;
    return s;
}

AdapterSpec AdapterSpec::adaptformer(long d_prime, double sc) {
    AdapterSpec s;
    s.kind = AdapterKind::AdaptFormer;
    s.bottleneck = d_prime;
    s.adaptformer_s = sc;
    return s;
}

AdapterSpec AdapterSpec::lora(long r) {
    AdapterSpec s;
    s.kind = AdapterKind::LoRA;
    s.rank = r;
    return s;
}

AdapterSpec AdapterSpec::dtl(long M, long d_prime) {
    AdapterSpec s;
    s.kind = AdapterKind::DTL;
    s.csn.variant = CSNVariant::DTL;
    s.csn.inject_from = M;
    s.csn.d_prime = d_prime;
    return s;
}

AdapterSpec AdapterSpec::dtl_plus(long M, long d_prime, long kernel) {
    AdapterSpec s;
    s.kind = AdapterKind::DTLplus;
    s.csn.variant = CSNVariant::DTLplus;
    s.csn.inject_from = M;
    s.csn.d_prime = d_prime;
    s.csn.kernel = kernel;
    return s;
}

AdapterSpec AdapterSpec::parse(const std::string& name) {
    if (name == "full") return full();
    if (name == "linear") return linear();
    if (name == "bitfit") return bitfit();
    if (name == "vpt") return vpt();
    if (name == "vpt-deep") return vpt(4, true);
    if (name == "adapter") return adapter_serial();
    if (name == "adaptformer") return adaptformer();
    if (name == "ssf") return ssf();
    if (name == "lora") return lora();
    if (name == "dtl") return dtl();
    if (name == "dtl+") return dtl_plus();
    if (name == "dtl+*") return dtl_plus_star();
    throw std::invalid_argument("unknown adapter spec \"" + name + "\"");
}

std::vector<std::string> AdapterSpec::known_names() {
    return {"full", "linear", "bitfit",      "vpt", "vpt-deep", "adapter",
            "adaptformer", "ssf", "lora", "dtl", "dtl+",     "dtl+*"};
}

std::string AdapterSpec::name() const {
    std::string base = adapter_kind_name(kind);
    if (kind == AdapterKind::DTL || kind == AdapterKind::DTLplus)
        return base + "[M=" + std::to_string(csn.inject_from) + "]";
    if (kind == AdapterKind::VPT && vpt_deep) return "vpt-deep";
    return base;
}

void AdapterSpec::validate(const ViTConfig& cfg) const {
    switch (kind) {
        case AdapterKind::VPT:
            if (prompt_len < 1) throw std::invalid_argument("VPT: prompt count l must be >= 1");
            break;
        case AdapterKind::LoRA:
            if (rank < 1) throw std::invalid_argument("LoRA: rank must be >= 1");
            if (rank > cfg.embed_dim)
                throw std::invalid_argument("LoRA: rank " + std::to_string(rank) + " exceeds d=" +
                                            std::to_string(cfg.embed_dim));
            break;
        case AdapterKind::AdapterSerial:
        case AdapterKind::AdaptFormer:
            if (bottleneck < 1) throw std::invalid_argument("adapter: bottleneck must be >= 1");
            if (adaptformer_s <= 0.0 && kind == AdapterKind::AdaptFormer)
                throw std::invalid_argument("AdaptFormer: scale s must be positive");
            break;
        case AdapterKind::DTL:
        case AdapterKind::DTLplus:
            csn.validate(cfg.n_blocks);
            if (kind == AdapterKind::DTLplus) {
                long n = cfg.n_patches();
                long side = static_cast<long>(std::llround(std::sqrt(static_cast<double>(n))));
                if (side * side != n)
                    throw std::invalid_argument("DTL+: patch count " + std::to_string(n) +
                                                " is not a square grid");
            }
            break;
        default:
            break;
    }
}

// ---------------------------------------------------------------------------
// counting
// ---------------------------------------------------------------------------

ParamCount count_trainable(const AdapterSpec& spec, const ViTConfig& cfg) {
    long N = cfg.n_blocks, d = cfg.embed_dim, r = cfg.mlp_ratio;
    ParamCount out;
    out.head_params = d * cfg.n_classes + cfg.n_classes;
    switch (spec.kind) {
        case AdapterKind::Full: {
            long embed = (3 * cfg.patch * cfg.patch) * d + d + d + cfg.n_tokens() * d;
            long block = 2 * d                 // ln1
                         + 4 * d * d + 4 * d   // attn weights + biases
                         + 2 * d               // ln2
                         + d * (r * d) + r * d + (r * d) * d + d;  // ffn
            out.adapter_params = embed + N * block + 2 * d;  // + final LN
            break;
        }
        case AdapterKind::Linear:
            out.adapter_params = 0;
            break;
        case AdapterKind::BitFit:
            // per block: 4 attn biases, 2 ffn biases, 2 LN betas; plus
            // patch-proj bias and final LN beta
            out.adapter_params = N * (4 * d + r * d + d + 2 * d) + 2 * d;
            break;
        case AdapterKind::VPT:
            out.adapter_params = (spec.vpt_deep ? N : 1) * spec.prompt_len * d;
            break;
        case AdapterKind::AdapterSerial:
            out.adapter_params = 2 * N * (2 * d * spec.bottleneck);
            break;
        case AdapterKind::AdaptFormer:
            out.adapter_params = N * (2 * d * spec.bottleneck);
            break;
        case AdapterKind::SSF:
            out.adapter_params = 2 * d * (4 * N + 2);
            break;
        case AdapterKind::LoRA:
            out.adapter_params = N * 2 * (2 * d * spec.rank);
            break;
        case AdapterKind::DTL:
            out.adapter_params = N * 2 * d * spec.csn.d_prime;
            break;
        case AdapterKind::DTLplus:
            out.adapter_params =
                N * 2 * d * spec.csn.d_prime + d * spec.csn.kernel * spec.csn.kernel + d;
            break;
    }
    return out;
}

UnitCensus structural_units(const AdapterSpec& spec, const ViTConfig& cfg) {
    long N = cfg.n_blocks;
    switch (spec.kind) {
        case AdapterKind::Full:
        case AdapterKind::Linear: return {0, 0};
        case AdapterKind::BitFit: return {8 * N, 8 * N + 2};
        case AdapterKind::VPT: return {spec.vpt_deep ? N : 1, spec.vpt_deep ? N : 1};
        case AdapterKind::AdapterSerial: return {2 * N, 2 * N};
        case AdapterKind::AdaptFormer: return {N, N};
        case AdapterKind::SSF: return {4 * N, 4 * N + 2};
        case AdapterKind::LoRA: return {2 * N, 2 * N};
        case AdapterKind::DTL: return {N, N};
        case AdapterKind::DTLplus: return {N, N + 1};
    }
    return {0, 0};
}

// ---------------------------------------------------------------------------
// AdaptedModel
// ---------------------------------------------------------------------------

struct AdaptedModel::Hooks : BlockHooks {
    AdaptedModel* m = nullptr;

    NodeId ssf_apply(Graph& g, NodeId x, const std::string& prefix) {
        ParamStore& ap = m->adapter_params_;
        return g.add(g.mul(x, g.use(ap.get(prefix + ".gamma"))), g.use(ap.get(prefix + ".beta")));
    }

    NodeId bottleneck_branch(Graph& g, NodeId x, const std::string& prefix) {
        ParamStore& ap = m->adapter_params_;
        NodeId t = g.gelu(g.matmul(x, g.use(ap.get(prefix + ".down"))));
        return g.matmul(t, g.use(ap.get(prefix + ".up")));
    }

    NodeId q_proj(Graph& g, int i, NodeId x, NodeId base) override {
        if (m->spec_.kind != AdapterKind::LoRA) return base;
        ParamStore& ap = m->adapter_params_;
        std::string p = "lora." + std::to_string(i) + ".q";
        NodeId delta = g.matmul(g.matmul(x, g.use(ap.get(p + ".a"))), g.use(ap.get(p + ".b")));
        return g.add(base, delta);
    }

    NodeId v_proj(Graph& g, int i, NodeId x, NodeId base) override {
        if (m->spec_.kind != AdapterKind::LoRA) return base;
        ParamStore& ap = m->adapter_params_;
        std::string p = "lora." + std::to_string(i) + ".v";
        NodeId delta = g.matmul(g.matmul(x, g.use(ap.get(p + ".a"))), g.use(ap.get(p + ".b")));
        return g.add(base, delta);
    }

    NodeId ln1_out(Graph& g, int i, NodeId y) override {
        if (m->spec_.kind != AdapterKind::SSF) return y;
        return ssf_apply(g, y, "ssf." + std::to_string(i) + ".ln1");
    }

    NodeId ln2_out(Graph& g, int i, NodeId y) override {
        if (m->spec_.kind != AdapterKind::SSF) return y;
        return ssf_apply(g, y, "ssf." + std::to_string(i) + ".ln2");
    }

    NodeId attn_out(Graph& g, int i, NodeId y) override {
        if (m->spec_.kind == AdapterKind::SSF)
            return ssf_apply(g, y, "ssf." + std::to_string(i) + ".attn");
        if (m->spec_.kind == AdapterKind::AdapterSerial)
            return g.add(y, bottleneck_branch(g, y, "adapter." + std::to_string(i) + ".attn"));
        return y;
    }

    NodeId ffn_out(Graph& g, int i, NodeId y) override {
        if (m->spec_.kind == AdapterKind::SSF)
            return ssf_apply(g, y, "ssf." + std::to_string(i) + ".ffn");
        if (m->spec_.kind == AdapterKind::AdapterSerial)
            return g.add(y, bottleneck_branch(g, y, "adapter." + std::to_string(i) + ".ffn"));
        return y;
    }

    NodeId block_out(Graph& g, int i, NodeId x1, NodeId z_next) override {
        if (m->spec_.kind != AdapterKind::AdaptFormer) return z_next;
        NodeId branch = bottleneck_branch(g, x1, "adaptformer." + std::to_string(i));
        return g.add(z_next, g.scale(branch, m->spec_.adaptformer_s));
    }

    NodeId final_ln_out(Graph& g, NodeId y) override {
        if (m->spec_.kind != AdapterKind::SSF) return y;
        return ssf_apply(g, y, "ssf.final");
    }
};

AdaptedModel::AdaptedModel(ViTModel& backbone, AdapterSpec spec, std::uint64_t seed)
    : backbone_(backbone), spec_(spec), hooks_(std::make_unique<Hooks>()) {
    spec_.validate(backbone_.config());
    hooks_->m = this;
    mark_trainable_set();
    init_adapter_params(seed);
}

AdaptedModel::~AdaptedModel() = default;

void AdaptedModel::mark_trainable_set() {
    ParamStore& bp = backbone_.params();
    backbone_.freeze_all();
    bp.get("head.w").trainable = true;
    bp.get("head.b").trainable = true;
    if (spec_.kind == AdapterKind::Full) {
        bp.set_trainable_if([](const std::string&) { return true; }, true);
    } else if (spec_.kind == AdapterKind::BitFit) {
        bp.set_trainable_if(
            [](const std::string& n) {
                auto ends_with = [&](const std::string& suf) {
                    return n.size() >= suf.size() && n.compare(n.size() - suf.size(), suf.size(), suf) == 0;
                };
                return ends_with(".beta") || ends_with(".b_q") || ends_with(".b_k") ||
                       ends_with(".b_v") || ends_with(".b_o") || ends_with(".b1") ||
                       ends_with(".b2") || n == "embed.proj.b";
            },
            true);
    }
}

void AdaptedModel::init_adapter_params(std::uint64_t seed) {
    const ViTConfig& cfg = backbone_.config();
    long d = cfg.embed_dim, N = cfg.n_blocks;
    DType dt = cfg.dtype;
    Rng rng(seed);
    double bound = 1.0 / std::sqrt(static_cast<double>(d));

    auto uniform = [&](std::vector<long> shape) {
        Tensor t(shape, dt);
        for (long i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
        t.quantize();
        return t;
    };
    auto randn = [&](std::vector<long> shape, double std) {
        Tensor t(shape, dt);
        for (long i = 0; i < t.numel(); ++i) t[i] = rng.normal() * std;
        t.quantize();
        return t;
    };

    switch (spec_.kind) {
        case AdapterKind::Full:
        case AdapterKind::Linear:
        case AdapterKind::BitFit:
            break;
        case AdapterKind::VPT: {
            long copies = spec_.vpt_deep ? N : 1;
            for (long i = 1; i <= copies; ++i)
                adapter_params_.add("vpt.p." + std::to_string(i),
                                    randn({spec_.prompt_len, d}, 0.02), true);
            break;
        }
        case AdapterKind::AdapterSerial: {
            for (long i = 1; i <= N; ++i)
                for (const char* site : {"attn", "ffn"}) {
                    std::string p = "adapter." + std::to_string(i) + "." + site;
                    adapter_params_.add(p + ".down", uniform({d, spec_.bottleneck}), true);
                    adapter_params_.add(p + ".up", Tensor::zeros({spec_.bottleneck, d}, dt), true);
                }
            break;
        }
        case AdapterKind::AdaptFormer: {
            if (spec_.bottleneck >= d)
                warnings_.push_back("AdaptFormer bottleneck " + std::to_string(spec_.bottleneck) +
                                    " is not smaller than d=" + std::to_string(d));
            for (long i = 1; i <= N; ++i) {
                std::string p = "adaptformer." + std::to_string(i);
                adapter_params_.add(p + ".down", uniform({d, spec_.bottleneck}), true);
                adapter_params_.add(p + ".up", Tensor::zeros({spec_.bottleneck, d}, dt), true);
            }
            break;
        }
        case AdapterKind::SSF: {
            auto pair = [&](const std::string& prefix) {
                adapter_params_.add(prefix + ".gamma", Tensor::full({d}, 1.0, dt), true);
                adapter_params_.add(prefix + ".beta", Tensor::zeros({d}, dt), true);
            };
            pair("ssf.embed");
            for (long i = 1; i <= N; ++i) {
                std::string b = "ssf." + std::to_string(i);
                pair(b + ".ln1");
                pair(b + ".attn");
                pair(b + ".ln2");
                pair(b + ".ffn");
            }
            pair("ssf.final");
            break;
        }
        case AdapterKind::LoRA: {
            for (long i = 1; i <= N; ++i)
                for (const char* site : {"q", "v"}) {
                    std::string p = "lora." + std::to_string(i) + "." + site;
                    adapter_params_.add(p + ".a", uniform({d, spec_.rank}), true);
                    adapter_params_.add(p + ".b", Tensor::zeros({spec_.rank, d}, dt), true);
                }
            break;
        }
        case AdapterKind::DTL:
        case AdapterKind::DTLplus:
            csn_init(spec_.csn, d, N, seed, adapter_params_, dt);
            break;
    }
}

AdaptedModel::TapsResult AdaptedModel::forward_tokens(Graph& g, const Tensor& image) {
    const ViTConfig& cfg = backbone_.config();
    TapsResult r;
    bool is_dtl = spec_.kind == AdapterKind::DTL || spec_.kind == AdapterKind::DTLplus;

    NodeId stream = backbone_.patch_embed(g, image);
    if (spec_.kind == AdapterKind::SSF) stream = hooks_->ssf_apply(g, stream, "ssf.embed");
    if (spec_.kind == AdapterKind::VPT) {
        stream = g.concat_tokens(g.use(adapter_params_.get("vpt.p.1")), stream);
        r.cls_row = spec_.prompt_len;
    }

    NodeId h = -1;
    if (is_dtl) {
        ScopeGuard sc(g, "csn");
        h = g.leaf(Tensor::zeros({cfg.n_tokens(), cfg.embed_dim}, cfg.dtype));
    }

    for (int i = 1; i <= cfg.n_blocks; ++i) {
        if (spec_.kind == AdapterKind::VPT && spec_.vpt_deep && i > 1) {
            long total = g.value(stream).dim(0);
            NodeId rest = g.split_tokens(stream, spec_.prompt_len, total);
            stream = g.concat_tokens(g.use(adapter_params_.get("vpt.p." + std::to_string(i))), rest);
        }
        if (is_dtl) {
            ScopeGuard sc(g, "csn");
            h = csn_step(g, h, stream, adapter_params_.get("csn.a." + std::to_string(i)),
                         adapter_params_.get("csn.c." + std::to_string(i)));
        }
        NodeId z = backbone_.block_forward(g, stream, i, hooks_.get());
        r.taps.push_back(z);
        if (is_dtl && i >= spec_.csn.inject_from) {
            ScopeGuard sc(g, "csn");
            stream = csn_inject(g, z, h, i, spec_.csn, adapter_params_);
        } else {
            stream = z;
        }
    }
    r.final_tokens = stream;
    return r;
}

NodeId AdaptedModel::logits_from_tokens(Graph& g, NodeId tokens, long cls_row) {
    return backbone_.head_logits(g, tokens, cls_row, hooks_.get());
}

NodeId AdaptedModel::forward(Graph& g, const Tensor& image) {
    TapsResult r = forward_tokens(g, image);
    return logits_from_tokens(g, r.final_tokens, r.cls_row);
}

ParamCount AdaptedModel::enumerate_trainable() const {
    ParamCount out;
    const ParamStore& bp = backbone_.params();
    out.head_params = bp.get("head.w").tensor.numel() + bp.get("head.b").tensor.numel();
    for (const Param* p : bp.all())
        if (p->trainable && p->name.rfind("head.", 0) != 0) out.adapter_params += p->tensor.numel();
    out.adapter_params += adapter_params_.trainable_scalars();
    return out;
}

std::vector<Param*> AdaptedModel::trainable_params() {
    std::vector<Param*> out = backbone_.params().trainable();
    for (Param* p : adapter_params_.trainable()) out.push_back(p);
    return out;
}

}  // namespace dtl
