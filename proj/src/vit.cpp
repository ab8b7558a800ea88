#include "dtl/vit.hpp"

#include <cmath>
#include <stdexcept>

namespace dtl {

void ViTConfig::validate() const {
    if (n_blocks < 1) throw std::invalid_argument("ViTConfig: n_blocks must be >= 1");
    if (embed_dim % heads != 0)
        throw std::invalid_argument("ViTConfig: embed_dim " + std::to_string(embed_dim) +
                                    " not divisible by heads " + std::to_string(heads));
    if (img % patch != 0)
        throw std::invalid_argument("ViTConfig: img " + std::to_string(img) +
                                    " not divisible by patch " + std::to_string(patch));
    if (mlp_ratio < 1 || n_classes < 2) throw std::invalid_argument("ViTConfig: bad mlp_ratio/n_classes");
}

Tensor image_to_patches(const Tensor& image, const ViTConfig& cfg) {
    if (image.shape() != std::vector<long>{3, cfg.img, cfg.img})
        throw std::invalid_argument("image_to_patches: expected [3," + std::to_string(cfg.img) + "," +
                                    std::to_string(cfg.img) + "], got " + shape_str(image.shape()));
    long gp = cfg.grid(), ps = cfg.patch;
    Tensor out({cfg.n_patches(), 3 * ps * ps}, image.dtype());
    for (long py = 0; py < gp; ++py)
        for (long px = 0; px < gp; ++px) {
            long row = py * gp + px;
            long col = 0;
            for (long c = 0; c < 3; ++c)
                for (long i = 0; i < ps; ++i)
                    for (long j = 0; j < ps; ++j)
                        out.at(row, col++) = image[c * cfg.img * cfg.img + (py * ps + i) * cfg.img +
                                                   (px * ps + j)];
        }
    return out;
}

ViTModel::ViTModel(ViTConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    DType dt = cfg_.dtype;
    long d = cfg_.embed_dim;

    auto randn = [&](std::vector<long> shape, double std) {
        Tensor t(shape, dt);
        for (long i = 0; i < t.numel(); ++i) t[i] = rng.normal() * std;
        t.quantize();
        return t;
    };

    params_.add("embed.proj.w", randn({3 * cfg_.patch * cfg_.patch, d}, 0.02));
    params_.add("embed.proj.b", Tensor::zeros({d}, dt));
    params_.add("embed.cls", randn({1, d}, 0.02));
    params_.add("embed.pos", randn({cfg_.n_tokens(), d}, 0.02));

    for (long i = 1; i <= cfg_.n_blocks; ++i) {
        std::string b = "block." + std::to_string(i) + ".";
        params_.add(b + "ln1.gamma", Tensor::full({d}, 1.0, dt));
        params_.add(b + "ln1.beta", Tensor::zeros({d}, dt));
        for (const char* w : {"w_q", "w_k", "w_v", "w_o"})
            params_.add(b + "attn." + w, randn({d, d}, 0.02));
        for (const char* bb : {"b_q", "b_k", "b_v", "b_o"})
            params_.add(b + "attn." + bb, Tensor::zeros({d}, dt));
        params_.add(b + "ln2.gamma", Tensor::full({d}, 1.0, dt));
        params_.add(b + "ln2.beta", Tensor::zeros({d}, dt));
        params_.add(b + "ffn.w1", randn({d, cfg_.mlp_ratio * d}, 0.02));
        params_.add(b + "ffn.b1", Tensor::zeros({cfg_.mlp_ratio * d}, dt));
        params_.add(b + "ffn.w2", randn({cfg_.mlp_ratio * d, d}, 0.02));
        params_.add(b + "ffn.b2", Tensor::zeros({d}, dt));
    }
    params_.add("final_ln.gamma", Tensor::full({d}, 1.0, dt));
    params_.add("final_ln.beta", Tensor::zeros({d}, dt));
    params_.add("head.w", randn({d, cfg_.n_classes}, 0.02), true);
    params_.add("head.b", Tensor::zeros({cfg_.n_classes}, dt), true);
}

void ViTModel::freeze_all() {
    params_.set_trainable_if([](const std::string&) { return true; }, false);
}

NodeId ViTModel::patch_embed(Graph& g, const Tensor& image) const {
    ScopeGuard sc(g, "embed");
    Tensor patches = image_to_patches(image, cfg_);
    NodeId x = g.leaf(std::move(patches), "input");
    NodeId proj = g.add(g.matmul(x, g.use(p("embed.proj.w"))), g.use(p("embed.proj.b")));
    NodeId tokens = g.concat_tokens(g.use(p("embed.cls")), proj);
    return g.add(tokens, g.use(p("embed.pos")));
}

NodeId ViTModel::block_forward(Graph& g, NodeId z, int i, BlockHooks* hooks) const {
    if (i < 1 || i > cfg_.n_blocks)
        throw std::invalid_argument("block_forward: block index " + std::to_string(i) +
                                    " outside [1," + std::to_string(cfg_.n_blocks) + "]");
    const std::vector<long>& zs = g.value(z).shape();
    if (zs.size() != 2 || zs[1] != cfg_.embed_dim)
        throw std::invalid_argument("block_forward: tokens " + shape_str(zs) + " do not match d=" +
                                    std::to_string(cfg_.embed_dim));
    ScopeGuard sc(g, "block." + std::to_string(i));
    std::string b = "block." + std::to_string(i) + ".";
    long d = cfg_.embed_dim, dh = d / cfg_.heads;

    NodeId x = g.layer_norm(z, g.use(p(b + "ln1.gamma")), g.use(p(b + "ln1.beta")));
    if (hooks) x = hooks->ln1_out(g, i, x);

    NodeId q = g.add(g.matmul(x, g.use(p(b + "attn.w_q"))), g.use(p(b + "attn.b_q")));
    if (hooks) q = hooks->q_proj(g, i, x, q);
    NodeId k = g.add(g.matmul(x, g.use(p(b + "attn.w_k"))), g.use(p(b + "attn.b_k")));
    NodeId v = g.add(g.matmul(x, g.use(p(b + "attn.w_v"))), g.use(p(b + "attn.b_v")));
    if (hooks) v = hooks->v_proj(g, i, x, v);

    NodeId heads_out = -1;
    for (long h = 0; h < cfg_.heads; ++h) {
        NodeId qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        NodeId kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        NodeId vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        NodeId att = g.softmax(g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(double(dh))));
        NodeId oh = g.matmul(att, vh);
        heads_out = (h == 0) ? oh : g.concat_cols(heads_out, oh);
    }
    NodeId attn = g.add(g.matmul(heads_out, g.use(p(b + "attn.w_o"))), g.use(p(b + "attn.b_o")));
    if (hooks) attn = hooks->attn_out(g, i, attn);
    NodeId x1 = g.add(z, attn);

    NodeId y = g.layer_norm(x1, g.use(p(b + "ln2.gamma")), g.use(p(b + "ln2.beta")));
    if (hooks) y = hooks->ln2_out(g, i, y);
    NodeId ffn = g.add(g.matmul(y, g.use(p(b + "ffn.w1"))), g.use(p(b + "ffn.b1")));
    ffn = g.gelu(ffn);
    ffn = g.add(g.matmul(ffn, g.use(p(b + "ffn.w2"))), g.use(p(b + "ffn.b2")));
    if (hooks) ffn = hooks->ffn_out(g, i, ffn);
    NodeId z_next = g.add(x1, ffn);
    if (hooks) z_next = hooks->block_out(g, i, x1, z_next);
    return z_next;
}

NodeId ViTModel::head_logits(Graph& g, NodeId tokens, long cls_row, BlockHooks* hooks) const {
    ScopeGuard sc(g, "head");
    NodeId normed = g.layer_norm(tokens, g.use(p("final_ln.gamma")), g.use(p("final_ln.beta")));
    if (hooks) normed = hooks->final_ln_out(g, normed);
    NodeId cls = g.split_tokens(normed, cls_row, cls_row + 1);
    NodeId logits = g.add(g.matmul(cls, g.use(p("head.w"))), g.use(p("head.b")));
    return g.reshape(logits, {cfg_.n_classes});
}

ViTModel::TapsResult ViTModel::forward_with_taps(Graph& g, const Tensor& image) const {
    TapsResult r;
    NodeId z = patch_embed(g, image);
    for (int i = 1; i <= cfg_.n_blocks; ++i) {
        z = block_forward(g, z, i);
        r.taps.push_back(z);
    }
    r.final_tokens = z;
    return r;
}

NodeId ViTModel::forward(Graph& g, const Tensor& image) const {
    return head_logits(g, forward_with_taps(g, image).final_tokens);
}

}  // namespace dtl
