#include "dtl/reuse.hpp"

#include <chrono>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dtl {

TaskBundle make_task(const ViTModel& backbone, const CSNConfig& csn, long task_id,
                     std::uint64_t seed) {
    const ViTConfig& cfg = backbone.config();
    csn.validate(cfg.n_blocks);
    TaskBundle t;
    t.task_id = task_id;
    t.csn = csn;
    csn_init(csn, cfg.embed_dim, cfg.n_blocks, seed, t.weights, cfg.dtype);
    Rng rng(seed ^ 0x4ead);
    Tensor w({cfg.embed_dim, cfg.n_classes}, cfg.dtype);
    for (long j = 0; j < w.numel(); ++j) w[j] = rng.normal() * 0.02;
    w.quantize();
    t.weights.add("head.w", std::move(w), true);
    t.weights.add("head.b", Tensor::zeros({cfg.n_classes}, cfg.dtype), true);
    return t;
}

namespace {

// head over the task's own weights (the backbone head belongs to no task)
Tensor task_logits(Graph& g, const ViTModel& backbone, const TaskBundle& task, NodeId tokens) {
    const ParamStore& bp = backbone.params();
    NodeId normed =
        g.layer_norm(tokens, g.use(bp.get("final_ln.gamma")), g.use(bp.get("final_ln.beta")));
    NodeId cls = g.split_tokens(normed, 0, 1);
    NodeId logits = g.add(g.matmul(cls, g.use(task.weights.get("head.w"))),
                          g.use(task.weights.get("head.b")));
    return g.value(g.reshape(logits, {backbone.config().n_classes})).clone();
}

// blocks [from..N] with the task's CSN riding along; h/z enter mid-stream
Tensor run_suffix(Graph& g, const ViTModel& backbone, const TaskBundle& task, NodeId h, NodeId z,
                  int from) {
    const ViTConfig& cfg = backbone.config();
    for (int i = from; i <= cfg.n_blocks; ++i) {
        h = csn_step(g, h, z, task.weights.get("csn.a." + std::to_string(i)),
                     task.weights.get("csn.c." + std::to_string(i)));
        NodeId z_next = backbone.block_forward(g, z, i);
        z = csn_inject(g, z_next, h, i, task.csn, task.weights);
    }
    return task_logits(g, backbone, task, z);
}

NodeId zero_state(Graph& g, const ViTConfig& cfg) {
    return g.leaf(Tensor::zeros({cfg.n_tokens(), cfg.embed_dim}, cfg.dtype));
}

}  // namespace

Tensor standalone_infer(const ViTModel& backbone, const TaskBundle& task, const Tensor& image) {
    Graph g(backbone.config().dtype);
    g.set_inference(true);
    NodeId z = backbone.patch_embed(g, image);
    return run_suffix(g, backbone, task, zero_state(g, backbone.config()), z, 1);
}

std::vector<Tensor> shared_prefix_infer(const ViTModel& backbone,
                                        const std::vector<TaskBundle>& tasks,
                                        const Tensor& image) {
    if (tasks.empty()) throw std::invalid_argument("shared_prefix_infer: no tasks");
    long M = tasks.front().csn.inject_from;
    for (const TaskBundle& t : tasks)
        if (t.csn.inject_from != M)
            throw std::invalid_argument("shared_prefix_infer: task " + std::to_string(t.task_id) +
                                        " has M=" + std::to_string(t.csn.inject_from) +
                                        ", bundle expects M=" + std::to_string(M));

    Graph g(backbone.config().dtype);
    g.set_inference(true);

    // the frozen prefix, once: taps z_1..z_{M-1} plus the stream entering block M
    std::vector<NodeId> taps;
    NodeId z = backbone.patch_embed(g, image);
    for (int i = 1; i < static_cast<int>(M); ++i) {
        taps.push_back(z);
        z = backbone.block_forward(g, z, i);
    }

    std::vector<Tensor> out;
    for (const TaskBundle& t : tasks) {
        NodeId h = zero_state(g, backbone.config());
        for (int i = 1; i < static_cast<int>(M); ++i)
            h = csn_step(g, h, taps[static_cast<std::size_t>(i - 1)],
                         t.weights.get("csn.a." + std::to_string(i)),
                         t.weights.get("csn.c." + std::to_string(i)));
        out.push_back(run_suffix(g, backbone, t, h, z, static_cast<int>(M)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// analytic FLOP model
// ---------------------------------------------------------------------------

namespace {

struct FlopModel {
    double embed, block, csn_step_f, inject, head;
};

FlopModel flop_model(const CSNConfig& csn, const ViTConfig& cfg) {
    double n = static_cast<double>(cfg.n_tokens());
    double d = static_cast<double>(cfg.embed_dim);
    double m = d * static_cast<double>(cfg.mlp_ratio);
    double heads = static_cast<double>(cfg.heads);
    FlopModel f;
    f.embed = 2.0 * cfg.n_patches() * (3.0 * cfg.patch * cfg.patch) * d;
    f.block = 8.0 * n * d * d    // q/k/v/o projections
              + 4.0 * n * n * d  // scores and weighted sum
              + 5.0 * heads * n * n  // softmax
              + 4.0 * n * d * m  // FFN matmuls
              + 8.0 * n * m      // GELU
              + 16.0 * n * d;    // the two layer norms
    f.csn_step_f = 4.0 * n * d * csn.d_prime;
    f.inject = 5.0 * n * d;  // Swish + residual add
    if (csn.variant == CSNVariant::DTLplus)
        f.inject += 2.0 * (n - 1.0) * d * csn.kernel * csn.kernel;
    f.head = 2.0 * d * cfg.n_classes + 8.0 * n * d;  // projection + final LN
    return f;
}

}  // namespace

FlopReport flop_report(long n_tasks, const CSNConfig& csn, const ViTConfig& cfg) {
    if (n_tasks < 1) throw std::invalid_argument("flop_report: need at least one task");
    csn.validate(cfg.n_blocks);
    FlopModel f = flop_model(csn, cfg);
    long N = cfg.n_blocks;
    long M = csn.inject_from;
    long injected = N - M + 1;
    double per_task_side = N * f.csn_step_f + injected * f.inject + f.head;

    FlopReport r;
    r.tasks = n_tasks;
    r.M = M;
    r.N = N;
    r.standalone_block_execs = n_tasks * N;
    r.shared_block_execs = (M - 1) + n_tasks * (N - M + 1);
    r.standalone_flops = n_tasks * (f.embed + N * f.block + per_task_side);
    r.shared_flops =
        f.embed + (M - 1) * f.block + n_tasks * ((N - M + 1) * f.block + per_task_side);
    r.saving_fraction = 1.0 - r.shared_flops / r.standalone_flops;
    return r;
}

double measured_saving(const ViTModel& backbone, const std::vector<TaskBundle>& tasks,
                       const Tensor& image, long repeats) {
    using clock = std::chrono::steady_clock;
    double best_alone = 1e300, best_shared = 1e300;
    for (long r = 0; r < repeats; ++r) {
        auto t0 = clock::now();
        for (const TaskBundle& t : tasks) standalone_infer(backbone, t, image);
        auto t1 = clock::now();
        shared_prefix_infer(backbone, tasks, image);
        auto t2 = clock::now();
        best_alone = std::min(best_alone, std::chrono::duration<double>(t1 - t0).count());
        best_shared = std::min(best_shared, std::chrono::duration<double>(t2 - t1).count());
    }
    return 1.0 - best_shared / best_alone;
}

std::string flop_report_csv(const FlopReport& r) {
    std::ostringstream os;
    os << "tasks,M,N,standalone_flops,shared_flops,saving_fraction,standalone_block_execs,"
          "shared_block_execs\n";
    os << r.tasks << "," << r.M << "," << r.N << "," << r.standalone_flops << ","
       << r.shared_flops << "," << r.saving_fraction << "," << r.standalone_block_execs << ","
       << r.shared_block_execs << "\n";
    return os.str();
}

std::string flop_report_json(const FlopReport& r) {
    nlohmann::json j{{"tasks", r.tasks},
                     {"M", r.M},
                     {"N", r.N},
                     {"standalone_flops", r.standalone_flops},
                     {"shared_flops", r.shared_flops},
                     {"saving_fraction", r.saving_fraction},
                     {"standalone_block_execs", r.standalone_block_execs},
                     {"shared_block_execs", r.shared_block_execs}};
    return j.dump(2) + "\n";
}

}  // namespace dtl
