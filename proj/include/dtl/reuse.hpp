#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtl/csn.hpp"
#include "dtl/vit.hpp"

namespace dtl {

// One downstream task layered on a shared frozen backbone: its own low-rank
// side network plus its own classification head.
struct TaskBundle {
    long task_id = 0;
    CSNConfig csn;       // inject_from (M) must agree across bundled tasks
    ParamStore weights;  // "csn.*" + "head.w"/"head.b"
};

// Fresh task weights over `backbone` (CSN init + a small random head).
TaskBundle make_task(const ViTModel& backbone, const CSNConfig& csn, long task_id,
                     std::uint64_t seed);

// Full pipeline for one task alone: embed, all N blocks with CSN steps and
// injections, task head. Inference mode (no retention).
Tensor standalone_infer(const ViTModel& backbone, const TaskBundle& task, const Tensor& image);

// Runs embed + blocks 1..M-1 once, then fans the boundary taps out to every
// task's CSN and suffix. Per-task logits are bitwise equal to
// standalone_infer. Errors if the tasks disagree on M.
std::vector<Tensor> shared_prefix_infer(const ViTModel& backbone,
                                        const std::vector<TaskBundle>& tasks,
                                        const Tensor& image);

struct FlopReport {
    long tasks = 0;
    long M = 0;
    long N = 0;
    double standalone_flops = 0.0;
    double shared_flops = 0.0;
    double saving_fraction = 0.0;  // 1 - shared/standalone
    long standalone_block_execs = 0;
    long shared_block_execs = 0;
};

// Analytic per-block FLOP model (projections, attention, FFN, norms,
// activations) x execution counts, plus embed/CSN/head overhead.
FlopReport flop_report(long n_tasks, const CSNConfig& csn, const ViTConfig& cfg);

// Wall-clock alternative to the analytic model: median over `repeats` of
// standalone-vs-shared inference for the same bundle. Noisy at desk scale;
// kept behind a CLI flag.
double measured_saving(const ViTModel& backbone, const std::vector<TaskBundle>& tasks,
                       const Tensor& image, long repeats);

std::string flop_report_csv(const FlopReport& r);
std::string flop_report_json(const FlopReport& r);

}  // namespace dtl
