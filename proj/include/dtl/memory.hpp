#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "dtl/adapters.hpp"
#include "dtl/graph.hpp"

namespace dtl {

// Simulated training-memory breakdown for one strategy. Counts activation
// retention plus parameters plus AdamW moments; allocator overhead and
// in-flight gradients are excluded, so comparisons use ratios rather than
// absolute sizes.
struct MemoryReport {
    std::string spec_name;
    std::size_t cached_activation_bytes = 0;
    std::map<std::string, std::size_t> cached_by_scope;  // "block.3", "csn", ...
    std::map<std::string, long> retained_count_by_scope;
    std::size_t param_bytes = 0;
    std::size_t trainable_param_bytes = 0;
    std::size_t optimizer_state_bytes = 0;  // 2 x trainable (AdamW moments)
    std::size_t grand_total = 0;
    std::vector<long> batch_shape;
};

// Sums bytes of every distinct non-leaf tensor present in a saved_for_backward
// set of the recorded graph, attributed to the scope of the producing node.
// The graph must contain at least one recorded (non-leaf) node.
MemoryReport measure(const Graph& g, const AdaptedModel& model, std::vector<long> batch_shape);

struct CompareRow {
    MemoryReport report;
    double ratio_vs_full = 0.0;  // cached_activation_bytes ratio
};

// One forward (with recording) of a synthetic batch per spec, plus ratios
// against Full. All models share one backbone seed so weights agree.
std::vector<CompareRow> compare(const std::vector<AdapterSpec>& specs, const ViTConfig& cfg,
                                long batch, std::uint64_t seed);

// DTL footprint as a function of the injection index M.
std::vector<MemoryReport> sweep_M(const ViTConfig& cfg, const std::vector<long>& M_values,
                                  long batch, std::uint64_t seed);

std::string compare_csv(const std::vector<CompareRow>& rows);
std::string compare_json(const std::vector<CompareRow>& rows);
std::string sweep_csv(const std::vector<MemoryReport>& reports, const std::vector<long>& M_values);

// Records a mean cross-entropy loss over `batch` random images (shared
// helper for the meter and the trainer's loss path).
NodeId record_batch_loss(AdaptedModel& model, Graph& g, const std::vector<Tensor>& images,
                         const std::vector<long>& labels);

std::vector<Tensor> random_images(const ViTConfig& cfg, long count, std::uint64_t seed);

}  // namespace dtl
