#include "dtl/memory.hpp"

#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dtl {

namespace {

std::size_t shape_bytes(const std::vector<long>& shape, DType dt) {
    long n = 1;
    for (long d : shape) n *= d;
    return static_cast<std::size_t>(n) * dtype_size(dt);
}

}  // namespace

MemoryReport measure(const Graph& g, const AdaptedModel& model, std::vector<long> batch_shape) {
    bool any_recorded = false;
    for (const Node& n : g.nodes())
        if (n.op != Op::Leaf) any_recorded = true;
    if (!any_recorded)
        throw std::invalid_argument("measure: no forward has been recorded on this graph");

    MemoryReport r;
    r.spec_name = model.spec().name();
    r.batch_shape = std::move(batch_shape);

    // Dedup by node id: a tensor saved by several consumers has one storage.
    std::set<NodeId> retained;
    for (const Node& n : g.nodes())
        for (NodeId s : n.saved)
            if (g.node(s).op != Op::Leaf) retained.insert(s);

    for (NodeId id : retained) {
        const Node& src = g.node(id);
        std::size_t bytes = shape_bytes(src.out_shape, g.dtype());
        std::string scope = src.scope.empty() ? "(top)" : src.scope;
        r.cached_activation_bytes += bytes;
        r.cached_by_scope[scope] += bytes;
        r.retained_count_by_scope[scope] += 1;
    }

    for (const Param* p : model.backbone().params().all()) {
        r.param_bytes += p->tensor.nbytes();
        if (p->trainable) r.trainable_param_bytes += p->tensor.nbytes();
    }
    for (const Param* p : model.adapter_params().all()) {
        r.param_bytes += p->tensor.nbytes();
        if (p->trainable) r.trainable_param_bytes += p->tensor.nbytes();
    }
    r.optimizer_state_bytes = 2 * r.trainable_param_bytes;
    r.grand_total = r.cached_activation_bytes + r.param_bytes + r.optimizer_state_bytes;
    return r;
}

std::vector<Tensor> random_images(const ViTConfig& cfg, long count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> out;
    for (long i = 0; i < count; ++i) {
        Tensor img({3, cfg.img, cfg.img}, cfg.dtype);
        for (long j = 0; j < img.numel(); ++j) img[j] = rng.normal();
        img.quantize();
        out.push_back(std::move(img));
    }
    return out;
}

NodeId record_batch_loss(AdaptedModel& model, Graph& g, const std::vector<Tensor>& images,
                         const std::vector<long>& labels) {
    if (images.empty() || images.size() != labels.size())
        throw std::invalid_argument("record_batch_loss: empty or mismatched batch");
    NodeId total = -1;
    for (std::size_t i = 0; i < images.size(); ++i) {
        NodeId logits = model.forward(g, images[i]);
        NodeId loss = g.cross_entropy(logits, labels[i]);
        total = (i == 0) ? loss : g.add(total, loss);
    }
    return g.scale(total, 1.0 / static_cast<double>(images.size()));
}

namespace {

MemoryReport measure_spec(const AdapterSpec& spec, const ViTConfig& cfg, long batch,
                          std::uint64_t seed) {
    ViTModel backbone(cfg, seed);
    AdaptedModel model(backbone, spec, seed + 1);
    auto images = random_images(cfg, batch, seed + 2);
    std::vector<long> labels(static_cast<std::size_t>(batch));
    Rng rng(seed + 3);
    for (auto& l : labels) l = rng.uniform_int(cfg.n_classes);
    Graph g(cfg.dtype);
    record_batch_loss(model, g, images, labels);
    return measure(g, model, {batch, 3, cfg.img, cfg.img});
}

}  // namespace

std::vector<CompareRow> compare(const std::vector<AdapterSpec>& specs, const ViTConfig& cfg,
                                long batch, std::uint64_t seed) {
    std::vector<CompareRow> rows;
    MemoryReport full = measure_spec(AdapterSpec::full(), cfg, batch, seed);
    for (const AdapterSpec& spec : specs) {
        CompareRow row;
        row.report = measure_spec(spec, cfg, batch, seed);
        row.ratio_vs_full = static_cast<double>(row.report.cached_activation_bytes) /
                            static_cast<double>(full.cached_activation_bytes);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<MemoryReport> sweep_M(const ViTConfig& cfg, const std::vector<long>& M_values,
                                  long batch, std::uint64_t seed) {
    std::vector<MemoryReport> out;
    for (long M : M_values) {
        if (M < 1 || M > cfg.n_blocks + 1)
            throw std::invalid_argument("sweep_M: M=" + std::to_string(M) + " outside [1," +
                                        std::to_string(cfg.n_blocks + 1) + "]");
        out.push_back(measure_spec(AdapterSpec::dtl(M), cfg, batch, seed));
    }
    return out;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
    std::ostringstream os;
    os << "spec,batch,cached_bytes,param_bytes,opt_bytes,total,ratio_vs_full\n";
    for (const auto& r : rows) {
        os << r.report.spec_name << "," << (r.report.batch_shape.empty() ? 0 : r.report.batch_shape[0])
           << "," << r.report.cached_activation_bytes << "," << r.report.param_bytes << ","
           << r.report.optimizer_state_bytes << "," << r.report.grand_total << ","
           << r.ratio_vs_full << "\n";
    }
    return os.str();
}

std::string compare_json(const std::vector<CompareRow>& rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row;
        row["spec"] = r.report.spec_name;
        row["batch"] = r.report.batch_shape.empty() ? 0 : r.report.batch_shape[0];
        row["cached_bytes"] = r.report.cached_activation_bytes;
        row["param_bytes"] = r.report.param_bytes;
        row["opt_bytes"] = r.report.optimizer_state_bytes;
        row["total"] = r.report.grand_total;
        row["ratio_vs_full"] = r.ratio_vs_full;
        row["cached_by_scope"] = r.report.cached_by_scope;
        j.push_back(std::move(row));
    }
    return j.dump(2) + "\n";
}

std::string sweep_csv(const std::vector<MemoryReport>& reports, const std::vector<long>& M_values) {
    std::ostringstream os;
    os << "M,batch,cached_bytes,param_bytes,opt_bytes,total\n";
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        os << M_values[i] << "," << (r.batch_shape.empty() ? 0 : r.batch_shape[0]) << ","
           << r.cached_activation_bytes << "," << r.param_bytes << "," << r.optimizer_state_bytes
           << "," << r.grand_total << "\n";
    }
    return os.str();
}

}  // namespace dtl
