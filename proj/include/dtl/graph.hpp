#pragma once

#include <map>
#include <string>
#include <vector>

#include "dtl/params.hpp"
#include "dtl/tensor.hpp"

namespace dtl {

using NodeId = int;

enum class Op {
    Leaf,
    Add,
    Mul,
    Matmul,
    Scale,
    Reshape,
    Transpose,
    ConcatTokens,
    SplitTokens,
    ConcatCols,
    SliceCols,
    Softmax,
    LayerNorm,
    Gelu,
    Swish,
    DwConv2d,
    CrossEntropy,
    Sum,
};

const char* op_name(Op op);

// Per-op scalar/integer attributes. Which fields are meaningful depends on
// the op; backward reads only these plus saved values and input shapes.
struct Attrs {
    double scalar = 0.0;  // Scale factor, Swish beta, LayerNorm eps
    long i0 = 0;          // SplitTokens/SliceCols from, CrossEntropy label
    long i1 = 0;          // SplitTokens/SliceCols to
};

struct Node {
    Op op = Op::Leaf;
    std::vector<NodeId> inputs;
    // Tensors this node's backward rule is allowed to read. Always a subset
    // of {inputs, own output}, and empty whenever requires_grad is false —
    // this is the retention ledger the memory meter sums over.
    std::vector<NodeId> saved;
    std::vector<std::vector<long>> in_shapes;
    std::vector<long> out_shape;
    bool requires_grad = false;
    bool trainable_leaf = false;
    std::string leaf_name;  // Param name, leaves only
    std::string scope;      // e.g. "block.3", "csn", "head"
    Attrs attrs;
    Tensor value;
};

// Map from Param name to its gradient; only trainable Params reachable from
// the loss appear.
using GradStore = std::map<std::string, Tensor>;

// Recorded computation tape. Node ids are issued in execution order, so the
// topological order is simply 0..n-1 and backward walks it in reverse; that
// fixes the accumulation order and makes runs bitwise reproducible.
class Graph {
  public:
    explicit Graph(DType dtype = DType::F32) : dtype_(dtype) {}

    DType dtype() const { return dtype_; }

    // When true, nodes are recorded with requires_grad forced false and no
    // saved tensors (inference/evaluation mode).
    void set_inference(bool v) { inference_ = v; }
    bool inference() const { return inference_; }

    NodeId leaf(Tensor t, std::string name = "", bool trainable = false);
    // Leaf for a Param, cached so every use within one graph maps to one node.
    NodeId use(const Param& p);

    const Tensor& value(NodeId id) const;
    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::vector<Node>& nodes() { return nodes_; }
    const std::vector<Node>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

    void push_scope(const std::string& s) { scopes_.push_back(s); }
    void pop_scope() { scopes_.pop_back(); }

    // ---- primitive ops ----
    NodeId add(NodeId a, NodeId b);  // equal shapes, or shape(b) a suffix of shape(a)
    NodeId mul(NodeId a, NodeId b);  // same broadcast rule as add
    NodeId matmul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double s);
    NodeId reshape(NodeId a, std::vector<long> shape);
    NodeId transpose(NodeId a);  // 2-D
    NodeId concat_tokens(NodeId a, NodeId b);            // along rows
    NodeId split_tokens(NodeId a, long from, long to);   // row range [from,to)
    NodeId concat_cols(NodeId a, NodeId b);              // along last axis
    NodeId slice_cols(NodeId a, long from, long to);     // column range [from,to)
    NodeId softmax(NodeId a);  // last axis
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
    NodeId gelu(NodeId a);
    NodeId swish(NodeId a, double beta);
    // x: [C,H,W], kernel: [C,k,k] odd k, bias: [C]; stride 1, same zero padding.
    NodeId depthwise_conv2d(NodeId x, NodeId kernel, NodeId bias);
    NodeId cross_entropy(NodeId logits, long label);  // logits: [k] -> scalar
    NodeId sum(NodeId a);

    // Reverse-mode pass from a scalar loss. Subgraphs with requires_grad
    // false are never visited.
    GradStore backward(NodeId loss);

    // Test hook for the retention-soundness property: frees the value buffer
    // of every non-leaf node that is in nobody's saved set (and is not
    // `keep`). backward() must still produce identical gradients.
    void release_unsaved_values(NodeId keep);

  private:
    NodeId push(Node n);
    void check_same_dtype(const char* op, std::initializer_list<NodeId> ids) const;
    std::string current_scope() const { return scopes_.empty() ? "" : scopes_.back(); }

    DType dtype_;
    bool inference_ = false;
    std::vector<Node> nodes_;
    std::vector<std::string> scopes_;
    std::map<const Param*, NodeId> param_cache_;
};

// Numerically safe logistic; evaluated branch-wise so exp never overflows
// even at beta*x = +-1e4.
double sigmoid(double x);

// RAII scope label for memory attribution.
class ScopeGuard {
  public:
    ScopeGuard(Graph& g, const std::string& s) : g_(g) { g_.push_scope(s); }
    ~ScopeGuard() { g_.pop_scope(); }

  private:
    Graph& g_;
};

}  // namespace dtl
