#include "dtl/graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace dtl {

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::Matmul: return "matmul";
        case Op::Scale: return "scale";
        case Op::Reshape: return "reshape";
        case Op::Transpose: return "transpose";
        case Op::ConcatTokens: return "concat_tokens";
        case Op::SplitTokens: return "split_tokens";
        case Op::ConcatCols: return "concat_cols";
        case Op::SliceCols: return "slice_cols";
        case Op::Softmax: return "softmax";
        case Op::LayerNorm: return "layer_norm";
        case Op::Gelu: return "gelu";
        case Op::Swish: return "swish";
        case Op::DwConv2d: return "depthwise_conv2d";
        case Op::CrossEntropy: return "cross_entropy";
        case Op::Sum: return "sum";
    }
    return "?";
}

double sigmoid(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

long last_dim(const std::vector<long>& s) { return s.empty() ? 0 : s.back(); }

bool is_suffix(const std::vector<long>& suf, const std::vector<long>& full) {
    if (suf.size() > full.size()) return false;
    return std::equal(suf.rbegin(), suf.rend(), full.rbegin());
}

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_bwd(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

}  // namespace

NodeId Graph::push(Node n) {
    NodeId id = static_cast<NodeId>(nodes_.size());
    n.out_shape = n.value.shape();
    n.scope = current_scope();
    if (inference_ && n.op != Op::Leaf) {
        n.requires_grad = false;
        n.saved.clear();
    }
    // resolve self-reference sentinel (ops whose backward reads own output)
    for (NodeId& s : n.saved)
        if (s == -1) s = id;
    nodes_.push_back(std::move(n));
    return id;
}

void Graph::check_same_dtype(const char* op, std::initializer_list<NodeId> ids) const {
    for (NodeId id : ids) {
        if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
            shape_error(op, "node id " + std::to_string(id) + " is not in this graph");
        if (nodes_[static_cast<std::size_t>(id)].value.dtype() != dtype_)
            shape_error(op, std::string("mixed dtype: node has ") +
                                dtype_name(nodes_[static_cast<std::size_t>(id)].value.dtype()) +
                                ", graph is " + dtype_name(dtype_));
    }
}

NodeId Graph::leaf(Tensor t, std::string name, bool trainable) {
    if (t.dtype() != dtype_)
        throw std::invalid_argument("leaf: tensor dtype " + std::string(dtype_name(t.dtype())) +
                                    " does not match graph dtype " + dtype_name(dtype_));
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(t);
    n.leaf_name = std::move(name);
    n.trainable_leaf = trainable && !inference_;
    n.requires_grad = n.trainable_leaf;
    return push(std::move(n));
}

NodeId Graph::use(const Param& p) {
    auto it = param_cache_.find(&p);
    if (it != param_cache_.end()) return it->second;
    NodeId id = leaf(p.tensor, p.name, p.trainable);
    param_cache_[&p] = id;
    return id;
}

const Tensor& Graph::value(NodeId id) const {
    if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
        throw std::out_of_range("value: node id " + std::to_string(id) + " is not in this graph");
    return nodes_[static_cast<std::size_t>(id)].value;
}

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

NodeId Graph::add(NodeId a, NodeId b) {
    check_same_dtype("add", {a, b});
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!is_suffix(B.shape(), A.shape()))
        shape_error("add", shape_str(B.shape()) + " does not broadcast onto " + shape_str(A.shape()));
    Tensor out(A.shape(), dtype_);
    long na = A.numel(), nb = std::max<long>(B.numel(), 1);
    for (long i = 0; i < na; ++i) out[i] = A[i] + B[i % nb];
    out.quantize();
    Node n;
    n.op = Op::Add;
    n.inputs = {a, b};
    n.in_shapes = {A.shape(), B.shape()};
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    check_same_dtype("mul", {a, b});
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!is_suffix(B.shape(), A.shape()))
        shape_error("mul", shape_str(B.shape()) + " does not broadcast onto " + shape_str(A.shape()));
    Tensor out(A.shape(), dtype_);
    long na = A.numel(), nb = std::max<long>(B.numel(), 1);
    for (long i = 0; i < na; ++i) out[i] = A[i] * B[i % nb];
    out.quantize();
    Node n;
    n.op = Op::Mul;
    n.inputs = {a, b};
    n.in_shapes = {A.shape(), B.shape()};
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    if (n.requires_grad) {
        if (node(a).requires_grad) n.saved.push_back(b);
        if (node(b).requires_grad) n.saved.push_back(a);
    }
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    check_same_dtype("matmul", {a, b});
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
        shape_error("matmul", shape_str(A.shape()) + " x " + shape_str(B.shape()));
    long m = A.dim(0), k = A.dim(1), p = B.dim(1);
    Tensor out({m, p}, dtype_);
    const double* pa = A.data();
    const double* pb = B.data();
    double* po = out.data();
    for (long i = 0; i < m; ++i)
        for (long kk = 0; kk < k; ++kk) {
            double av = pa[i * k + kk];
            if (av == 0.0) continue;
            const double* row = pb + kk * p;
            double* orow = po + i * p;
            for (long j = 0; j < p; ++j) orow[j] += av * row[j];
        }
    out.quantize();
    Node n;
    n.op = Op::Matmul;
    n.inputs = {a, b};
    n.in_shapes = {A.shape(), B.shape()};
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    if (n.requires_grad) {
        if (node(a).requires_grad) n.saved.push_back(b);
        if (node(b).requires_grad) n.saved.push_back(a);
    }
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double s) {
    check_same_dtype("scale", {a});
    const Tensor& A = value(a);
    Tensor out(A.shape(), dtype_);
    for (long i = 0; i < A.numel(); ++i) out[i] = A[i] * s;
    out.quantize();
    Node n;
    n.op = Op::Scale;
    n.inputs = {a};
    n.in_shapes = {A.shape()};
    n.attrs.scalar = s;
    n.requires_grad = node(a).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, std::vector<long> shape) {
    check_same_dtype("reshape", {a});
    const Tensor& A = value(a);
    Tensor out = A.clone().viewed_as(std::move(shape));
    Node n;
    n.op = Op::Reshape;
    n.inputs = {a};
    n.in_shapes = {A.shape()};
    n.requires_grad = node(a).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
    check_same_dtype("transpose", {a});
    const Tensor& A = value(a);
    if (A.ndim() != 2) shape_error("transpose", "expected 2-D, got " + shape_str(A.shape()));
    long m = A.dim(0), k = A.dim(1);
    Tensor out({k, m}, dtype_);
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < k; ++j) out.at(j, i) = A.at(i, j);
    Node n;
    n.op = Op::Transpose;
    n.inputs = {a};
    n.in_shapes = {A.shape()};
    n.requires_grad = node(a).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::concat_tokens(NodeId a, NodeId b) {
    check_same_dtype("concat_tokens", {a, b});
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() == 0 || A.ndim() != B.ndim())
        shape_error("concat_tokens", shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    for (int i = 1; i < A.ndim(); ++i)
        if (A.dim(i) != B.dim(i))
            shape_error("concat_tokens", shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    std::vector<long> shape = A.shape();
    shape[0] += B.dim(0);
    Tensor out(shape, dtype_);
    std::copy(A.data(), A.data() + A.numel(), out.data());
    std::copy(B.data(), B.data() + B.numel(), out.data() + A.numel());
    Node n;
    n.op = Op::ConcatTokens;
    n.inputs = {a, b};
    n.in_shapes = {A.shape(), B.shape()};
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::split_tokens(NodeId a, long from, long to) {
    check_same_dtype("split_tokens", {a});
    const Tensor& A = value(a);
    if (A.ndim() == 0 || from < 0 || to > A.dim(0) || from >= to)
        shape_error("split_tokens", "rows [" + std::to_string(from) + "," + std::to_string(to) +
                                        ") of " + shape_str(A.shape()));
    long stride = A.numel() / A.dim(0);
    std::vector<long> shape = A.shape();
    shape[0] = to - from;
    Tensor out(shape, dtype_);
    std::copy(A.data() + from * stride, A.data() + to * stride, out.data());
    Node n;
    n.op = Op::SplitTokens;
    n.inputs = {a};
    n.in_shapes = {A.shape()};
    n.attrs.i0 = from;
    n.attrs.i1 = to;
    n.requires_grad = node(a).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::concat_cols(NodeId a, NodeId b) {
    check_same_dtype("concat_cols", {a, b});
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() == 0 || A.ndim() != B.ndim())
        shape_error("concat_cols", shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    for (int i = 0; i + 1 < A.ndim(); ++i)
        if (A.dim(i) != B.dim(i))
            shape_error("concat_cols", shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    long ca = last_dim(A.shape()), cb = last_dim(B.shape());
    long rows = A.numel() / std::max<long>(ca, 1);
    std::vector<long> shape = A.shape();
    shape.back() = ca + cb;
    Tensor out(shape, dtype_);
    for (long r = 0; r < rows; ++r) {
        std::copy(A.data() + r * ca, A.data() + (r + 1) * ca, out.data() + r * (ca + cb));
        std::copy(B.data() + r * cb, B.data() + (r + 1) * cb, out.data() + r * (ca + cb) + ca);
    }
    Node n;
    n.op = Op::ConcatCols;
    n.inputs = {a, b};
    n.in_shapes = {A.shape(), B.shape()};
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId a, long from, long to) {
    check_same_dtype("slice_cols", {a});
    const Tensor& A = value(a);
    long c = last_dim(A.shape());
    if (A.ndim() == 0 || from < 0 || to > c || from >= to)
        shape_error("slice_cols", "cols [" + std::to_string(from) + "," + std::to_string(to) +
                                      ") of " + shape_str(A.shape()));
    long rows = A.numel() / c;
    std::vector<long> shape = A.shape();
    shape.back() = to - from;
    Tensor out(shape, dtype_);
    for (long r = 0; r < rows; ++r)
        std::copy(A.data() + r * c + from, A.data() + r * c + to, out.data() + r * (to - from));
    Node n;
    n.op = Op::SliceCols;
    n.inputs = {a};
    n.in_shapes = {A.shape()};
    n.attrs.i0 = from;
    n.attrs.i1 = to;
    n.requires_grad = node(a).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::softmax(NodeId a) {
    check_same_dtype("softmax", {a});
    const Tensor& A = value(a);
    long d = last_dim(A.shape());
    if (A.ndim() == 0 || d == 0) shape_error("softmax", "empty last axis in " + shape_str(A.shape()));
    long rows = A.numel() / d;
    Tensor out(A.shape(), dtype_);
    for (long r = 0; r < rows; ++r) {
        const double* x = A.data() + r * d;
        double* y = out.data() + r * d;
        double mx = x[0];
        for (long j = 1; j < d; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (long j = 0; j < d; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        for (long j = 0; j < d; ++j) y[j] /= s;
    }
    out.quantize();
    Node n;
    n.op = Op::Softmax;
    n.inputs = {a};
    n.in_shapes = {A.shape()};
    n.requires_grad = node(a).requires_grad;
    if (n.requires_grad) n.saved.push_back(-1);  // own output
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
    check_same_dtype("layer_norm", {x, gamma, beta});
    const Tensor& X = value(x);
    const Tensor& G = value(gamma);
    const Tensor& B = value(beta);
    long d = last_dim(X.shape());
    if (X.ndim() == 0 || d == 0)
        shape_error("layer_norm", "empty last axis in " + shape_str(X.shape()));
    if (G.shape() != std::vector<long>{d} || B.shape() != std::vector<long>{d})
        shape_error("layer_norm", "gamma/beta " + shape_str(G.shape()) + "/" + shape_str(B.shape()) +
                                      " for input " + shape_str(X.shape()));
    long rows = X.numel() / d;
    Tensor out(X.shape(), dtype_);
    for (long r = 0; r < rows; ++r) {
        const double* xr = X.data() + r * d;
        double* y = out.data() + r * d;
        double mu = 0.0;
        for (long j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (long j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        for (long j = 0; j < d; ++j) y[j] = G[j] * ((xr[j] - mu) * inv) + B[j];
    }
    out.quantize();
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {x, gamma, beta};
    n.in_shapes = {X.shape(), G.shape(), B.shape()};
    n.attrs.scalar = eps;
    n.requires_grad =
        node(x).requires_grad || node(gamma).requires_grad || node(beta).requires_grad;
    if (n.requires_grad) {
        n.saved.push_back(x);  // x-hat is recomputed from x for every grad
        if (node(x).requires_grad) n.saved.push_back(gamma);
    }
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::gelu(NodeId a) {
    check_same_dtype("gelu", {a});
    const Tensor& A = value(a);
    Tensor out(A.shape(), dtype_);
    for (long i = 0; i < A.numel(); ++i) out[i] = gelu_fwd(A[i]);
    out.quantize();
    Node n;
    n.op = Op::Gelu;
    n.inputs = {a};
    n.in_shapes = {A.shape()};
    n.requires_grad = node(a).requires_grad;
    if (n.requires_grad) n.saved.push_back(a);
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::swish(NodeId a, double beta) {
    check_same_dtype("swish", {a});
    if (beta <= 0.0) shape_error("swish", "beta must be positive");
    const Tensor& A = value(a);
    Tensor out(A.shape(), dtype_);
    for (long i = 0; i < A.numel(); ++i) out[i] = A[i] * sigmoid(beta * A[i]);
    out.quantize();
    Node n;
    n.op = Op::Swish;
    n.inputs = {a};
    n.in_shapes = {A.shape()};
    n.attrs.scalar = beta;
    n.requires_grad = node(a).requires_grad;
    if (n.requires_grad) n.saved.push_back(a);
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::depthwise_conv2d(NodeId x, NodeId kernel, NodeId bias) {
    check_same_dtype("depthwise_conv2d", {x, kernel, bias});
    const Tensor& X = value(x);
    const Tensor& K = value(kernel);
    const Tensor& B = value(bias);
    if (X.ndim() != 3) shape_error("depthwise_conv2d", "input must be [C,H,W], got " + shape_str(X.shape()));
    long C = X.dim(0), H = X.dim(1), W = X.dim(2);
    if (K.ndim() != 3 || K.dim(0) != C || K.dim(1) != K.dim(2))
        shape_error("depthwise_conv2d", "kernel " + shape_str(K.shape()) + " for input " + shape_str(X.shape()));
    long k = K.dim(1);
    if (k % 2 == 0)
        shape_error("depthwise_conv2d", "even kernel size " + std::to_string(k) +
                                            " cannot preserve feature size with symmetric zero padding");
    if (B.shape() != std::vector<long>{C})
        shape_error("depthwise_conv2d", "bias " + shape_str(B.shape()) + " for " + std::to_string(C) + " channels");
    long p = k / 2;
    Tensor out({C, H, W}, dtype_);
    for (long c = 0; c < C; ++c) {
        const double* xc = X.data() + c * H * W;
        const double* kc = K.data() + c * k * k;
        double* oc = out.data() + c * H * W;
        for (long i = 0; i < H; ++i)
            for (long j = 0; j < W; ++j) {
                double acc = B[c];
                for (long di = 0; di < k; ++di) {
                    long si = i + di - p;
                    if (si < 0 || si >= H) continue;
                    for (long dj = 0; dj < k; ++dj) {
                        long sj = j + dj - p;
                        if (sj < 0 || sj >= W) continue;
                        acc += kc[di * k + dj] * xc[si * W + sj];
                    }
                }
                oc[i * W + j] = acc;
            }
    }
    out.quantize();
    Node n;
    n.op = Op::DwConv2d;
    n.inputs = {x, kernel, bias};
    n.in_shapes = {X.shape(), K.shape(), B.shape()};
    n.requires_grad =
        node(x).requires_grad || node(kernel).requires_grad || node(bias).requires_grad;
    if (n.requires_grad) {
        if (node(x).requires_grad) n.saved.push_back(kernel);
        if (node(kernel).requires_grad) n.saved.push_back(x);
    }
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId logits, long label) {
    check_same_dtype("cross_entropy", {logits});
    const Tensor& L = value(logits);
    if (L.ndim() != 1) shape_error("cross_entropy", "logits must be 1-D, got " + shape_str(L.shape()));
    long k = L.dim(0);
    if (label < 0 || label >= k)
        shape_error("cross_entropy", "label " + std::to_string(label) + " out of range for " +
                                         std::to_string(k) + " classes");
    double mx = L[0];
    for (long j = 1; j < k; ++j) mx = std::max(mx, L[j]);
    double lse = 0.0;
    for (long j = 0; j < k; ++j) lse += std::exp(L[j] - mx);
    lse = mx + std::log(lse);
    Tensor out = Tensor::scalar(lse - L[label], dtype_);
    Node n;
    n.op = Op::CrossEntropy;
    n.inputs = {logits};
    n.in_shapes = {L.shape()};
    n.attrs.i0 = label;
    n.requires_grad = node(logits).requires_grad;
    if (n.requires_grad) n.saved.push_back(logits);
    n.value = std::move(out);
    return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
    check_same_dtype("sum", {a});
    const Tensor& A = value(a);
    double s = 0.0;
    for (long i = 0; i < A.numel(); ++i) s += A[i];
    Tensor out = Tensor::scalar(s, dtype_);
    Node n;
    n.op = Op::Sum;
    n.inputs = {a};
    n.in_shapes = {A.shape()};
    n.requires_grad = node(a).requires_grad;
    n.value = std::move(out);
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

namespace {

// Sums `g` down to `shape` (suffix-broadcast inverse).
Tensor reduce_to(const Tensor& g, const std::vector<long>& shape, DType dtype) {
    if (g.shape() == shape) return g.clone();
    Tensor out(shape, dtype);
    long nb = std::max<long>(out.numel(), 1);
    for (long i = 0; i < g.numel(); ++i) out[i % nb] += g[i];
    return out;
}

}  // namespace

GradStore Graph::backward(NodeId loss) {
    if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size()))
        throw std::invalid_argument("backward: loss node " + std::to_string(loss) +
                                    " is not part of this graph");
    const Node& ln = nodes_[static_cast<std::size_t>(loss)];
    if (!ln.out_shape.empty())
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(ln.out_shape));

    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss)] = Tensor::full({}, 1.0, dtype_);

    auto saved_value = [&](const Node& n, NodeId id) -> const Tensor& {
        bool listed = std::find(n.saved.begin(), n.saved.end(), id) != n.saved.end();
        const Node& src = nodes_[static_cast<std::size_t>(id)];
        bool leaf_ok = src.op == Op::Leaf;
        if (!listed && !leaf_ok)
            throw std::logic_error(std::string("backward(") + op_name(n.op) +
                                   "): reads a tensor outside saved_for_backward");
        if (!src.value.defined())
            throw std::logic_error(std::string("backward(") + op_name(n.op) +
                                   "): required tensor was released");
        return src.value;
    };

    auto accumulate = [&](NodeId id, Tensor g) {
        const Node& tgt = nodes_[static_cast<std::size_t>(id)];
        if (!tgt.requires_grad) return;
        Tensor& slot = grads[static_cast<std::size_t>(id)];
        if (!slot.defined()) {
            slot = std::move(g);
            return;
        }
        for (long i = 0; i < slot.numel(); ++i) slot[i] += g[i];
    };

    for (NodeId id = loss; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        Tensor& g = grads[static_cast<std::size_t>(id)];
        if (!g.defined() || !n.requires_grad || n.op == Op::Leaf) continue;

        switch (n.op) {
            case Op::Add: {
                accumulate(n.inputs[0], g.clone());
                accumulate(n.inputs[1], reduce_to(g, n.in_shapes[1], dtype_));
                break;
            }
            case Op::Mul: {
                if (nodes_[static_cast<std::size_t>(n.inputs[0])].requires_grad) {
                    const Tensor& B = saved_value(n, n.inputs[1]);
                    Tensor ga(n.in_shapes[0], dtype_);
                    long nb = std::max<long>(B.numel(), 1);
                    for (long i = 0; i < ga.numel(); ++i) ga[i] = g[i] * B[i % nb];
                    accumulate(n.inputs[0], std::move(ga));
                }
                if (nodes_[static_cast<std::size_t>(n.inputs[1])].requires_grad) {
                    const Tensor& A = saved_value(n, n.inputs[0]);
                    Tensor tmp(n.in_shapes[0], dtype_);
                    for (long i = 0; i < tmp.numel(); ++i) tmp[i] = g[i] * A[i];
                    accumulate(n.inputs[1], reduce_to(tmp, n.in_shapes[1], dtype_));
                }
                break;
            }
            case Op::Matmul: {
                long m = n.in_shapes[0][0], k = n.in_shapes[0][1], p = n.in_shapes[1][1];
                if (nodes_[static_cast<std::size_t>(n.inputs[0])].requires_grad) {
                    const Tensor& B = saved_value(n, n.inputs[1]);
                    Tensor ga({m, k}, dtype_);
                    for (long i = 0; i < m; ++i)
                        for (long j = 0; j < p; ++j) {
                            double gv = g.at(i, j);
                            if (gv == 0.0) continue;
                            for (long kk = 0; kk < k; ++kk) ga.at(i, kk) += gv * B.at(kk, j);
                        }
                    accumulate(n.inputs[0], std::move(ga));
                }
                if (nodes_[static_cast<std::size_t>(n.inputs[1])].requires_grad) {
                    const Tensor& A = saved_value(n, n.inputs[0]);
                    Tensor gb({k, p}, dtype_);
                    for (long i = 0; i < m; ++i)
                        for (long kk = 0; kk < k; ++kk) {
                            double av = A.at(i, kk);
                            if (av == 0.0) continue;
                            for (long j = 0; j < p; ++j) gb.at(kk, j) += av * g.at(i, j);
                        }
                    accumulate(n.inputs[1], std::move(gb));
                }
                break;
            }
            case Op::Scale: {
                Tensor ga(n.in_shapes[0], dtype_);
                for (long i = 0; i < ga.numel(); ++i) ga[i] = g[i] * n.attrs.scalar;
                accumulate(n.inputs[0], std::move(ga));
                break;
            }
            case Op::Reshape: {
                accumulate(n.inputs[0], g.clone().viewed_as(n.in_shapes[0]));
                break;
            }
            case Op::Transpose: {
                long m = n.in_shapes[0][0], k = n.in_shapes[0][1];
                Tensor ga({m, k}, dtype_);
                for (long i = 0; i < m; ++i)
                    for (long j = 0; j < k; ++j) ga.at(i, j) = g.at(j, i);
                accumulate(n.inputs[0], std::move(ga));
                break;
            }
            case Op::ConcatTokens: {
                long ra = n.in_shapes[0][0];
                long stride = 1;
                for (std::size_t i = 1; i < n.in_shapes[0].size(); ++i) stride *= n.in_shapes[0][i];
                Tensor ga(n.in_shapes[0], dtype_);
                Tensor gb(n.in_shapes[1], dtype_);
                std::copy(g.data(), g.data() + ra * stride, ga.data());
                std::copy(g.data() + ra * stride, g.data() + g.numel(), gb.data());
                accumulate(n.inputs[0], std::move(ga));
                accumulate(n.inputs[1], std::move(gb));
                break;
            }
            case Op::SplitTokens: {
                long stride = 1;
                for (std::size_t i = 1; i < n.in_shapes[0].size(); ++i) stride *= n.in_shapes[0][i];
                Tensor ga(n.in_shapes[0], dtype_);
                std::copy(g.data(), g.data() + g.numel(), ga.data() + n.attrs.i0 * stride);
                accumulate(n.inputs[0], std::move(ga));
                break;
            }
            case Op::ConcatCols: {
                long ca = n.in_shapes[0].back(), cb = n.in_shapes[1].back();
                long rows = g.numel() / (ca + cb);
                Tensor ga(n.in_shapes[0], dtype_);
                Tensor gb(n.in_shapes[1], dtype_);
                for (long r = 0; r < rows; ++r) {
                    std::copy(g.data() + r * (ca + cb), g.data() + r * (ca + cb) + ca,
                              ga.data() + r * ca);
                    std::copy(g.data() + r * (ca + cb) + ca, g.data() + (r + 1) * (ca + cb),
                              gb.data() + r * cb);
                }
                accumulate(n.inputs[0], std::move(ga));
                accumulate(n.inputs[1], std::move(gb));
                break;
            }
            case Op::SliceCols: {
                long c = n.in_shapes[0].back();
                long w = n.attrs.i1 - n.attrs.i0;
                long rows = g.numel() / w;
                Tensor ga(n.in_shapes[0], dtype_);
                for (long r = 0; r < rows; ++r)
                    std::copy(g.data() + r * w, g.data() + (r + 1) * w,
                              ga.data() + r * c + n.attrs.i0);
                accumulate(n.inputs[0], std::move(ga));
                break;
            }
            case Op::Softmax: {
                const Tensor& y = saved_value(n, id);
                long d = n.out_shape.back();
                long rows = g.numel() / d;
                Tensor ga(n.in_shapes[0], dtype_);
                for (long r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (long j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                    for (long j = 0; j < d; ++j)
                        ga[r * d + j] = (g[r * d + j] - dot) * y[r * d + j];
                }
                accumulate(n.inputs[0], std::move(ga));
                break;
            }
            case Op::LayerNorm: {
                const Tensor& X = saved_value(n, n.inputs[0]);
                long d = n.in_shapes[0].back();
                long rows = X.numel() / d;
                double eps = n.attrs.scalar;
                bool need_x = nodes_[static_cast<std::size_t>(n.inputs[0])].requires_grad;
                bool need_g = nodes_[static_cast<std::size_t>(n.inputs[1])].requires_grad;
                bool need_b = nodes_[static_cast<std::size_t>(n.inputs[2])].requires_grad;
                Tensor gx, gg, gb;
                if (need_x) gx = Tensor(n.in_shapes[0], dtype_);
                if (need_g) gg = Tensor({d}, dtype_);
                if (need_b) gb = Tensor({d}, dtype_);
                const Tensor* G = need_x ? &saved_value(n, n.inputs[1]) : nullptr;
                std::vector<double> xhat(static_cast<std::size_t>(d));
                for (long r = 0; r < rows; ++r) {
                    const double* xr = X.data() + r * d;
                    const double* gr = g.data() + r * d;
                    double mu = 0.0;
                    for (long j = 0; j < d; ++j) mu += xr[j];
                    mu /= static_cast<double>(d);
                    double var = 0.0;
                    for (long j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                    var /= static_cast<double>(d);
                    double inv = 1.0 / std::sqrt(var + eps);
                    for (long j = 0; j < d; ++j) xhat[static_cast<std::size_t>(j)] = (xr[j] - mu) * inv;
                    if (need_g)
                        for (long j = 0; j < d; ++j) gg[j] += gr[j] * xhat[static_cast<std::size_t>(j)];
                    if (need_b)
                        for (long j = 0; j < d; ++j) gb[j] += gr[j];
                    if (need_x) {
                        double m1 = 0.0, m2 = 0.0;
                        for (long j = 0; j < d; ++j) {
                            double gh = gr[j] * (*G)[j];
                            m1 += gh;
                            m2 += gh * xhat[static_cast<std::size_t>(j)];
                        }
                        m1 /= static_cast<double>(d);
                        m2 /= static_cast<double>(d);
                        for (long j = 0; j < d; ++j) {
                            double gh = gr[j] * (*G)[j];
                            gx[r * d + j] = inv * (gh - m1 - xhat[static_cast<std::size_t>(j)] * m2);
                        }
                    }
                }
                if (need_x) accumulate(n.inputs[0], std::move(gx));
                if (need_g) accumulate(n.inputs[1], std::move(gg));
                if (need_b) accumulate(n.inputs[2], std::move(gb));
                break;
            }
            case Op::Gelu: {
                const Tensor& X = saved_value(n, n.inputs[0]);
                Tensor ga(n.in_shapes[0], dtype_);
                for (long i = 0; i < ga.numel(); ++i) ga[i] = g[i] * gelu_bwd(X[i]);
                accumulate(n.inputs[0], std::move(ga));
                break;
            }
            case Op::Swish: {
                const Tensor& X = saved_value(n, n.inputs[0]);
                double beta = n.attrs.scalar;
                Tensor ga(n.in_shapes[0], dtype_);
                for (long i = 0; i < ga.numel(); ++i) {
                    double s = sigmoid(beta * X[i]);
                    ga[i] = g[i] * (s + beta * X[i] * s * (1.0 - s));
                }
                accumulate(n.inputs[0], std::move(ga));
                break;
            }
            case Op::DwConv2d: {
                long C = n.in_shapes[0][0], H = n.in_shapes[0][1], W = n.in_shapes[0][2];
                long k = n.in_shapes[1][1];
                long p = k / 2;
                bool need_x = nodes_[static_cast<std::size_t>(n.inputs[0])].requires_grad;
                bool need_k = nodes_[static_cast<std::size_t>(n.inputs[1])].requires_grad;
                bool need_b = nodes_[static_cast<std::size_t>(n.inputs[2])].requires_grad;
                if (need_x) {
                    const Tensor& K = saved_value(n, n.inputs[1]);
                    Tensor gx(n.in_shapes[0], dtype_);
                    for (long c = 0; c < C; ++c) {
                        const double* kc = K.data() + c * k * k;
                        for (long i = 0; i < H; ++i)
                            for (long j = 0; j < W; ++j) {
                                double gv = g[c * H * W + i * W + j];
                                if (gv == 0.0) continue;
                                for (long di = 0; di < k; ++di) {
                                    long si = i + di - p;
                                    if (si < 0 || si >= H) continue;
                                    for (long dj = 0; dj < k; ++dj) {
                                        long sj = j + dj - p;
                                        if (sj < 0 || sj >= W) continue;
                                        gx[c * H * W + si * W + sj] += gv * kc[di * k + dj];
                                    }
                                }
                            }
                    }
                    accumulate(n.inputs[0], std::move(gx));
                }
                if (need_k) {
                    const Tensor& X = saved_value(n, n.inputs[0]);
                    Tensor gk(n.in_shapes[1], dtype_);
                    for (long c = 0; c < C; ++c) {
                        const double* xc = X.data() + c * H * W;
                        for (long i = 0; i < H; ++i)
                            for (long j = 0; j < W; ++j) {
                                double gv = g[c * H * W + i * W + j];
                                if (gv == 0.0) continue;
                                for (long di = 0; di < k; ++di) {
                                    long si = i + di - p;
                                    if (si < 0 || si >= H) continue;
                                    for (long dj = 0; dj < k; ++dj) {
                                        long sj = j + dj - p;
                                        if (sj < 0 || sj >= W) continue;
                                        gk[c * k * k + di * k + dj] += gv * xc[si * W + sj];
                                    }
                                }
                            }
                    }
                    accumulate(n.inputs[1], std::move(gk));
                }
                if (need_b) {
                    Tensor gb({C}, dtype_);
                    for (long c = 0; c < C; ++c)
                        for (long s = 0; s < H * W; ++s) gb[c] += g[c * H * W + s];
                    accumulate(n.inputs[2], std::move(gb));
                }
                break;
            }
            case Op::CrossEntropy: {
                const Tensor& L = saved_value(n, n.inputs[0]);
                long k = n.in_shapes[0][0];
                double mx = L[0];
                for (long j = 1; j < k; ++j) mx = std::max(mx, L[j]);
                double z = 0.0;
                for (long j = 0; j < k; ++j) z += std::exp(L[j] - mx);
                Tensor ga({k}, dtype_);
                double gv = g[0];
                for (long j = 0; j < k; ++j) {
                    double pr = std::exp(L[j] - mx) / z;
                    ga[j] = gv * (pr - (j == n.attrs.i0 ? 1.0 : 0.0));
                }
                accumulate(n.inputs[0], std::move(ga));
                break;
            }
            case Op::Sum: {
                Tensor ga(n.in_shapes[0], dtype_);
                for (long i = 0; i < ga.numel(); ++i) ga[i] = g[0];
                accumulate(n.inputs[0], std::move(ga));
                break;
            }
            case Op::Leaf:
                break;
        }
        // Release the upstream gradient as soon as it has been consumed.
        g = Tensor();
    }

    GradStore store;
    for (NodeId id = 0; id <= loss; ++id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.op == Op::Leaf && n.trainable_leaf && grads[static_cast<std::size_t>(id)].defined())
            store[n.leaf_name] = std::move(grads[static_cast<std::size_t>(id)]);
    }
    return store;
}

void Graph::release_unsaved_values(NodeId keep) {
    std::set<NodeId> pinned;
    pinned.insert(keep);
    for (const Node& n : nodes_)
        for (NodeId s : n.saved) pinned.insert(s);
    for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.op == Op::Leaf || pinned.count(id)) continue;
        n.value = Tensor();
    }
}

}  // namespace dtl
