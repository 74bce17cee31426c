#include "cedual/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace cedual {

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorNode> make_node(const Shape& shape, const char* op) {
    for (auto d : shape)
        if (d <= 0) throw DimensionError(std::string(op) + ": nonpositive dimension in " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    n->op = op;
    return n;
}

// Wire the output node into the graph. `parents` should hold the
// gradient-tracked inputs; the closure may capture whatever else it needs.
void record(const std::shared_ptr<TensorNode>& out,
            std::vector<std::shared_ptr<TensorNode>> parents,
            std::function<void(TensorNode&)> backward_fn) {
    out->requires_grad = true;
    out->grad.assign(out->data.size(), 0.0);
    out->parents = std::move(parents);
    out->backward_fn = std::move(backward_fn);
}

bool tracked(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

void check_rank2(const char* op, const Tensor& t) {
    if (t.ndim() != 2)
        throw DimensionError(std::string(op) + ": rank-2 tensor required, got " +
                             shape_str(t.shape()));
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

// ---- Tensor methods ----

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto n = make_node(shape, "zeros");
    if (requires_grad) record(n, {}, nullptr);
    return Tensor(n);
}

Tensor Tensor::ones(const Shape& shape, bool requires_grad) { return full(shape, 1.0, requires_grad); }

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    auto n = make_node(shape, "full");
    std::fill(n->data.begin(), n->data.end(), value);
    if (requires_grad) record(n, {}, nullptr);
    return Tensor(n);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
    auto n = make_node(shape, "from_data");
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
        throw DimensionError("from_data: " + std::to_string(data.size()) +
                             " values for shape " + shape_str(shape));
    n->data = std::move(data);
    if (requires_grad) record(n, {}, nullptr);
    return Tensor(n);
}

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, Rng& rng, bool requires_grad) {
    auto n = make_node(shape, "uniform");
    for (auto& v : n->data) v = rng.uniform(lo, hi);
    if (requires_grad) record(n, {}, nullptr);
    return Tensor(n);
}

std::int64_t Tensor::rows() const {
    if (ndim() != 2) throw DimensionError("rows: rank-2 tensor required, got " + shape_str(shape()));
    return node_->shape[0];
}

std::int64_t Tensor::cols() const {
    if (ndim() != 2) throw DimensionError("cols: rank-2 tensor required, got " + shape_str(shape()));
    return node_->shape[1];
}

std::span<const double> Tensor::grad() const {
    if (!node_->requires_grad)
        throw ContractError("grad: tensor does not track gradients");
    return node_->grad;
}

double Tensor::value() const {
    if (node_->data.size() != 1)
        throw ContractError("value: scalar tensor required, got " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::all_finite() const {
    for (double v : node_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::detach() const {
    auto n = make_node(node_->shape, "detach");
    n->data = node_->data;
    return Tensor(n);
}

void Tensor::zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
    if (!node_) throw ContractError("backward: undefined tensor");
    if (node_->data.size() != 1)
        throw ContractError("backward: scalar root required, got " + shape_str(shape()));
    if (!node_->requires_grad) return;  // constant graph: nothing to propagate

    // Iterative post-order DFS over gradient-tracked ancestors; reversing the
    // resulting order visits every node before any of its inputs.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* n;
        std::size_t next;
    };
    std::vector<Frame> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---- elementwise / linear algebra ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    auto out = make_node(a.shape(), "add");
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] + b.data()[i];
    if (tracked(a) || tracked(b)) {
        auto pa = a.node_ptr(), pb = b.node_ptr();
        std::vector<std::shared_ptr<TensorNode>> parents;
        if (tracked(a)) parents.push_back(pa);
        if (tracked(b)) parents.push_back(pb);
        record(out, std::move(parents), [pa, pb](TensorNode& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (pa->requires_grad) pa->grad[i] += self.grad[i];
                if (pb->requires_grad) pb->grad[i] += self.grad[i];
            }
        });
    }
    return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    auto out = make_node(a.shape(), "sub");
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] - b.data()[i];
    if (tracked(a) || tracked(b)) {
        auto pa = a.node_ptr(), pb = b.node_ptr();
        std::vector<std::shared_ptr<TensorNode>> parents;
        if (tracked(a)) parents.push_back(pa);
        if (tracked(b)) parents.push_back(pb);
        record(out, std::move(parents), [pa, pb](TensorNode& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (pa->requires_grad) pa->grad[i] += self.grad[i];
                if (pb->requires_grad) pb->grad[i] -= self.grad[i];
            }
        });
    }
    return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    auto out = make_node(a.shape(), "mul");
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a.data()[i] * b.data()[i];
    if (tracked(a) || tracked(b)) {
        auto pa = a.node_ptr(), pb = b.node_ptr();
        std::vector<std::shared_ptr<TensorNode>> parents;
        if (tracked(a)) parents.push_back(pa);
        if (tracked(b)) parents.push_back(pb);
        record(out, std::move(parents), [pa, pb](TensorNode& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (pa->requires_grad) pa->grad[i] += self.grad[i] * pb->data[i];
                if (pb->requires_grad) pb->grad[i] += self.grad[i] * pa->data[i];
            }
        });
    }
    return Tensor(out);
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    check_rank2("add_rowvec", x);
    if (b.ndim() != 1 || b.dim(0) != x.cols())
        throw DimensionError("add_rowvec: vector " + shape_str(b.shape()) +
                             " does not match row width of " + shape_str(x.shape()));
    const auto n = x.rows(), d = x.cols();
    auto out = make_node(x.shape(), "add_rowvec");
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j)
            out->data[static_cast<std::size_t>(i * d + j)] = x.at(i, j) + b.at(j);
    if (tracked(x) || tracked(b)) {
        auto px = x.node_ptr(), pb = b.node_ptr();
        std::vector<std::shared_ptr<TensorNode>> parents;
        if (tracked(x)) parents.push_back(px);
        if (tracked(b)) parents.push_back(pb);
        record(out, std::move(parents), [px, pb, n, d](TensorNode& self) {
            if (px->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
            if (pb->requires_grad)
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < d; ++j)
                        pb->grad[static_cast<std::size_t>(j)] +=
                            self.grad[static_cast<std::size_t>(i * d + j)];
        });
    }
    return Tensor(out);
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double s) {
    auto out = make_node(x.shape(), "scale");
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x.data()[i] * s;
    if (tracked(x)) {
        auto px = x.node_ptr();
        record(out, {px}, [px, s](TensorNode& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * s;
        });
    }
    return Tensor(out);
}

Tensor add_scalar(const Tensor& x, double s) {
    auto out = make_node(x.shape(), "add_scalar");
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x.data()[i] + s;
    if (tracked(x)) {
        auto px = x.node_ptr();
        record(out, {px}, [px](TensorNode& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        });
    }
    return Tensor(out);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2("matmul", a);
    check_rank2("matmul", b);
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    const auto m = a.rows(), k = a.cols(), n = b.cols();
    auto out = make_node({m, n}, "matmul");
    {
        const double* A = a.data().data();
        const double* B = b.data().data();
        double* O = out->data.data();
        for (std::int64_t i = 0; i < m; ++i) {
            const double* arow = A + i * k;
            double* orow = O + i * n;
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = B + p * n;
                for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }
    if (tracked(a) || tracked(b)) {
        auto pa = a.node_ptr(), pb = b.node_ptr();
        std::vector<std::shared_ptr<TensorNode>> parents;
        if (tracked(a)) parents.push_back(pa);
        if (tracked(b)) parents.push_back(pb);
        record(out, std::move(parents), [pa, pb, m, k, n](TensorNode& self) {
            const double* G = self.grad.data();
            if (pa->requires_grad) {  // gA = G * B^T
                const double* B = pb->data.data();
                double* GA = pa->grad.data();
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* grow = G + i * n;
                    double* garow = GA + i * k;
                    for (std::int64_t p = 0; p < k; ++p) {
                        const double* brow = B + p * n;
                        double acc = 0.0;
                        for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        garow[p] += acc;
                    }
                }
            }
            if (pb->requires_grad) {  // gB = A^T * G
                const double* A = pa->data.data();
                double* GB = pb->grad.data();
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* arow = A + i * k;
                    const double* grow = G + i * n;
                    for (std::int64_t p = 0; p < k; ++p) {
                        const double av = arow[p];
                        double* gbrow = GB + p * n;
                        for (std::int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return Tensor(out);
}

Tensor transpose(const Tensor& x) {
    check_rank2("transpose", x);
    const auto n = x.rows(), d = x.cols();
    auto out = make_node({d, n}, "transpose");
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j)
            out->data[static_cast<std::size_t>(j * n + i)] = x.at(i, j);
    if (tracked(x)) {
        auto px = x.node_ptr();
        record(out, {px}, [px, n, d](TensorNode& self) {
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < d; ++j)
                    px->grad[static_cast<std::size_t>(i * d + j)] +=
                        self.grad[static_cast<std::size_t>(j * n + i)];
        });
    }
    return Tensor(out);
}

Tensor relu(const Tensor& x) {
    auto out = make_node(x.shape(), "relu");
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    if (tracked(x)) {
        auto px = x.node_ptr();
        record(out, {px}, [px](TensorNode& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (px->data[i] > 0.0) px->grad[i] += self.grad[i];
        });
    }
    return Tensor(out);
}

Tensor sum(const Tensor& x) {
    auto out = make_node({}, "sum");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out->data[0] = acc;
    if (tracked(x)) {
        auto px = x.node_ptr();
        record(out, {px}, [px](TensorNode& self) {
            const double g = self.grad[0];
            for (auto& gv : px->grad) gv += g;
        });
    }
    return Tensor(out);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const auto n = parts[0].rows();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        check_rank2("concat_cols", p);
        if (p.rows() != n)
            throw DimensionError("concat_cols: row counts disagree: " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(p.shape()));
        total += p.cols();
    }
    auto out = make_node({n, total}, "concat_cols");
    std::int64_t off = 0;
    for (const auto& p : parts) {
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < p.cols(); ++j)
                out->data[static_cast<std::size_t>(i * total + off + j)] = p.at(i, j);
        off += p.cols();
    }
    bool any = false;
    for (const auto& p : parts) any = any || tracked(p);
    if (any) {
        std::vector<std::shared_ptr<TensorNode>> nodes;
        std::vector<std::shared_ptr<TensorNode>> parents;
        for (const auto& p : parts) {
            nodes.push_back(p.node_ptr());
            if (tracked(p)) parents.push_back(p.node_ptr());
        }
        record(out, std::move(parents), [nodes, n, total](TensorNode& self) {
            std::int64_t off2 = 0;
            for (const auto& pn : nodes) {
                const std::int64_t w = pn->shape[1];
                if (pn->requires_grad)
                    for (std::int64_t i = 0; i < n; ++i)
                        for (std::int64_t j = 0; j < w; ++j)
                            pn->grad[static_cast<std::size_t>(i * w + j)] +=
                                self.grad[static_cast<std::size_t>(i * total + off2 + j)];
                off2 += w;
            }
        });
    }
    return Tensor(out);
}

Tensor slice_cols(const Tensor& x, std::int64_t c0, std::int64_t c1) {
    check_rank2("slice_cols", x);
    if (c0 < 0 || c1 <= c0 || c1 > x.cols())
        throw DimensionError("slice_cols: range [" + std::to_string(c0) + ", " +
                             std::to_string(c1) + ") invalid for " + shape_str(x.shape()));
    const auto n = x.rows(), d = x.cols(), w = c1 - c0;
    auto out = make_node({n, w}, "slice_cols");
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < w; ++j)
            out->data[static_cast<std::size_t>(i * w + j)] = x.at(i, c0 + j);
    if (tracked(x)) {
        auto px = x.node_ptr();
        record(out, {px}, [px, n, d, w, c0](TensorNode& self) {
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < w; ++j)
                    px->grad[static_cast<std::size_t>(i * d + c0 + j)] +=
                        self.grad[static_cast<std::size_t>(i * w + j)];
        });
    }
    return Tensor(out);
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    auto out = make_node(shape, "reshape");
    out->data.assign(x.data().begin(), x.data().end());
    if (tracked(x)) {
        auto px = x.node_ptr();
        record(out, {px}, [px](TensorNode& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        });
    }
    return Tensor(out);
}

Tensor row_vector(const Tensor& x, std::int64_t r) {
    check_rank2("row_vector", x);
    if (r < 0 || r >= x.rows())
        throw DimensionError("row_vector: row " + std::to_string(r) + " out of range for " +
                             shape_str(x.shape()));
    const auto d = x.cols();
    auto out = make_node({d}, "row_vector");
    for (std::int64_t j = 0; j < d; ++j) out->data[static_cast<std::size_t>(j)] = x.at(r, j);
    if (tracked(x)) {
        auto px = x.node_ptr();
        record(out, {px}, [px, r, d](TensorNode& self) {
            for (std::int64_t j = 0; j < d; ++j)
                px->grad[static_cast<std::size_t>(r * d + j)] +=
                    self.grad[static_cast<std::size_t>(j)];
        });
    }
    return Tensor(out);
}

// ---- neural-net primitives ----

namespace {

// Stabilized softmax of a strided slice, writing into out (same stride).
void softmax_slice(const double* x, double* out, std::int64_t len, std::int64_t stride) {
    double mx = x[0];
    for (std::int64_t i = 1; i < len; ++i) mx = std::max(mx, x[i * stride]);
    double z = 0.0;
    for (std::int64_t i = 0; i < len; ++i) {
        const double e = std::exp(x[i * stride] - mx);
        out[i * stride] = e;
        z += e;
    }
    for (std::int64_t i = 0; i < len; ++i) out[i * stride] /= z;
}

// dL/dx for one softmax slice: p .* (g - <g, p>)
void softmax_slice_backward(const double* p, const double* g, double* gx, std::int64_t len,
                            std::int64_t stride) {
    double inner = 0.0;
    for (std::int64_t i = 0; i < len; ++i) inner += g[i * stride] * p[i * stride];
    for (std::int64_t i = 0; i < len; ++i)
        gx[i * stride] += p[i * stride] * (g[i * stride] - inner);
}

}  // namespace

Tensor softmax(const Tensor& x, std::int64_t axis) {
    if (axis < 0 || axis >= x.ndim())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                             shape_str(x.shape()));
    auto out = make_node(x.shape(), "softmax");
    const double* X = x.data().data();
    double* O = out->data.data();
    if (x.ndim() == 1) {
        softmax_slice(X, O, x.dim(0), 1);
    } else if (x.ndim() == 2) {
        const auto n = x.rows(), d = x.cols();
        if (axis == 1)
            for (std::int64_t i = 0; i < n; ++i) softmax_slice(X + i * d, O + i * d, d, 1);
        else
            for (std::int64_t j = 0; j < d; ++j) softmax_slice(X + j, O + j, n, d);
    } else {
        throw DimensionError("softmax: rank " + std::to_string(x.ndim()) + " unsupported");
    }
    if (tracked(x)) {
        auto px = x.node_ptr();
        const Shape shape = x.shape();
        // self *is* the output node, so the forward probabilities are read
        // back from self.data (capturing the output's shared_ptr would cycle).
        record(out, {px}, [px, shape, axis](TensorNode& self) {
            const double* P = self.data.data();
            const double* G = self.grad.data();
            double* GX = px->grad.data();
            if (shape.size() == 1) {
                softmax_slice_backward(P, G, GX, shape[0], 1);
            } else {
                const std::int64_t n = shape[0], d = shape[1];
                if (axis == 1)
                    for (std::int64_t i = 0; i < n; ++i)
                        softmax_slice_backward(P + i * d, G + i * d, GX + i * d, d, 1);
                else
                    for (std::int64_t j = 0; j < d; ++j)
                        softmax_slice_backward(P + j, G + j, GX + j, n, d);
            }
        });
    }
    return Tensor(out);
}

Tensor masked_softmax_rows(const Tensor& scores, const BoolMatrix& allow,
                           std::int64_t* fully_masked_rows) {
    check_rank2("masked_softmax_rows", scores);
    if (allow.rows != scores.rows() || allow.cols != scores.cols())
        throw DimensionError("masked_softmax_rows: mask " + shape_str({allow.rows, allow.cols}) +
                             " does not match scores " + shape_str(scores.shape()));
    const auto n = scores.rows(), d = scores.cols();
    auto out = make_node(scores.shape(), "masked_softmax_rows");
    for (std::int64_t i = 0; i < n; ++i) {
        double mx = -INFINITY;
        for (std::int64_t j = 0; j < d; ++j)
            if (allow.at(i, j)) mx = std::max(mx, scores.at(i, j));
        if (mx == -INFINITY) {  // no key visible to this query
            if (fully_masked_rows) ++*fully_masked_rows;
            continue;  // row stays exactly zero
        }
        double z = 0.0;
        for (std::int64_t j = 0; j < d; ++j)
            if (allow.at(i, j)) {
                const double e = std::exp(scores.at(i, j) - mx);
                out->data[static_cast<std::size_t>(i * d + j)] = e;
                z += e;
            }
        for (std::int64_t j = 0; j < d; ++j)
            if (allow.at(i, j)) out->data[static_cast<std::size_t>(i * d + j)] /= z;
    }
    if (tracked(scores)) {
        auto px = scores.node_ptr();
        BoolMatrix mask = allow;
        record(out, {px}, [px, mask, n, d](TensorNode& self) {
            for (std::int64_t i = 0; i < n; ++i) {
                double inner = 0.0;
                for (std::int64_t j = 0; j < d; ++j)
                    if (mask.at(i, j)) {
                        const auto idx = static_cast<std::size_t>(i * d + j);
                        inner += self.grad[idx] * self.data[idx];
                    }
                for (std::int64_t j = 0; j < d; ++j)
                    if (mask.at(i, j)) {
                        const auto idx = static_cast<std::size_t>(i * d + j);
                        px->grad[idx] += self.data[idx] * (self.grad[idx] - inner);
                    }
            }
        });
    }
    return Tensor(out);
}

Tensor mean_pool(const Tensor& x, const std::vector<std::uint8_t>& keep) {
    check_rank2("mean_pool", x);
    if (static_cast<std::int64_t>(keep.size()) != x.rows())
        throw DimensionError("mean_pool: mask of length " + std::to_string(keep.size()) +
                             " for " + shape_str(x.shape()));
    const auto n = x.rows(), d = x.cols();
    std::int64_t count = 0;
    for (auto k : keep)
        if (k) ++count;
    if (count == 0) throw DomainError("mean_pool: every row is masked out");
    auto out = make_node({d}, "mean_pool");
    for (std::int64_t i = 0; i < n; ++i) {
        if (!keep[static_cast<std::size_t>(i)]) continue;
        for (std::int64_t j = 0; j < d; ++j)
            out->data[static_cast<std::size_t>(j)] += x.at(i, j);
    }
    const double inv = 1.0 / static_cast<double>(count);
    for (auto& v : out->data) v *= inv;
    if (tracked(x)) {
        auto px = x.node_ptr();
        auto mask = keep;
        record(out, {px}, [px, mask, n, d, inv](TensorNode& self) {
            for (std::int64_t i = 0; i < n; ++i) {
                if (!mask[static_cast<std::size_t>(i)]) continue;
                for (std::int64_t j = 0; j < d; ++j)
                    px->grad[static_cast<std::size_t>(i * d + j)] +=
                        self.grad[static_cast<std::size_t>(j)] * inv;
            }
        });
    }
    return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const bool vector_input = x.ndim() == 1;
    if (x.ndim() != 1 && x.ndim() != 2)
        throw DimensionError("layer_norm: rank-1 or rank-2 input required, got " +
                             shape_str(x.shape()));
    const std::int64_t n = vector_input ? 1 : x.dim(0);
    const std::int64_t d = vector_input ? x.dim(0) : x.dim(1);
    if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
        throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                             shape_str(bias.shape()) + " do not match width " + std::to_string(d));

    auto out = make_node(x.shape(), "layer_norm");
    std::vector<double> xhat(static_cast<std::size_t>(n * d));
    std::vector<double> invstd(static_cast<std::size_t>(n));
    const double* X = x.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double* xr = X + i * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[static_cast<std::size_t>(i)] = is;
        for (std::int64_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - mean) * is;
            xhat[static_cast<std::size_t>(i * d + j)] = xh;
            out->data[static_cast<std::size_t>(i * d + j)] = gain.at(j) * xh + bias.at(j);
        }
    }
    if (tracked(x) || tracked(gain) || tracked(bias)) {
        auto px = x.node_ptr(), pg = gain.node_ptr(), pb = bias.node_ptr();
        std::vector<std::shared_ptr<TensorNode>> parents;
        for (const auto& p : {px, pg, pb})
            if (g_grad_enabled && p->requires_grad) parents.push_back(p);
        record(out, std::move(parents),
               [px, pg, pb, xhat = std::move(xhat), invstd = std::move(invstd), n,
                d](TensorNode& self) {
                   for (std::int64_t i = 0; i < n; ++i) {
                       const double* g = self.grad.data() + i * d;
                       const double* xh = xhat.data() + i * d;
                       if (pg->requires_grad)
                           for (std::int64_t j = 0; j < d; ++j)
                               pg->grad[static_cast<std::size_t>(j)] += g[j] * xh[j];
                       if (pb->requires_grad)
                           for (std::int64_t j = 0; j < d; ++j)
                               pb->grad[static_cast<std::size_t>(j)] += g[j];
                       if (px->requires_grad) {
                           double sum1 = 0.0, sum2 = 0.0;
                           for (std::int64_t j = 0; j < d; ++j) {
                               const double dxh = g[j] * pg->data[static_cast<std::size_t>(j)];
                               sum1 += dxh;
                               sum2 += dxh * xh[j];
                           }
                           const double is = invstd[static_cast<std::size_t>(i)];
                           const double invd = 1.0 / static_cast<double>(d);
                           for (std::int64_t j = 0; j < d; ++j) {
                               const double dxh = g[j] * pg->data[static_cast<std::size_t>(j)];
                               px->grad[static_cast<std::size_t>(i * d + j)] +=
                                   is * (dxh - sum1 * invd - xh[j] * sum2 * invd);
                           }
                       }
                   }
               });
    }
    return Tensor(out);
}

Tensor cross_entropy_from_logits(const Tensor& logits, std::int64_t target) {
    if (logits.ndim() != 1)
        throw DimensionError("cross_entropy_from_logits: rank-1 logits required, got " +
                             shape_str(logits.shape()));
    const auto k = logits.dim(0);
    if (target < 0 || target >= k)
        throw DomainError("cross_entropy_from_logits: target " + std::to_string(target) +
                          " out of range [0, " + std::to_string(k) + ")");
    double mx = logits.at(0);
    for (std::int64_t i = 1; i < k; ++i) mx = std::max(mx, logits.at(i));
    double z = 0.0;
    for (std::int64_t i = 0; i < k; ++i) z += std::exp(logits.at(i) - mx);
    const double lse = mx + std::log(z);
    auto out = make_node({}, "cross_entropy_from_logits");
    out->data[0] = lse - logits.at(target);
    if (out->data[0] < 0.0) out->data[0] = 0.0;  // guard tiny negative round-off
    if (tracked(logits)) {
        auto px = logits.node_ptr();
        record(out, {px}, [px, target, k, lse](TensorNode& self) {
            const double g = self.grad[0];
            for (std::int64_t i = 0; i < k; ++i) {
                const double p = std::exp(px->data[static_cast<std::size_t>(i)] - lse);
                px->grad[static_cast<std::size_t>(i)] +=
                    g * (p - (i == target ? 1.0 : 0.0));
            }
        });
    }
    return Tensor(out);
}

Tensor entropy_of_distribution(const Tensor& p) {
    if (p.ndim() != 1)
        throw DimensionError("entropy_of_distribution: rank-1 distribution required, got " +
                             shape_str(p.shape()));
    double total = 0.0;
    for (double v : p.data()) {
        if (v < 0.0)
            throw DomainError("entropy_of_distribution: negative probability " +
                              std::to_string(v));
        total += v;
    }
    if (std::fabs(total - 1.0) > 1e-4)
        throw DomainError("entropy_of_distribution: probabilities sum to " +
                          std::to_string(total) + ", not 1");
    constexpr double kTiny = 1e-12;  // 0 * log 0 := 0
    auto out = make_node({}, "entropy_of_distribution");
    double h = 0.0;
    for (double v : p.data())
        if (v > kTiny) h -= v * std::log(v);
    out->data[0] = h;
    if (tracked(p)) {
        auto px = p.node_ptr();
        record(out, {px}, [px](TensorNode& self) {
            const double g = self.grad[0];
            for (std::size_t i = 0; i < px->data.size(); ++i)
                if (px->data[i] > 1e-12)
                    px->grad[i] -= g * (std::log(px->data[i]) + 1.0);
        });
    }
    return Tensor(out);
}

Tensor masked_mean_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets,
                                 const std::vector<std::uint8_t>& keep) {
    check_rank2("masked_mean_cross_entropy", logits);
    const auto m = logits.rows(), v = logits.cols();
    if (static_cast<std::int64_t>(targets.size()) != m ||
        static_cast<std::int64_t>(keep.size()) != m)
        throw DimensionError("masked_mean_cross_entropy: " + std::to_string(targets.size()) +
                             " targets / " + std::to_string(keep.size()) + " mask entries for " +
                             shape_str(logits.shape()));
    for (auto t : targets)
        if (t < 0 || t >= v)
            throw DomainError("masked_mean_cross_entropy: target " + std::to_string(t) +
                              " out of range [0, " + std::to_string(v) + ")");
    std::int64_t count = 0;
    for (auto k : keep)
        if (k) ++count;
    if (count == 0) throw DomainError("masked_mean_cross_entropy: every position is masked out");

    std::vector<double> lse(static_cast<std::size_t>(m), 0.0);
    double total = 0.0;
    const double* X = logits.data().data();
    for (std::int64_t t = 0; t < m; ++t) {
        if (!keep[static_cast<std::size_t>(t)]) continue;
        const double* row = X + t * v;
        double mx = row[0];
        for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        lse[static_cast<std::size_t>(t)] = mx + std::log(z);
        total += lse[static_cast<std::size_t>(t)] - row[targets[static_cast<std::size_t>(t)]];
    }
    auto out = make_node({}, "masked_mean_cross_entropy");
    out->data[0] = total / static_cast<double>(count);
    if (out->data[0] < 0.0) out->data[0] = 0.0;
    if (tracked(logits)) {
        auto px = logits.node_ptr();
        record(out, {px},
               [px, targets, keep, lse = std::move(lse), m, v, count](TensorNode& self) {
                   const double g = self.grad[0] / static_cast<double>(count);
                   for (std::int64_t t = 0; t < m; ++t) {
                       if (!keep[static_cast<std::size_t>(t)]) continue;
                       const double row_lse = lse[static_cast<std::size_t>(t)];
                       for (std::int64_t j = 0; j < v; ++j) {
                           const auto idx = static_cast<std::size_t>(t * v + j);
                           const double p = std::exp(px->data[idx] - row_lse);
                           const bool hit = j == targets[static_cast<std::size_t>(t)];
                           px->grad[idx] += g * (p - (hit ? 1.0 : 0.0));
                       }
                   }
               });
    }
    return Tensor(out);
}

Tensor embedding_rows(const Tensor& table, const std::vector<std::int64_t>& ids) {
    check_rank2("embedding_rows", table);
    if (ids.empty()) throw DimensionError("embedding_rows: empty id list");
    const auto vsize = table.rows(), d = table.cols();
    for (auto id : ids)
        if (id < 0 || id >= vsize)
            throw DomainError("embedding_rows: id " + std::to_string(id) +
                              " out of range [0, " + std::to_string(vsize) + ")");
    const auto n = static_cast<std::int64_t>(ids.size());
    auto out = make_node({n, d}, "embedding_rows");
    for (std::int64_t t = 0; t < n; ++t)
        for (std::int64_t j = 0; j < d; ++j)
            out->data[static_cast<std::size_t>(t * d + j)] =
                table.at(ids[static_cast<std::size_t>(t)], j);
    if (tracked(table)) {
        auto px = table.node_ptr();
        record(out, {px}, [px, ids, n, d](TensorNode& self) {
            for (std::int64_t t = 0; t < n; ++t) {
                const auto row = ids[static_cast<std::size_t>(t)];
                for (std::int64_t j = 0; j < d; ++j)
                    px->grad[static_cast<std::size_t>(row * d + j)] +=
                        self.grad[static_cast<std::size_t>(t * d + j)];
            }
        });
    }
    return Tensor(out);
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
        throw DomainError("dropout: rate " + std::to_string(rate) + " outside [0, 1)");
    if (!training || rate == 0.0) return x;
    const double scale_kept = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.data().size());
    for (auto& m : mask) m = rng.uniform() >= rate ? scale_kept : 0.0;
    auto out = make_node(x.shape(), "dropout");
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x.data()[i] * mask[i];
    if (tracked(x)) {
        auto px = x.node_ptr();
        record(out, {px}, [px, mask = std::move(mask)](TensorNode& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                px->grad[i] += self.grad[i] * mask[i];
        });
    }
    return Tensor(out);
}

}  // namespace cedual
