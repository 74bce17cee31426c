#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cedual/common.hpp"

namespace cedual {

// Reverse-mode automatic differentiation over dense row-major double tensors
// (rank 0..2 is all the model needs). Every operation that involves a
// gradient-tracked input records a node with a backward closure; calling
// backward() on a scalar result walks the recorded graph in reverse
// topological order and accumulates gradients into the leaves. Gradients
// accumulate across backward() calls until explicitly cleared.

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // same size as data iff requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // reads this->grad, adds into parents' grad
    const char* op = "leaf";
};

// Global switch for gradient recording (RAII via NoGradGuard). While
// disabled, every op produces a constant node with no parents.
bool grad_enabled();

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool saved_;
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor ones(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false);
    // Uniform in [lo, hi).
    static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng,
                          bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
    std::int64_t ndim() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t dim(std::int64_t i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t rows() const;  // rank-2 only
    std::int64_t cols() const;
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    std::span<const double> grad() const;  // requires_grad only

    double value() const;  // scalar tensors only
    double at(std::int64_t i) const { return node_->data[static_cast<std::size_t>(i)]; }
    double at(std::int64_t r, std::int64_t c) const {
        return node_->data[static_cast<std::size_t>(r * cols() + c)];
    }
    void set(std::int64_t i, double v) { node_->data[static_cast<std::size_t>(i)] = v; }
    void set(std::int64_t r, std::int64_t c, double v) {
        node_->data[static_cast<std::size_t>(r * cols() + c)] = v;
    }

    bool all_finite() const;

    // Same data, detached from the graph (no gradient flows through).
    Tensor detach() const;

    void zero_grad();

    // Reverse pass from a scalar root; seeds d(root)/d(root) = 1 and
    // accumulates into every reachable gradient-tracked node.
    void backward() const;

    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

  private:
    std::shared_ptr<TensorNode> node_;
};

// ---- elementwise / linear algebra ----
Tensor add(const Tensor& a, const Tensor& b);       // same shape
Tensor sub(const Tensor& a, const Tensor& b);       // same shape
Tensor mul(const Tensor& a, const Tensor& b);       // same shape, elementwise
Tensor add_rowvec(const Tensor& x, const Tensor& b);  // x:(n,d) + b:(d) per row
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor matmul(const Tensor& a, const Tensor& b);    // (m,k)x(k,n) -> (m,n)
Tensor transpose(const Tensor& x);                  // rank 2
Tensor relu(const Tensor& x);
Tensor sum(const Tensor& x);                        // -> scalar
Tensor concat_cols(const std::vector<Tensor>& parts);           // all (n,di)
Tensor slice_cols(const Tensor& x, std::int64_t c0, std::int64_t c1);
Tensor reshape(const Tensor& x, const Shape& shape);  // same numel; gradient passes through
Tensor row_vector(const Tensor& x, std::int64_t r);   // row r of (n,d) as a rank-1 (d)

// ---- neural-net primitives ----

// Softmax along `axis` (rank 1: axis 0; rank 2: 0 = down columns, 1 = along rows).
Tensor softmax(const Tensor& x, std::int64_t axis);

// Row-wise softmax over the entries `allow` marks true; disallowed entries
// get an exact 0 (they never enter the normalization). A row with no allowed
// entry becomes all zeros and increments *fully_masked_rows when given.
Tensor masked_softmax_rows(const Tensor& scores, const BoolMatrix& allow,
                           std::int64_t* fully_masked_rows = nullptr);

// Mean over the rows of x:(n,d) with keep[i] != 0; at least one row must be kept.
Tensor mean_pool(const Tensor& x, const std::vector<std::uint8_t>& keep);

// Per-row layer normalization with learnable gain/bias (both shape (d)).
// Uses population variance; eps is added under the square root.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// -log softmax(logits)[target] for a rank-1 logits vector, computed via a
// stabilized log-sum-exp (never materializes the softmax in the forward).
Tensor cross_entropy_from_logits(const Tensor& logits, std::int64_t target);

// Shannon entropy -sum p log p (natural log) of a rank-1 distribution;
// entries below 1e-12 contribute zero to both value and gradient.
Tensor entropy_of_distribution(const Tensor& p);

// Mean token cross entropy over the rows of logits:(m,V) with keep[t] != 0;
// targets[t] is the gold class of row t. At least one row must be kept.
Tensor masked_mean_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets,
                                 const std::vector<std::uint8_t>& keep);

// Gathers rows of table:(V,d) at `ids`; gradient scatters back into the table.
Tensor embedding_rows(const Tensor& table, const std::vector<std::int64_t>& ids);

// Inverted dropout: identity when !training or rate == 0, otherwise zeroes
// entries with probability `rate` and scales the survivors by 1/(1-rate).
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

}  // namespace cedual
