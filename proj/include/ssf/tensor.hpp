#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ssf/errors.hpp"
#include "ssf/rng.hpp"

namespace ssf {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int shape_numel(const Shape& s);

namespace detail {

// One node of the expression graph. The graph doubles as the tape: parents
// were necessarily created before their consumers, so a depth-first
// post-order from the loss is a valid reverse execution order.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated on first write
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

bool grad_enabled();

}  // namespace detail

// Disables graph recording in the current thread for its lifetime.
// Forward passes under the guard produce value-only tensors.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major tensor of 64-bit floats. Cheap to copy (shared handle).
// Values are immutable after creation except for gradient buffers and
// explicit in-place parameter updates by an optimizer.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor scalar(double v);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
    static Tensor normal(Shape shape, Rng& rng, double stddev);
    // Glorot-uniform init for a fan_in x fan_out parameter.
    static Tensor glorot(Shape shape, Rng& rng, int fan_in, int fan_out);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int dim(int i) const { return shape()[static_cast<size_t>(i)]; }
    int numel() const;
    bool requires_grad() const;

    // Marks a leaf as trainable. Only valid on tensors with no parents.
    Tensor& set_requires_grad(bool v);

    const std::vector<double>& value() const;
    // In-place access for optimizer updates; leaves only.
    std::vector<double>& mutable_value();

    // Gradient buffer copy; zeros if backward never reached this tensor.
    std::vector<double> grad() const;
    void zero_grad();

    double item() const;  // scalar tensors
    double at(std::initializer_list<int> idx) const;

    // Value copy detached from the graph.
    Tensor detach() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

// ----- elementwise and linear algebra -----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// m[r][c] + v[c] for every row r.
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor softmax_lastdim(const Tensor& a);
Tensor l2_normalize_rows(const Tensor& a);
// Clamp to [-1, 1]; gradient passes only strictly inside the interval.
Tensor clamp_unit(const Tensor& a);
// out[i][j] = s[i] * a[i][j]; s is a constant (no gradient path).
Tensor row_scale(const Tensor& a, const std::vector<double>& s);

// ----- reductions and indexing -----

Tensor sum(const Tensor& a);
Tensor mean_all(const Tensor& a);
// Per-row max of a matrix -> vector [rows]; subgradient to the first argmax.
Tensor rowwise_max(const Tensor& a);
// Per-row argmax, ties to the lowest index. Not recorded on the tape.
std::vector<int> rowwise_argmax(const Tensor& a);
Tensor pick(const Tensor& v, int index);  // vector element -> scalar

// ----- structural -----

Tensor vstack(std::span<const Tensor> parts);
Tensor hstack(std::span<const Tensor> parts);
Tensor stack_scalars(std::span<const Tensor> parts);
Tensor mean_scalars(std::span<const Tensor> parts);

// ----- losses -----

// logsumexp(logits) - logits[target]; logits is a vector.
Tensor cross_entropy_logits(const Tensor& logits, int target);
// Mean cross entropy over rows of a [batch x classes] matrix.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);

// ----- regularization -----

// Inverted dropout on the forward values; identity when !training.
Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training);

// ----- convolution stack -----

// x [B,Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
Tensor avgpool2x2(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);  // [B,C,H,W] -> [B,C]

// ----- autodiff driver -----

// Reverse pass from a scalar loss. Gradients accumulate until zero_grad.
void backward(const Tensor& loss);

bool all_finite(const Tensor& t);

// Compares tape gradients of f at x against central finite differences.
// Returns the max relative error with denominator max(|a|,|b|,1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double eps);

}  // namespace ssf
