#include "ssf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "ssf/parallel.hpp"

namespace ssf {

using detail::Node;

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

int shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return static_cast<int>(n);
}

namespace detail {
namespace {
thread_local bool t_grad_enabled = true;
}
bool grad_enabled() { return t_grad_enabled; }
}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(detail::t_grad_enabled) { detail::t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::t_grad_enabled = prev_; }

namespace {

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> value) {
    if (shape_numel(shape) != static_cast<int>(value.size()))
        throw ShapeError("tensor data length " + std::to_string(value.size()) +
                         " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

// Creates the result of an op. Drops graph edges when no gradient can flow.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> bw) {
    auto n = make_leaf(std::move(shape), std::move(value));
    bool needs = false;
    if (detail::grad_enabled()) {
        for (const auto& p : parents)
            if (p->requires_grad) { needs = true; break; }
    }
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return Tensor::wrap(std::move(n));
}

void check_defined(const Tensor& t, const char* who) {
    if (!t.defined()) throw ContractError(std::string(who) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

// C (+)= A(PxQ) * B(QxR)
void gemm(const double* a, const double* b, double* c, int p, int q, int r) {
    for (int i = 0; i < p; ++i) {
        const double* ai = a + static_cast<size_t>(i) * q;
        double* ci = c + static_cast<size_t>(i) * r;
        for (int k = 0; k < q; ++k) {
            double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b + static_cast<size_t>(k) * r;
            for (int j = 0; j < r; ++j) ci[j] += aik * bk[j];
        }
    }
}

// C (+)= A(PxQ) * B(RxQ)^T
void gemm_nt(const double* a, const double* b, double* c, int p, int q, int r) {
    for (int i = 0; i < p; ++i) {
        const double* ai = a + static_cast<size_t>(i) * q;
        double* ci = c + static_cast<size_t>(i) * r;
        for (int j = 0; j < r; ++j) {
            const double* bj = b + static_cast<size_t>(j) * q;
            double acc = 0.0;
            for (int k = 0; k < q; ++k) acc += ai[k] * bj[k];
            ci[j] += acc;
        }
    }
}

// C (+)= A(QxP)^T * B(QxR)
void gemm_tn(const double* a, const double* b, double* c, int p, int q, int r) {
    for (int k = 0; k < q; ++k) {
        const double* ak = a + static_cast<size_t>(k) * p;
        const double* bk = b + static_cast<size_t>(k) * r;
        for (int i = 0; i < p; ++i) {
            double aki = ak[i];
            if (aki == 0.0) continue;
            double* ci = c + static_cast<size_t>(i) * r;
            for (int j = 0; j < r; ++j) ci[j] += aki * bk[j];
        }
    }
}

}  // namespace

// ----- Tensor basics -----

Tensor Tensor::zeros(Shape shape) {
    int n = shape_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0)));
}

Tensor Tensor::full(Shape shape, double v) {
    int n = shape_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), v)));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    return wrap(make_leaf(std::move(shape), std::move(data)));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    int n = shape_numel(shape);
    std::vector<double> d(static_cast<size_t>(n));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return from(std::move(shape), std::move(d));
}

Tensor Tensor::normal(Shape shape, Rng& rng, double stddev) {
    int n = shape_numel(shape);
    std::vector<double> d(static_cast<size_t>(n));
    for (auto& v : d) v = stddev * rng.normal();
    return from(std::move(shape), std::move(d));
}

Tensor Tensor::glorot(Shape shape, Rng& rng, int fan_in, int fan_out) {
    double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor t = uniform(std::move(shape), rng, -limit, limit);
    t.set_requires_grad(true);
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("shape(): undefined tensor");
    return node_->shape;
}

int Tensor::numel() const { return static_cast<int>(value().size()); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    check_defined(*this, "set_requires_grad");
    if (!node_->parents.empty())
        throw ContractError("set_requires_grad: only leaf tensors can be marked trainable");
    node_->requires_grad = v;
    return *this;
}

const std::vector<double>& Tensor::value() const {
    check_defined(*this, "value");
    return node_->value;
}

std::vector<double>& Tensor::mutable_value() {
    check_defined(*this, "mutable_value");
    if (!node_->parents.empty())
        throw ContractError("mutable_value: in-place update is restricted to leaves");
    return node_->value;
}

std::vector<double> Tensor::grad() const {
    check_defined(*this, "grad");
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    check_defined(*this, "zero_grad");
    node_->grad.clear();
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
    return value()[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw ContractError("at(): index rank mismatch");
    size_t flat = 0;
    size_t d = 0;
    for (int i : idx) {
        if (i < 0 || i >= s[d]) throw ContractError("at(): index out of range");
        flat = flat * static_cast<size_t>(s[d]) + static_cast<size_t>(i);
        ++d;
    }
    return value()[flat];
}

Tensor Tensor::detach() const {
    check_defined(*this, "detach");
    return from(shape(), value());
}

// ----- elementwise -----

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* who, Fwd fwd, Bwd bwd) {
    check_defined(a, who);
    const auto& av = a.value();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    auto ap = a.node_ptr();
    return make_result(a.shape(), std::move(out), {ap}, [ap, bwd](Node& self) {
        if (!ap->requires_grad) return;
        ap->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            ap->grad[i] += bwd(ap->value[i], self.value[i], self.grad[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    check_same_shape(a, b, "add");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    auto ap = a.node_ptr();
    auto bp = b.node_ptr();
    return make_result(a.shape(), std::move(out), {ap, bp}, [ap, bp](Node& self) {
        for (const auto& p : {ap, bp}) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_defined(a, "sub");
    check_defined(b, "sub");
    check_same_shape(a, b, "sub");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    auto ap = a.node_ptr();
    auto bp = b.node_ptr();
    return make_result(a.shape(), std::move(out), {ap, bp}, [ap, bp](Node& self) {
        if (ap->requires_grad) {
            ap->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i];
        }
        if (bp->requires_grad) {
            bp->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bp->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    check_same_shape(a, b, "mul");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    auto ap = a.node_ptr();
    auto bp = b.node_ptr();
    return make_result(a.shape(), std::move(out), {ap, bp}, [ap, bp](Node& self) {
        if (ap->requires_grad) {
            ap->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i] * bp->value[i];
        }
        if (bp->requires_grad) {
            bp->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bp->grad[i] += self.grad[i] * ap->value[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    return unary_op(a, "scale",
                    [s](double x) { return s * x; },
                    [s](double, double, double g) { return s * g; });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    check_defined(m, "add_rowvec");
    check_defined(v, "add_rowvec");
    if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0))
        throw ShapeError("add_rowvec: incompatible shapes " + shape_str(m.shape()) + " and " +
                         shape_str(v.shape()));
    int rows = m.dim(0), cols = m.dim(1);
    std::vector<double> out(m.value());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[static_cast<size_t>(r) * cols + c] += v.value()[c];
    auto mp = m.node_ptr();
    auto vp = v.node_ptr();
    return make_result(m.shape(), std::move(out), {mp, vp}, [mp, vp, rows, cols](Node& self) {
        if (mp->requires_grad) {
            mp->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) mp->grad[i] += self.grad[i];
        }
        if (vp->requires_grad) {
            vp->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    vp->grad[c] += self.grad[static_cast<size_t>(r) * cols + c];
        }
    });
}

Tensor tanh_op(const Tensor& a) {
    return unary_op(a, "tanh",
                    [](double x) { return std::tanh(x); },
                    [](double, double y, double g) { return (1.0 - y * y) * g; });
}

Tensor relu(const Tensor& a) {
    return unary_op(a, "relu",
                    [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor clamp_unit(const Tensor& a) {
    return unary_op(a, "clamp_unit",
                    [](double x) { return std::clamp(x, -1.0, 1.0); },
                    [](double x, double, double g) { return (x > -1.0 && x < 1.0) ? g : 0.0; });
}

Tensor row_scale(const Tensor& a, const std::vector<double>& s) {
    check_defined(a, "row_scale");
    if (a.rank() != 2 || a.dim(0) != static_cast<int>(s.size()))
        throw ShapeError("row_scale: need [" + std::to_string(s.size()) + " x *] matrix, got " +
                         shape_str(a.shape()));
    int rows = a.dim(0), cols = a.dim(1);
    std::vector<double> out(a.value().size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[static_cast<size_t>(r) * cols + c] = s[r] * a.value()[static_cast<size_t>(r) * cols + c];
    auto ap = a.node_ptr();
    auto sc = s;
    return make_result(a.shape(), std::move(out), {ap}, [ap, sc, rows, cols](Node& self) {
        if (!ap->requires_grad) return;
        ap->ensure_grad();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                ap->grad[static_cast<size_t>(r) * cols + c] +=
                    sc[r] * self.grad[static_cast<size_t>(r) * cols + c];
    });
}

// ----- matmul family -----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int p = a.dim(0), q = a.dim(1), r = b.dim(1);
    std::vector<double> out(static_cast<size_t>(p) * r, 0.0);
    gemm(a.value().data(), b.value().data(), out.data(), p, q, r);
    auto ap = a.node_ptr();
    auto bp = b.node_ptr();
    return make_result({p, r}, std::move(out), {ap, bp}, [ap, bp, p, q, r](Node& self) {
        if (ap->requires_grad) {
            ap->ensure_grad();
            gemm_nt(self.grad.data(), bp->value.data(), ap->grad.data(), p, r, q);
        }
        if (bp->requires_grad) {
            bp->ensure_grad();
            gemm_tn(ap->value.data(), self.grad.data(), bp->grad.data(), q, p, r);
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul_nt");
    check_defined(b, "matmul_nt");
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int p = a.dim(0), q = a.dim(1), r = b.dim(0);
    std::vector<double> out(static_cast<size_t>(p) * r, 0.0);
    gemm_nt(a.value().data(), b.value().data(), out.data(), p, q, r);
    auto ap = a.node_ptr();
    auto bp = b.node_ptr();
    // c = a b^T  =>  da = dc b, db = dc^T a
    return make_result({p, r}, std::move(out), {ap, bp}, [ap, bp, p, q, r](Node& self) {
        if (ap->requires_grad) {
            ap->ensure_grad();
            gemm(self.grad.data(), bp->value.data(), ap->grad.data(), p, r, q);
        }
        if (bp->requires_grad) {
            bp->ensure_grad();
            gemm_tn(self.grad.data(), ap->value.data(), bp->grad.data(), r, p, q);
        }
    });
}

Tensor transpose2d(const Tensor& a) {
    check_defined(a, "transpose2d");
    if (a.rank() != 2) throw ShapeError("transpose2d: need rank 2, got " + shape_str(a.shape()));
    int rows = a.dim(0), cols = a.dim(1);
    std::vector<double> out(a.value().size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[static_cast<size_t>(c) * rows + r] = a.value()[static_cast<size_t>(r) * cols + c];
    auto ap = a.node_ptr();
    return make_result({cols, rows}, std::move(out), {ap}, [ap, rows, cols](Node& self) {
        if (!ap->requires_grad) return;
        ap->ensure_grad();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                ap->grad[static_cast<size_t>(r) * cols + c] += self.grad[static_cast<size_t>(c) * rows + r];
    });
}

// ----- softmax / normalization -----

Tensor softmax_lastdim(const Tensor& a) {
    check_defined(a, "softmax_lastdim");
    if (a.rank() < 1 || a.shape().back() < 1)
        throw ShapeError("softmax_lastdim: empty last dimension in " + shape_str(a.shape()));
    int d = a.shape().back();
    int rows = a.numel() / d;
    std::vector<double> out(a.value().size());
    for (int r = 0; r < rows; ++r) {
        const double* x = a.value().data() + static_cast<size_t>(r) * d;
        double* y = out.data() + static_cast<size_t>(r) * d;
        double m = x[0];
        for (int i = 1; i < d; ++i) m = std::max(m, x[i]);
        double s = 0.0;
        for (int i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - m);
            s += y[i];
        }
        for (int i = 0; i < d; ++i) y[i] /= s;
    }
    auto ap = a.node_ptr();
    return make_result(a.shape(), std::move(out), {ap}, [ap, rows, d](Node& self) {
        if (!ap->requires_grad) return;
        ap->ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const double* y = self.value.data() + static_cast<size_t>(r) * d;
            const double* g = self.grad.data() + static_cast<size_t>(r) * d;
            double* dx = ap->grad.data() + static_cast<size_t>(r) * d;
            double dot = 0.0;
            for (int i = 0; i < d; ++i) dot += g[i] * y[i];
            for (int i = 0; i < d; ++i) dx[i] += y[i] * (g[i] - dot);
        }
    });
}

Tensor l2_normalize_rows(const Tensor& a) {
    check_defined(a, "l2_normalize_rows");
    if (a.rank() != 2) throw ShapeError("l2_normalize_rows: need rank 2, got " + shape_str(a.shape()));
    int rows = a.dim(0), cols = a.dim(1);
    std::vector<double> out(a.value().size());
    std::vector<double> norms(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const double* x = a.value().data() + static_cast<size_t>(r) * cols;
        double s = 0.0;
        for (int c = 0; c < cols; ++c) s += x[c] * x[c];
        double n = std::sqrt(s);
        norms[r] = n;
        double* y = out.data() + static_cast<size_t>(r) * cols;
        if (n == 0.0) {
            std::fill(y, y + cols, 0.0);  // zero rows map to zero rows
        } else {
            for (int c = 0; c < cols; ++c) y[c] = x[c] / n;
        }
    }
    auto ap = a.node_ptr();
    return make_result(a.shape(), std::move(out), {ap}, [ap, norms, rows, cols](Node& self) {
        if (!ap->requires_grad) return;
        ap->ensure_grad();
        for (int r = 0; r < rows; ++r) {
            double n = norms[r];
            if (n == 0.0) continue;
            const double* y = self.value.data() + static_cast<size_t>(r) * cols;
            const double* g = self.grad.data() + static_cast<size_t>(r) * cols;
            double* dx = ap->grad.data() + static_cast<size_t>(r) * cols;
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += g[c] * y[c];
            for (int c = 0; c < cols; ++c) dx[c] += (g[c] - dot * y[c]) / n;
        }
    });
}

// ----- reductions -----

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    double s = 0.0;
    for (double v : a.value()) s += v;
    auto ap = a.node_ptr();
    return make_result({1}, {s}, {ap}, [ap](Node& self) {
        if (!ap->requires_grad) return;
        ap->ensure_grad();
        for (auto& g : ap->grad) g += self.grad[0];
    });
}

Tensor mean_all(const Tensor& a) {
    check_defined(a, "mean_all");
    if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
    return scale(sum(a), 1.0 / a.numel());
}

Tensor rowwise_max(const Tensor& a) {
    check_defined(a, "rowwise_max");
    if (a.rank() != 2 || a.dim(1) < 1)
        throw ShapeError("rowwise_max: need a matrix with >=1 column, got " + shape_str(a.shape()));
    int rows = a.dim(0), cols = a.dim(1);
    std::vector<double> out(static_cast<size_t>(rows));
    auto amax = std::make_shared<std::vector<int>>(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const double* x = a.value().data() + static_cast<size_t>(r) * cols;
        int best = 0;
        for (int c = 1; c < cols; ++c)
            if (x[c] > x[best]) best = c;
        (*amax)[r] = best;
        out[r] = x[best];
    }
    auto ap = a.node_ptr();
    return make_result({rows}, std::move(out), {ap}, [ap, amax, cols](Node& self) {
        if (!ap->requires_grad) return;
        ap->ensure_grad();
        for (size_t r = 0; r < self.grad.size(); ++r)
            ap->grad[r * cols + static_cast<size_t>((*amax)[r])] += self.grad[r];
    });
}

std::vector<int> rowwise_argmax(const Tensor& a) {
    check_defined(a, "rowwise_argmax");
    if (a.rank() != 2 || a.dim(1) < 1)
        throw ShapeError("rowwise_argmax: need a matrix with >=1 column, got " + shape_str(a.shape()));
    int rows = a.dim(0), cols = a.dim(1);
    std::vector<int> out(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const double* x = a.value().data() + static_cast<size_t>(r) * cols;
        int best = 0;
        for (int c = 1; c < cols; ++c)
            if (x[c] > x[best]) best = c;
        out[r] = best;
    }
    return out;
}

Tensor pick(const Tensor& v, int index) {
    check_defined(v, "pick");
    if (v.rank() != 1) throw ShapeError("pick: need a vector, got " + shape_str(v.shape()));
    if (index < 0 || index >= v.dim(0)) throw ContractError("pick: index out of range");
    auto vp = v.node_ptr();
    return make_result({1}, {v.value()[static_cast<size_t>(index)]}, {vp}, [vp, index](Node& self) {
        if (!vp->requires_grad) return;
        vp->ensure_grad();
        vp->grad[static_cast<size_t>(index)] += self.grad[0];
    });
}

// ----- structural -----

Tensor vstack(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("vstack: no tensors");
    int cols = -1;
    int rows = 0;
    for (const auto& t : parts) {
        check_defined(t, "vstack");
        if (t.rank() != 2) throw ShapeError("vstack: need rank 2, got " + shape_str(t.shape()));
        if (cols < 0) cols = t.dim(1);
        if (t.dim(1) != cols)
            throw ShapeError("vstack: column mismatch " + std::to_string(cols) + " vs " +
                             std::to_string(t.dim(1)));
        rows += t.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(rows) * cols);
    std::vector<std::shared_ptr<Node>> ps;
    std::vector<int> row_of;
    for (const auto& t : parts) {
        out.insert(out.end(), t.value().begin(), t.value().end());
        ps.push_back(t.node_ptr());
        row_of.push_back(t.dim(0));
    }
    auto rows_per = std::make_shared<std::vector<int>>(std::move(row_of));
    return make_result({rows, cols}, std::move(out), std::move(ps), [rows_per, cols](Node& self) {
        size_t off = 0;
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            size_t n = static_cast<size_t>((*rows_per)[k]) * cols;
            if (p->requires_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < n; ++i) p->grad[i] += self.grad[off + i];
            }
            off += n;
        }
    });
}

Tensor hstack(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("hstack: no tensors");
    int rows = -1;
    int cols = 0;
    for (const auto& t : parts) {
        check_defined(t, "hstack");
        if (t.rank() != 2) throw ShapeError("hstack: need rank 2, got " + shape_str(t.shape()));
        if (rows < 0) rows = t.dim(0);
        if (t.dim(0) != rows)
            throw ShapeError("hstack: row mismatch " + std::to_string(rows) + " vs " +
                             std::to_string(t.dim(0)));
        cols += t.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(rows) * cols);
    std::vector<std::shared_ptr<Node>> ps;
    std::vector<int> col_of;
    int coff = 0;
    for (const auto& t : parts) {
        int tc = t.dim(1);
        for (int r = 0; r < rows; ++r)
            std::memcpy(out.data() + static_cast<size_t>(r) * cols + coff,
                        t.value().data() + static_cast<size_t>(r) * tc,
                        static_cast<size_t>(tc) * sizeof(double));
        coff += tc;
        ps.push_back(t.node_ptr());
        col_of.push_back(tc);
    }
    auto cols_per = std::make_shared<std::vector<int>>(std::move(col_of));
    return make_result({rows, cols}, std::move(out), std::move(ps), [cols_per, rows, cols](Node& self) {
        int coff2 = 0;
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            int tc = (*cols_per)[k];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < tc; ++c)
                        p->grad[static_cast<size_t>(r) * tc + c] +=
                            self.grad[static_cast<size_t>(r) * cols + coff2 + c];
            }
            coff2 += tc;
        }
    });
}

Tensor stack_scalars(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("stack_scalars: no tensors");
    std::vector<double> out;
    std::vector<std::shared_ptr<Node>> ps;
    for (const auto& t : parts) {
        check_defined(t, "stack_scalars");
        if (t.numel() != 1) throw ShapeError("stack_scalars: all inputs must be scalars");
        out.push_back(t.value()[0]);
        ps.push_back(t.node_ptr());
    }
    int n = static_cast<int>(out.size());
    return make_result({n}, std::move(out), std::move(ps), [](Node& self) {
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            p->grad[0] += self.grad[k];
        }
    });
}

Tensor mean_scalars(std::span<const Tensor> parts) {
    return scale(sum(stack_scalars(parts)), 1.0 / static_cast<double>(parts.size()));
}

// ----- losses -----

Tensor cross_entropy_logits(const Tensor& logits, int target) {
    check_defined(logits, "cross_entropy_logits");
    if (logits.rank() != 1) throw ShapeError("cross_entropy_logits: need a vector of logits");
    int n = logits.dim(0);
    if (target < 0 || target >= n) throw ContractError("cross_entropy_logits: target out of range");
    const auto& x = logits.value();
    double m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
    double lse = m + std::log(s);
    auto lp = logits.node_ptr();
    return make_result({1}, {lse - x[static_cast<size_t>(target)]}, {lp}, [lp, target, lse, n](Node& self) {
        if (!lp->requires_grad) return;
        lp->ensure_grad();
        double g = self.grad[0];
        for (int i = 0; i < n; ++i) {
            double sm = std::exp(lp->value[static_cast<size_t>(i)] - lse);
            lp->grad[static_cast<size_t>(i)] += g * (sm - (i == target ? 1.0 : 0.0));
        }
    });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    check_defined(logits, "cross_entropy_rows");
    if (logits.rank() != 2) throw ShapeError("cross_entropy_rows: need [batch x classes] logits");
    int b = logits.dim(0), n = logits.dim(1);
    if (static_cast<int>(targets.size()) != b)
        throw ShapeError("cross_entropy_rows: batch " + std::to_string(b) + " vs " +
                         std::to_string(targets.size()) + " targets");
    std::vector<double> lses(static_cast<size_t>(b));
    double total = 0.0;
    for (int r = 0; r < b; ++r) {
        if (targets[r] < 0 || targets[r] >= n)
            throw ContractError("cross_entropy_rows: target out of range");
        const double* x = logits.value().data() + static_cast<size_t>(r) * n;
        double m = x[0];
        for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
        lses[r] = m + std::log(s);
        total += lses[r] - x[targets[r]];
    }
    auto lp = logits.node_ptr();
    auto tg = std::make_shared<std::vector<int>>(targets);
    auto ls = std::make_shared<std::vector<double>>(std::move(lses));
    return make_result({1}, {total / b}, {lp}, [lp, tg, ls, b, n](Node& self) {
        if (!lp->requires_grad) return;
        lp->ensure_grad();
        double g = self.grad[0] / b;
        for (int r = 0; r < b; ++r) {
            const double* x = lp->value.data() + static_cast<size_t>(r) * n;
            double* dx = lp->grad.data() + static_cast<size_t>(r) * n;
            for (int i = 0; i < n; ++i) {
                double sm = std::exp(x[i] - (*ls)[r]);
                dx[i] += g * (sm - (i == (*tg)[r] ? 1.0 : 0.0));
            }
        }
    });
}

// ----- dropout -----

Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training) {
    check_defined(a, "dropout");
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
    if (!training || rate == 0.0) return a;
    double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(a.value().size());
    std::vector<double> out(a.value().size());
    for (size_t i = 0; i < out.size(); ++i) {
        double m = rng.uniform() < keep ? 1.0 / keep : 0.0;
        (*mask)[i] = m;
        out[i] = a.value()[i] * m;
    }
    auto ap = a.node_ptr();
    return make_result(a.shape(), std::move(out), {ap}, [ap, mask](Node& self) {
        if (!ap->requires_grad) return;
        ap->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i] * (*mask)[i];
    });
}

// ----- convolution stack -----

namespace {

struct ConvDims {
    int b, ci, h, w, co, kh, kw, stride, pad, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d: need x [B,C,H,W] and w [Co,Ci,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    ConvDims d{};
    d.b = x.dim(0);
    d.ci = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.co = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (w.dim(1) != d.ci)
        throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(w.shape()));
    if (bias.rank() != 1 || bias.dim(0) != d.co)
        throw ShapeError("conv2d: bias must be [Co]");
    if (stride < 1 || pad < 0) throw ConfigError("conv2d: bad stride/pad");
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.ho < 1 || d.wo < 1) throw ShapeError("conv2d: kernel larger than padded input");
    return d;
}

// col is [ci*kh*kw, ho*wo] for one batch item.
void im2col(const double* x, const ConvDims& d, double* col) {
    int owh = d.ho * d.wo;
    for (int c = 0; c < d.ci; ++c) {
        const double* xc = x + static_cast<size_t>(c) * d.h * d.w;
        for (int ky = 0; ky < d.kh; ++ky)
            for (int kx = 0; kx < d.kw; ++kx) {
                double* row = col + (static_cast<size_t>(c) * d.kh * d.kw + ky * d.kw + kx) * owh;
                for (int oy = 0; oy < d.ho; ++oy) {
                    int iy = oy * d.stride - d.pad + ky;
                    for (int ox = 0; ox < d.wo; ++ox) {
                        int ix = ox * d.stride - d.pad + kx;
                        row[oy * d.wo + ox] =
                            (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
                                ? xc[static_cast<size_t>(iy) * d.w + ix]
                                : 0.0;
                    }
                }
            }
    }
}

void col2im_add(const double* col, const ConvDims& d, double* dx) {
    int owh = d.ho * d.wo;
    for (int c = 0; c < d.ci; ++c) {
        double* xc = dx + static_cast<size_t>(c) * d.h * d.w;
        for (int ky = 0; ky < d.kh; ++ky)
            for (int kx = 0; kx < d.kw; ++kx) {
                const double* row = col + (static_cast<size_t>(c) * d.kh * d.kw + ky * d.kw + kx) * owh;
                for (int oy = 0; oy < d.ho; ++oy) {
                    int iy = oy * d.stride - d.pad + ky;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int ox = 0; ox < d.wo; ++ox) {
                        int ix = ox * d.stride - d.pad + kx;
                        if (ix < 0 || ix >= d.w) continue;
                        xc[static_cast<size_t>(iy) * d.w + ix] += row[oy * d.wo + ox];
                    }
                }
            }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    check_defined(x, "conv2d");
    check_defined(w, "conv2d");
    check_defined(bias, "conv2d");
    ConvDims d = conv_dims(x, w, bias, stride, pad);
    size_t xstep = static_cast<size_t>(d.ci) * d.h * d.w;
    size_t ostep = static_cast<size_t>(d.co) * d.ho * d.wo;
    int ckk = d.ci * d.kh * d.kw;
    int owh = d.ho * d.wo;

    std::vector<double> out(static_cast<size_t>(d.b) * ostep);
    const double* xv = x.value().data();
    const double* wv = w.value().data();
    const double* bv = bias.value().data();
    parallel_chunks(d.b, kFixedChunks, [&](int, int begin, int end) {
        std::vector<double> col(static_cast<size_t>(ckk) * owh);
        for (int item = begin; item < end; ++item) {
            im2col(xv + item * xstep, d, col.data());
            double* o = out.data() + item * ostep;
            for (int co = 0; co < d.co; ++co)
                std::fill(o + static_cast<size_t>(co) * owh, o + static_cast<size_t>(co + 1) * owh,
                          bv[co]);
            gemm(wv, col.data(), o, d.co, ckk, owh);
        }
    });

    auto xp = x.node_ptr();
    auto wp = w.node_ptr();
    auto bp = bias.node_ptr();
    return make_result({d.b, d.co, d.ho, d.wo}, std::move(out), {xp, wp, bp},
                       [xp, wp, bp, d, xstep, ostep, ckk, owh](Node& self) {
        bool need_x = xp->requires_grad;
        bool need_w = wp->requires_grad;
        bool need_b = bp->requires_grad;
        if (need_x) xp->ensure_grad();
        if (need_w) wp->ensure_grad();
        if (need_b) bp->ensure_grad();

        size_t wsz = wp->value.size();
        std::vector<std::vector<double>> dw_part, db_part;
        if (need_w) dw_part.assign(kFixedChunks, std::vector<double>(wsz, 0.0));
        if (need_b) db_part.assign(kFixedChunks, std::vector<double>(static_cast<size_t>(d.co), 0.0));

        parallel_chunks(d.b, kFixedChunks, [&](int chunk, int begin, int end) {
            std::vector<double> col(static_cast<size_t>(ckk) * owh);
            std::vector<double> dcol(need_x ? static_cast<size_t>(ckk) * owh : 0);
            for (int item = begin; item < end; ++item) {
                const double* go = self.grad.data() + item * ostep;
                if (need_w || need_x) im2col(xp->value.data() + item * xstep, d, col.data());
                if (need_w) gemm_nt(go, col.data(), dw_part[chunk].data(), d.co, owh, ckk);
                if (need_b) {
                    for (int co = 0; co < d.co; ++co) {
                        double s = 0.0;
                        const double* g = go + static_cast<size_t>(co) * owh;
                        for (int i = 0; i < owh; ++i) s += g[i];
                        db_part[chunk][static_cast<size_t>(co)] += s;
                    }
                }
                if (need_x) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    gemm_tn(wp->value.data(), go, dcol.data(), ckk, d.co, owh);
                    col2im_add(dcol.data(), d, xp->grad.data() + item * xstep);
                }
            }
        });
        // chunk-ordered reduction keeps results independent of thread count
        if (need_w)
            for (auto& part : dw_part)
                for (size_t i = 0; i < wsz; ++i) wp->grad[i] += part[i];
        if (need_b)
            for (auto& part : db_part)
                for (int i = 0; i < d.co; ++i) bp->grad[static_cast<size_t>(i)] += part[static_cast<size_t>(i)];
    });
}

Tensor avgpool2x2(const Tensor& x) {
    check_defined(x, "avgpool2x2");
    if (x.rank() != 4) throw ShapeError("avgpool2x2: need [B,C,H,W], got " + shape_str(x.shape()));
    int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw ShapeError("avgpool2x2: spatial dims must be even, got " + shape_str(x.shape()));
    int ho = h / 2, wo = w / 2;
    std::vector<double> out(static_cast<size_t>(b) * c * ho * wo);
    const double* xv = x.value().data();
    for (int i = 0; i < b * c; ++i) {
        const double* p = xv + static_cast<size_t>(i) * h * w;
        double* o = out.data() + static_cast<size_t>(i) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int z = 0; z < wo; ++z)
                o[y * wo + z] = 0.25 * (p[(2 * y) * w + 2 * z] + p[(2 * y) * w + 2 * z + 1] +
                                        p[(2 * y + 1) * w + 2 * z] + p[(2 * y + 1) * w + 2 * z + 1]);
    }
    auto xp = x.node_ptr();
    return make_result({b, c, ho, wo}, std::move(out), {xp}, [xp, b, c, h, w, ho, wo](Node& self) {
        if (!xp->requires_grad) return;
        xp->ensure_grad();
        for (int i = 0; i < b * c; ++i) {
            double* dx = xp->grad.data() + static_cast<size_t>(i) * h * w;
            const double* g = self.grad.data() + static_cast<size_t>(i) * ho * wo;
            for (int y = 0; y < ho; ++y)
                for (int z = 0; z < wo; ++z) {
                    double v = 0.25 * g[y * wo + z];
                    dx[(2 * y) * w + 2 * z] += v;
                    dx[(2 * y) * w + 2 * z + 1] += v;
                    dx[(2 * y + 1) * w + 2 * z] += v;
                    dx[(2 * y + 1) * w + 2 * z + 1] += v;
                }
        }
    });
}

Tensor global_avg_pool(const Tensor& x) {
    check_defined(x, "global_avg_pool");
    if (x.rank() != 4) throw ShapeError("global_avg_pool: need [B,C,H,W], got " + shape_str(x.shape()));
    int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    int hw = h * w;
    std::vector<double> out(static_cast<size_t>(b) * c);
    const double* xv = x.value().data();
    for (int i = 0; i < b * c; ++i) {
        const double* p = xv + static_cast<size_t>(i) * hw;
        double s = 0.0;
        for (int j = 0; j < hw; ++j) s += p[j];
        out[static_cast<size_t>(i)] = s / hw;
    }
    auto xp = x.node_ptr();
    return make_result({b, c}, std::move(out), {xp}, [xp, b, c, hw](Node& self) {
        if (!xp->requires_grad) return;
        xp->ensure_grad();
        for (int i = 0; i < b * c; ++i) {
            double g = self.grad[static_cast<size_t>(i)] / hw;
            double* dx = xp->grad.data() + static_cast<size_t>(i) * hw;
            for (int j = 0; j < hw; ++j) dx[j] += g;
        }
    });
}

// ----- autodiff driver -----

void backward(const Tensor& loss) {
    check_defined(loss, "backward");
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    Node* root = loss.node();
    if (!root->requires_grad) return;  // constant loss: nothing to do

    // Iterative post-order DFS; the resulting order is topological.
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* next = node->parents[idx++].get();
            if (next->requires_grad && !visited.count(next)) {
                visited.insert(next);
                stack.emplace_back(next, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    // Interior grads are scratch for this pass; only leaves accumulate
    // across repeated backward calls.
    for (Node* n : topo)
        if (!n->parents.empty()) n->grad.clear();

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

bool all_finite(const Tensor& t) {
    for (double v : t.value())
        if (!std::isfinite(v)) return false;
    return true;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double eps) {
    if (eps <= 0.0) throw ConfigError("finite_diff_check: eps must be positive");
    Tensor leaf = Tensor::from(x.shape(), x.value());
    leaf.set_requires_grad(true);
    Tensor loss = f(leaf);
    if (loss.numel() != 1) throw ContractError("finite_diff_check: f must return a scalar");
    {
        NoGradGuard ng;
        Tensor probe = f(leaf);
        if (probe.item() != loss.item())
            throw ContractError("finite_diff_check: f is not deterministic");
    }
    backward(loss);
    std::vector<double> analytic = leaf.grad();

    NoGradGuard ng;
    double worst = 0.0;
    std::vector<double> base = x.value();
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<double> perturbed = base;
        perturbed[i] = base[i] + eps;
        double fp = f(Tensor::from(x.shape(), perturbed)).item();
        perturbed[i] = base[i] - eps;
        double fm = f(Tensor::from(x.shape(), perturbed)).item();
        double fd = (fp - fm) / (2.0 * eps);
        double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-8});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
    }
    return worst;
}

}  // namespace ssf
