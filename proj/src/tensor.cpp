#include "lpt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "lpt/errors.hpp"
#include "lpt/threads.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialized tensors are little-endian");

namespace lpt {

// ---- worker-count plumbing ----

namespace {

int clamp_threads(int n) {
#ifdef _OPENMP
    int hw = omp_get_num_procs();
#else
    int hw = 1;
#endif
    if (n <= 0) n = hw;
    return std::min(n, hw);
}

int env_thread_default() {
    if (const char* s = std::getenv("LPT_THREADS")) {
        int n = std::atoi(s);
        if (n > 0) return clamp_threads(n);
    }
    return clamp_threads(0);
}

// Runs before main in every binary that links the core library.
const bool g_threads_initialized = [] {
#ifdef _OPENMP
    omp_set_num_threads(env_thread_default());
#endif
    return true;
}();

}  // namespace

int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_thread_count(int n) {
    (void)g_threads_initialized;
#ifdef _OPENMP
    omp_set_num_threads(n > 0 ? clamp_threads(n) : env_thread_default());
#else
    (void)n;
#endif
}

// ---- shape helpers ----

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += " x ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {

std::atomic<std::uint64_t> g_seq{1};

thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorNode> new_node(Shape shape) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), 0.0);
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return n;
}

bool parent_needs(const TensorNode& p) {
    // A node whose tape was already consumed acts as a constant.
    return p.consumed ? p.requires_grad : p.needs_grad;
}

void ensure_grad(TensorNode& n) {
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

/// Builds an op output node: wires parents and decides whether the op is
/// recorded (grad enabled and some parent needs gradients).
struct OpBuilder {
    std::shared_ptr<TensorNode> out;
    bool recording = false;

    OpBuilder(Shape shape, std::initializer_list<const Tensor*> inputs) {
        out = new_node(std::move(shape));
        if (!g_grad_enabled) return;
        for (const Tensor* t : inputs) {
            if (t->defined() && parent_needs(*t->node())) {
                recording = true;
                break;
            }
        }
        if (recording) {
            out->needs_grad = true;
            for (const Tensor* t : inputs)
                if (t->defined()) out->parents.push_back(t->node());
        }
    }
};

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(a) +
                                " vs " + shape_str(b));
}

void require_2d(const char* op, const Tensor& t) {
    if (!t.defined() || t.shape().size() != 2)
        throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor, got " +
                                    (t.defined() ? shape_str(t.shape()) : std::string("<empty>")));
}

// ---- raw kernels (deterministic: every output element is produced by one
// fixed-order scalar loop, so results do not depend on the worker count) ----

void gemm_nn_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
    const bool par = m * k * n > 16384;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c [k x n] += a^T [k x m]^T... i.e. c += a^T b with a [m x k], b [m x n]
void gemm_tn_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n) {
    const bool par = m * k * n > 16384;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(k); ++p) {
        double* crow = c + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = a[i * k + p];
            const double* brow = b + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

std::vector<double> transpose_raw(const double* a, std::size_t m, std::size_t n) {
    std::vector<double> t(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    return t;
}

// c [m x k] += a [m x n] * b^T with b [k x n]
void gemm_nt_acc(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t n, std::size_t k) {
    std::vector<double> bt = transpose_raw(b, k, n);  // [n x k]
    gemm_nn_acc(a, bt.data(), c, m, n, k);
}

void softmax_line(const double* x, double* y, std::size_t len, std::size_t stride) {
    double mx = x[0];
    for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[j * stride]);
    double sum = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(x[j * stride] - mx);
        y[j * stride] = e;
        sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < len; ++j) y[j * stride] *= inv;
}

constexpr double kGeluC1 = 0.7978845608028653558798921198687637;  // sqrt(2/pi)
constexpr double kGeluC2 = 0.044715;

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = new_node(std::move(shape));
    n->requires_grad = requires_grad;
    n->needs_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node()->value.begin(), t.node()->value.end(), v);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw std::invalid_argument("from_data: " + shape_str(shape) + " does not hold " +
                                    std::to_string(data.size()) + " values");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    n->requires_grad = requires_grad;
    n->needs_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.node()->value) v = rng.normal(0.0, stddev);
    return t;
}

double Tensor::at(std::size_t r, std::size_t c) const {
    if (node_->shape.size() != 2) throw std::invalid_argument("at(r,c): tensor is not 2-D");
    return node_->value[r * node_->shape[1] + c];
}

double Tensor::item() const {
    if (numel() != 1)
        throw std::invalid_argument("item: tensor has shape " + shape_str(shape()));
    return node_->value[0];
}

void Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    node_->needs_grad = v || node_->needs_grad;
}

std::span<const double> Tensor::grad() const {
    if (node_->grad.size() != node_->value.size())
        throw std::runtime_error("grad: no gradient present; run backward() first");
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detached() const {
    return from_data(node_->shape, node_->value, false);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    OpBuilder ob({m, n}, {&a, &b});
    gemm_nn_acc(a.data().data(), b.data().data(), ob.out->value.data(), m, k, n);
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* an = a.node().get();
        TensorNode* bn = b.node().get();
        ob.out->backward_fn = [out, an, bn, m, k, n] {
            if (parent_needs(*an)) {
                ensure_grad(*an);
                gemm_nt_acc(out->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (parent_needs(*bn)) {
                ensure_grad(*bn);
                gemm_tn_acc(an->value.data(), out->grad.data(), bn->grad.data(), m, k, n);
            }
        };
    }
    return Tensor(ob.out);
}

Tensor transpose(const Tensor& a) {
    require_2d("transpose", a);
    const std::size_t m = a.dim(0), n = a.dim(1);
    OpBuilder ob({n, m}, {&a});
    ob.out->value = transpose_raw(a.data().data(), m, n);
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* an = a.node().get();
        ob.out->backward_fn = [out, an, m, n] {
            if (!parent_needs(*an)) return;
            ensure_grad(*an);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += out->grad[j * m + i];
        };
    }
    return Tensor(ob.out);
}

namespace {

Tensor add_like(const Tensor& a, const Tensor& b, double sign_b, const char* name) {
    if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
    OpBuilder ob(a.shape(), {&a, &b});
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) ob.out->value[i] = a[i] + sign_b * b[i];
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* an = a.node().get();
        TensorNode* bn = b.node().get();
        ob.out->backward_fn = [out, an, bn, n, sign_b] {
            if (parent_needs(*an)) {
                ensure_grad(*an);
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += out->grad[i];
            }
            if (parent_needs(*bn)) {
                ensure_grad(*bn);
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += sign_b * out->grad[i];
            }
        };
    }
    return Tensor(ob.out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_like(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_like(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
    OpBuilder ob(a.shape(), {&a, &b});
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) ob.out->value[i] = a[i] * b[i];
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* an = a.node().get();
        TensorNode* bn = b.node().get();
        ob.out->backward_fn = [out, an, bn, n] {
            if (parent_needs(*an)) {
                ensure_grad(*an);
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += out->grad[i] * bn->value[i];
            }
            if (parent_needs(*bn)) {
                ensure_grad(*bn);
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += out->grad[i] * an->value[i];
            }
        };
    }
    return Tensor(ob.out);
}

Tensor scale(const Tensor& a, double c) {
    OpBuilder ob(a.shape(), {&a});
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) ob.out->value[i] = c * a[i];
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* an = a.node().get();
        ob.out->backward_fn = [out, an, n, c] {
            if (!parent_needs(*an)) return;
            ensure_grad(*an);
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += c * out->grad[i];
        };
    }
    return Tensor(ob.out);
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    require_2d("add_rowvec", x);
    if (v.shape().size() != 1 || v.dim(0) != x.dim(1)) shape_error("add_rowvec", x.shape(), v.shape());
    const std::size_t r = x.dim(0), c = x.dim(1);
    OpBuilder ob(x.shape(), {&x, &v});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ob.out->value[i * c + j] = x[i * c + j] + v[j];
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* xn = x.node().get();
        TensorNode* vn = v.node().get();
        ob.out->backward_fn = [out, xn, vn, r, c] {
            if (parent_needs(*xn)) {
                ensure_grad(*xn);
                for (std::size_t i = 0; i < r * c; ++i) xn->grad[i] += out->grad[i];
            }
            if (parent_needs(*vn)) {
                ensure_grad(*vn);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) vn->grad[j] += out->grad[i * c + j];
            }
        };
    }
    return Tensor(ob.out);
}

Tensor gelu(const Tensor& x) {
    OpBuilder ob(x.shape(), {&x});
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x[i];
        const double t = std::tanh(kGeluC1 * (v + kGeluC2 * v * v * v));
        ob.out->value[i] = 0.5 * v * (1.0 + t);
    }
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* xn = x.node().get();
        ob.out->backward_fn = [out, xn, n] {
            if (!parent_needs(*xn)) return;
            ensure_grad(*xn);
            for (std::size_t i = 0; i < n; ++i) {
                const double v = xn->value[i];
                const double t = std::tanh(kGeluC1 * (v + kGeluC2 * v * v * v));
                const double d = 0.5 * (1.0 + t) +
                                 0.5 * v * (1.0 - t * t) * kGeluC1 * (1.0 + 3.0 * kGeluC2 * v * v);
                xn->grad[i] += d * out->grad[i];
            }
        };
    }
    return Tensor(ob.out);
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.shape().size())
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for " + shape_str(x.shape()));
    const std::size_t len = x.dim(axis);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.shape().size(); ++i) inner *= x.dim(i);

    OpBuilder ob(x.shape(), {&x});
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i)
            softmax_line(x.data().data() + o * len * inner + i,
                         ob.out->value.data() + o * len * inner + i, len, inner);
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* xn = x.node().get();
        ob.out->backward_fn = [out, xn, outer, inner, len] {
            if (!parent_needs(*xn)) return;
            ensure_grad(*xn);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t base = o * len * inner + i;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j)
                        dot += out->grad[base + j * inner] * out->value[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t k = base + j * inner;
                        xn->grad[k] += out->value[k] * (out->grad[k] - dot);
                    }
                }
        };
    }
    return Tensor(ob.out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.shape().empty()) throw std::invalid_argument("layer_norm: scalar input");
    if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be > 0");
    const std::size_t c = x.shape().back();
    if (gamma.numel() != c || beta.numel() != c)
        throw std::invalid_argument("layer_norm: gamma/beta must have " + std::to_string(c) +
                                    " entries");
    const std::size_t rows = x.numel() / c;
    OpBuilder ob(x.shape(), {&x, &gamma, &beta});
    std::vector<double> xhat(rows * c);
    std::vector<double> inv_std(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = x.data().data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[i] = inv;
        for (std::size_t j = 0; j < c; ++j) {
            const double xh = (xr[j] - mu) * inv;
            xhat[i * c + j] = xh;
            ob.out->value[i * c + j] = xh * gamma[j] + beta[j];
        }
    }
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* xn = x.node().get();
        TensorNode* gn = gamma.node().get();
        TensorNode* bn = beta.node().get();
        ob.out->backward_fn = [out, xn, gn, bn, rows, c, xh = std::move(xhat),
                               inv = std::move(inv_std)] {
            std::vector<double> g(c);
            for (std::size_t i = 0; i < rows; ++i) {
                const double* dy = out->grad.data() + i * c;
                const double* xhr = xh.data() + i * c;
                if (parent_needs(*xn)) {
                    ensure_grad(*xn);
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        g[j] = dy[j] * gn->value[j];
                        m1 += g[j];
                        m2 += g[j] * xhr[j];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j)
                        xn->grad[i * c + j] += inv[i] * (g[j] - m1 - xhr[j] * m2);
                }
                if (parent_needs(*gn)) {
                    ensure_grad(*gn);
                    for (std::size_t j = 0; j < c; ++j) gn->grad[j] += dy[j] * xhr[j];
                }
                if (parent_needs(*bn)) {
                    ensure_grad(*bn);
                    for (std::size_t j = 0; j < c; ++j) bn->grad[j] += dy[j];
                }
            }
        };
    }
    return Tensor(ob.out);
}

namespace {

Tensor reduce_all(const Tensor& x, bool take_mean, const char* name) {
    (void)name;
    OpBuilder ob({1}, {&x});
    const std::size_t n = x.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i];
    const double k = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
    ob.out->value[0] = s * k;
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* xn = x.node().get();
        ob.out->backward_fn = [out, xn, n, k] {
            if (!parent_needs(*xn)) return;
            ensure_grad(*xn);
            const double g = out->grad[0] * k;
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
        };
    }
    return Tensor(ob.out);
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, false, "sum"); }
Tensor mean(const Tensor& x) { return reduce_all(x, true, "mean"); }

Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows) {
    require_2d("gather_rows", x);
    const std::size_t c = x.dim(1);
    for (std::size_t r : rows)
        if (r >= x.dim(0)) throw std::invalid_argument("gather_rows: row index out of range");
    OpBuilder ob({rows.size(), c}, {&x});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(x.data().data() + rows[i] * c, c, ob.out->value.data() + i * c);
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* xn = x.node().get();
        ob.out->backward_fn = [out, xn, c, idx = std::move(rows)] {
            if (!parent_needs(*xn)) return;
            ensure_grad(*xn);
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j)
                    xn->grad[idx[i] * c + j] += out->grad[i * c + j];
        };
    }
    return Tensor(ob.out);
}

Tensor prepend_token(const Tensor& x, const Tensor& token, std::size_t batch) {
    require_2d("prepend_token", x);
    const std::size_t c = x.dim(1);
    if (token.numel() != c) shape_error("prepend_token", x.shape(), token.shape());
    if (batch == 0 || x.dim(0) % batch != 0)
        throw std::invalid_argument("prepend_token: rows not divisible by batch");
    const std::size_t n = x.dim(0) / batch;
    const std::size_t t = n + 1;
    OpBuilder ob({batch * t, c}, {&x, &token});
    for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(token.data().data(), c, ob.out->value.data() + b * t * c);
        std::copy_n(x.data().data() + b * n * c, n * c, ob.out->value.data() + (b * t + 1) * c);
    }
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* xn = x.node().get();
        TensorNode* tn = token.node().get();
        ob.out->backward_fn = [out, xn, tn, batch, n, t, c] {
            if (parent_needs(*tn)) {
                ensure_grad(*tn);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t j = 0; j < c; ++j) tn->grad[j] += out->grad[b * t * c + j];
            }
            if (parent_needs(*xn)) {
                ensure_grad(*xn);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t i = 0; i < n * c; ++i)
                        xn->grad[b * n * c + i] += out->grad[(b * t + 1) * c + i];
            }
        };
    }
    return Tensor(ob.out);
}

Tensor add_positions(const Tensor& x, const Tensor& pos, std::size_t batch) {
    require_2d("add_positions", x);
    require_2d("add_positions", pos);
    if (batch == 0 || x.dim(0) != batch * pos.dim(0) || x.dim(1) != pos.dim(1))
        shape_error("add_positions", x.shape(), pos.shape());
    const std::size_t t = pos.dim(0), c = pos.dim(1);
    OpBuilder ob(x.shape(), {&x, &pos});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < t * c; ++i)
            ob.out->value[b * t * c + i] = x[b * t * c + i] + pos[i];
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* xn = x.node().get();
        TensorNode* pn = pos.node().get();
        ob.out->backward_fn = [out, xn, pn, batch, t, c] {
            if (parent_needs(*xn)) {
                ensure_grad(*xn);
                for (std::size_t i = 0; i < batch * t * c; ++i) xn->grad[i] += out->grad[i];
            }
            if (parent_needs(*pn)) {
                ensure_grad(*pn);
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t i = 0; i < t * c; ++i) pn->grad[i] += out->grad[b * t * c + i];
            }
        };
    }
    return Tensor(ob.out);
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t batch, std::size_t tokens, std::size_t heads) {
    require_2d("multihead_attention", q);
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw std::invalid_argument("multihead_attention: q/k/v shapes differ");
    const std::size_t d = q.dim(1);
    if (q.dim(0) != batch * tokens)
        throw std::invalid_argument("multihead_attention: rows != batch*tokens");
    if (heads == 0 || d % heads != 0)
        throw std::invalid_argument("multihead_attention: embed dim not divisible by heads");
    const std::size_t dh = d / heads;
    const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));

    OpBuilder ob(q.shape(), {&q, &k, &v});
    std::vector<double> probs(batch * heads * tokens * tokens);
    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();
    double* od = ob.out->value.data();

    const std::int64_t units = static_cast<std::int64_t>(batch * heads);
#pragma omp parallel for schedule(static) if (units > 1)
    for (std::int64_t u = 0; u < units; ++u) {
        const std::size_t b = static_cast<std::size_t>(u) / heads;
        const std::size_t h = static_cast<std::size_t>(u) % heads;
        const std::size_t rb = b * tokens;
        const std::size_t co = h * dh;
        double* p = probs.data() + static_cast<std::size_t>(u) * tokens * tokens;
        for (std::size_t s = 0; s < tokens; ++s) {
            const double* qrow = qd + (rb + s) * d + co;
            double* prow = p + s * tokens;
            for (std::size_t t2 = 0; t2 < tokens; ++t2) {
                const double* krow = kd + (rb + t2) * d + co;
                double dot = 0.0;
                for (std::size_t j = 0; j < dh; ++j) dot += qrow[j] * krow[j];
                prow[t2] = dot * alpha;
            }
            softmax_line(prow, prow, tokens, 1);
            double* orow = od + (rb + s) * d + co;
            for (std::size_t j = 0; j < dh; ++j) orow[j] = 0.0;
            for (std::size_t t2 = 0; t2 < tokens; ++t2) {
                const double pv = prow[t2];
                const double* vrow = vd + (rb + t2) * d + co;
                for (std::size_t j = 0; j < dh; ++j) orow[j] += pv * vrow[j];
            }
        }
    }

    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* qn = q.node().get();
        TensorNode* kn = k.node().get();
        TensorNode* vn = v.node().get();
        ob.out->backward_fn = [out, qn, kn, vn, batch, tokens, heads, d, dh, alpha,
                               p_all = std::move(probs)] {
            const bool nq = parent_needs(*qn), nk = parent_needs(*kn), nv = parent_needs(*vn);
            if (!nq && !nk && !nv) return;
            if (nq) ensure_grad(*qn);
            if (nk) ensure_grad(*kn);
            if (nv) ensure_grad(*vn);
            const std::int64_t units = static_cast<std::int64_t>(batch * heads);
#pragma omp parallel for schedule(static) if (units > 1)
            for (std::int64_t u = 0; u < units; ++u) {
                const std::size_t b = static_cast<std::size_t>(u) / heads;
                const std::size_t h = static_cast<std::size_t>(u) % heads;
                const std::size_t rb = b * tokens;
                const std::size_t co = h * dh;
                const double* p = p_all.data() + static_cast<std::size_t>(u) * tokens * tokens;
                std::vector<double> ds(tokens);
                for (std::size_t s = 0; s < tokens; ++s) {
                    const double* dorow = out->grad.data() + (rb + s) * d + co;
                    const double* prow = p + s * tokens;
                    // dP row and its softmax pullback
                    double dot = 0.0;
                    for (std::size_t t2 = 0; t2 < tokens; ++t2) {
                        const double* vrow = vn->value.data() + (rb + t2) * d + co;
                        double dp = 0.0;
                        for (std::size_t j = 0; j < dh; ++j) dp += dorow[j] * vrow[j];
                        ds[t2] = dp;
                        dot += dp * prow[t2];
                    }
                    for (std::size_t t2 = 0; t2 < tokens; ++t2)
                        ds[t2] = prow[t2] * (ds[t2] - dot) * alpha;
                    if (nq) {
                        double* dqrow = qn->grad.data() + (rb + s) * d + co;
                        for (std::size_t t2 = 0; t2 < tokens; ++t2) {
                            const double w = ds[t2];
                            const double* krow = kn->value.data() + (rb + t2) * d + co;
                            for (std::size_t j = 0; j < dh; ++j) dqrow[j] += w * krow[j];
                        }
                    }
                    if (nk) {
                        const double* qrow = qn->value.data() + (rb + s) * d + co;
                        for (std::size_t t2 = 0; t2 < tokens; ++t2) {
                            const double w = ds[t2];
                            double* dkrow = kn->grad.data() + (rb + t2) * d + co;
                            for (std::size_t j = 0; j < dh; ++j) dkrow[j] += w * qrow[j];
                        }
                    }
                    if (nv) {
                        for (std::size_t t2 = 0; t2 < tokens; ++t2) {
                            const double w = prow[t2];
                            double* dvrow = vn->grad.data() + (rb + t2) * d + co;
                            for (std::size_t j = 0; j < dh; ++j) dvrow[j] += w * dorow[j];
                        }
                    }
                }
            }
        };
    }
    return Tensor(ob.out);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return lora_linear(x, w, b, Tensor(), Tensor(), 0.0);
}

Tensor lora_linear(const Tensor& x, const Tensor& w, const Tensor& b,
                   const Tensor& a, const Tensor& bm, double scale_over_rank) {
    require_2d("lora_linear", x);
    require_2d("lora_linear", w);
    const std::size_t rows = x.dim(0), din = x.dim(1), dout = w.dim(1);
    if (w.dim(0) != din)
        throw std::invalid_argument("lora_linear: x " + shape_str(x.shape()) + " vs W " +
                                    shape_str(w.shape()));
    if (b.defined() && b.numel() != dout)
        throw std::invalid_argument("lora_linear: bias length mismatch");
    const bool adapted = a.defined();
    std::size_t rank = 0;
    if (adapted) {
        require_2d("lora_linear", a);
        require_2d("lora_linear", bm);
        rank = a.dim(1);
        if (a.dim(0) != din || bm.dim(0) != rank || bm.dim(1) != dout)
            throw std::invalid_argument("lora_linear: adapter shapes A " + shape_str(a.shape()) +
                                        " / B " + shape_str(bm.shape()) + " do not fit W " +
                                        shape_str(w.shape()));
        if (rank > std::min(din, dout))
            throw ConfigError("lora_linear: rank " + std::to_string(rank) +
                              " exceeds min(d_in, d_out) = " +
                              std::to_string(std::min(din, dout)));
    }

    OpBuilder ob({rows, dout}, {&x, &w, &b, &a, &bm});
    double* y = ob.out->value.data();
    if (b.defined())
        for (std::size_t i = 0; i < rows; ++i)
            std::copy_n(b.data().data(), dout, y + i * dout);
    gemm_nn_acc(x.data().data(), w.data().data(), y, rows, din, dout);
    std::vector<double> xa;
    if (adapted) {
        xa.assign(rows * rank, 0.0);
        gemm_nn_acc(x.data().data(), a.data().data(), xa.data(), rows, din, rank);
        std::vector<double> upd(rows * dout, 0.0);
        gemm_nn_acc(xa.data(), bm.data().data(), upd.data(), rows, rank, dout);
        for (std::size_t i = 0; i < rows * dout; ++i) y[i] += scale_over_rank * upd[i];
    }

    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* xn = x.node().get();
        TensorNode* wn = w.node().get();
        TensorNode* bn = b.defined() ? b.node().get() : nullptr;
        TensorNode* an = adapted ? a.node().get() : nullptr;
        TensorNode* bmn = adapted ? bm.node().get() : nullptr;
        ob.out->backward_fn = [out, xn, wn, bn, an, bmn, rows, din, dout, rank, scale_over_rank,
                               xa_saved = std::move(xa)] {
            const double* dy = out->grad.data();
            if (bn && parent_needs(*bn)) {
                ensure_grad(*bn);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < dout; ++j) bn->grad[j] += dy[i * dout + j];
            }
            if (parent_needs(*wn)) {
                ensure_grad(*wn);
                gemm_tn_acc(xn->value.data(), dy, wn->grad.data(), rows, din, dout);
            }
            const bool nx = parent_needs(*xn);
            const bool na = an && parent_needs(*an);
            const bool nbm = bmn && parent_needs(*bmn);
            if (nx) {
                ensure_grad(*xn);
                gemm_nt_acc(dy, wn->value.data(), xn->grad.data(), rows, dout, din);
            }
            if (an && (nx || na)) {
                std::vector<double> dybt(rows * rank, 0.0);  // dy * B^T
                gemm_nt_acc(dy, bmn->value.data(), dybt.data(), rows, dout, rank);
                for (double& g : dybt) g *= scale_over_rank;
                if (nx)
                    gemm_nt_acc(dybt.data(), an->value.data(), xn->grad.data(), rows, rank, din);
                if (na) {
                    ensure_grad(*an);
                    gemm_tn_acc(xn->value.data(), dybt.data(), an->grad.data(), rows, din, rank);
                }
            }
            if (nbm) {
                ensure_grad(*bmn);
                std::vector<double> dup(rank * dout, 0.0);
                gemm_tn_acc(xa_saved.data(), dy, dup.data(), rows, rank, dout);
                for (std::size_t i = 0; i < rank * dout; ++i)
                    bmn->grad[i] += scale_over_rank * dup[i];
            }
        };
    }
    return Tensor(ob.out);
}

// ---- losses ----

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
    require_2d("cross_entropy", logits);
    const std::size_t rows = logits.dim(0), k = logits.dim(1);
    if (labels.size() != rows)
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(rows) + " rows");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                        " out of range");
    OpBuilder ob({1}, {&logits});
    std::vector<double> probs(rows * k);
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        const double* z = logits.data().data() + i * k;
        double mx = z[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            probs[i * k + j] = std::exp(z[j] - mx);
            s += probs[i * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= s;
        total += (mx + std::log(s)) - z[labels[i]];
    }
    ob.out->value[0] = total / static_cast<double>(rows);
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* zn = logits.node().get();
        ob.out->backward_fn = [out, zn, rows, k, labels, p = std::move(probs)] {
            if (!parent_needs(*zn)) return;
            ensure_grad(*zn);
            const double g = out->grad[0] / static_cast<double>(rows);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < k; ++j) {
                    const double target = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
                    zn->grad[i * k + j] += g * (p[i * k + j] - target);
                }
        };
    }
    return Tensor(ob.out);
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
    require_2d("kl_divergence", p);
    if (p.shape() != q.shape()) shape_error("kl_divergence", p.shape(), q.shape());
    const std::size_t rows = p.dim(0), k = p.dim(1);
    constexpr double kFloor = 1e-12;
    OpBuilder ob({1}, {&p, &q});
    double total = 0.0;
    for (std::size_t i = 0; i < rows * k; ++i) {
        const double pv = p[i];
        if (pv > 0.0) total += pv * (std::log(pv) - std::log(std::max(q[i], kFloor)));
    }
    ob.out->value[0] = total / static_cast<double>(rows);
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* pn = p.node().get();
        TensorNode* qn = q.node().get();
        ob.out->backward_fn = [out, pn, qn, rows, k] {
            const double g = out->grad[0] / static_cast<double>(rows);
            if (parent_needs(*qn)) {
                ensure_grad(*qn);
                for (std::size_t i = 0; i < rows * k; ++i) {
                    const double pv = pn->value[i];
                    if (pv > 0.0 && qn->value[i] > kFloor)
                        qn->grad[i] -= g * pv / qn->value[i];
                }
            }
            if (parent_needs(*pn)) {
                ensure_grad(*pn);
                for (std::size_t i = 0; i < rows * k; ++i) {
                    const double pv = pn->value[i];
                    if (pv > 0.0)
                        pn->grad[i] +=
                            g * (std::log(pv) - std::log(std::max(qn->value[i], kFloor)) + 1.0);
                }
            }
        };
    }
    return Tensor(ob.out);
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mse", a.shape(), b.shape());
    const std::size_t n = a.numel();
    OpBuilder ob({1}, {&a, &b});
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        total += d * d;
    }
    ob.out->value[0] = total / static_cast<double>(n);
    if (ob.recording) {
        TensorNode* out = ob.out.get();
        TensorNode* an = a.node().get();
        TensorNode* bn = b.node().get();
        ob.out->backward_fn = [out, an, bn, n] {
            const double g = 2.0 * out->grad[0] / static_cast<double>(n);
            if (parent_needs(*an)) {
                ensure_grad(*an);
                for (std::size_t i = 0; i < n; ++i)
                    an->grad[i] += g * (an->value[i] - bn->value[i]);
            }
            if (parent_needs(*bn)) {
                ensure_grad(*bn);
                for (std::size_t i = 0; i < n; ++i)
                    bn->grad[i] -= g * (an->value[i] - bn->value[i]);
            }
        };
    }
    return Tensor(ob.out);
}

// ---- backward ----

void backward(const Tensor& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
    TensorNode* root = loss.node().get();
    if (root->value.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    shape_str(root->shape));
    if (!root->needs_grad) return;  // nothing trainable is reachable

    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<TensorNode*> stack{root};
    while (!stack.empty()) {
        TensorNode* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->needs_grad) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });

    for (TensorNode* n : order) ensure_grad(*n);
    root->grad[0] += 1.0;
    for (TensorNode* n : order)
        if (n->backward_fn) n->backward_fn();

    // Release the traversed graph: the tape is single-use.
    for (TensorNode* n : order) {
        if (n->backward_fn || !n->parents.empty()) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->consumed = true;
        }
        if (!n->requires_grad) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double h) {
    if (h <= 0) throw std::invalid_argument("grad_check: h must be > 0");
    for (const Tensor& p : params) {
        p.node()->grad.clear();
    }
    Tensor loss = f();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) {
        if (p.has_grad())
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        else
            analytic.emplace_back(p.numel(), 0.0);
    }

    double max_err = 0.0;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto vals = params[pi].node()->value.data();
        for (std::size_t i = 0; i < params[pi].numel(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp = f().item();
            vals[i] = orig - h;
            const double fm = f().item();
            vals[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

// ---- serialization ----

namespace {
constexpr char kMagic[4] = {'L', 'P', 'T', 'T'};

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw DataError("tensor read: truncated stream");
    return v;
}
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    write_u32(os, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("tensor read: bad magic (expected LPTT)");
    const std::uint32_t rank = read_u32(is);
    if (rank > 8) throw DataError("tensor read: implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = read_u32(is);
    std::vector<double> data(shape_numel(shape));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw DataError("tensor read: truncated payload");
    return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace lpt
