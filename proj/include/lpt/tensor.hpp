#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lpt/rng.hpp"

namespace lpt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;          // sized on demand during backward
    bool requires_grad = false;        // leaf parameter flag
    bool needs_grad = false;           // true if any ancestor requires grad
    bool consumed = false;             // set once backward has released this node
    std::uint64_t seq = 0;             // creation order; backward walks it descending
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn; // accumulates into parents' grads
};

/// Dense 64-bit tensor, row-major, with reverse-mode differentiation.
/// Value handle: copies share the underlying node. Graphs are built
/// define-by-run; backward() consumes the graph it reaches.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    /// Entries iid N(0, stddev^2), drawn in row-major order.
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

    std::span<const double> data() const { return node_->value; }
    /// Mutable view of the raw values. Only meaningful for leaves
    /// (parameters, inputs); graphs do not track in-place edits.
    std::span<double> mutable_data() { return node_->value; }

    double operator[](std::size_t i) const { return node_->value[i]; }
    double at(std::size_t r, std::size_t c) const;
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v);
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const;
    void zero_grad();

    /// Copy of the values with no graph history.
    Tensor detached() const;

    std::shared_ptr<TensorNode> node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<TensorNode> node_;
};

/// Scoped guard that disables graph recording (inference / finite differences).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---- differentiable operations ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
/// x [R x C] + v [C], broadcast over rows.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes the last axis to mean 0 / variance 1 (population), then
/// applies gamma/beta. gamma and beta have the last-axis length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// out[i] = x[rows[i]], duplicates allowed.
Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows);
/// Inserts the learned token in front of every sample's row block:
/// x [(B*N) x d] -> [(B*(N+1)) x d].
Tensor prepend_token(const Tensor& x, const Tensor& token, std::size_t batch);
/// x [(B*T) x d] + pos [T x d], broadcast over the batch.
Tensor add_positions(const Tensor& x, const Tensor& pos, std::size_t batch);
/// Fused multi-head attention over already-projected q/k/v, each [(B*T) x d].
/// Scores are scaled by 1/sqrt(d/heads); softmax over the key axis.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t batch, std::size_t tokens, std::size_t heads);
/// x W + b (b optional: pass undefined Tensor to skip).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// x W + b + (s/r) (x A) B  — low-rank adapted linear layer.
Tensor lora_linear(const Tensor& x, const Tensor& w, const Tensor& b,
                   const Tensor& a, const Tensor& bm, double scale_over_rank);

// ---- losses ----

/// Mean over rows of -log softmax(logits)[label]; stable log-sum-exp.
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels);
/// Mean over rows of sum_i p_i * ln(p_i / q_i), with 0*ln(0/q) = 0 and q
/// floored at 1e-12. Both arguments are probability rows.
Tensor kl_divergence(const Tensor& p, const Tensor& q);
/// Mean squared elementwise difference.
Tensor mse(const Tensor& a, const Tensor& b);

// ---- backward ----

/// Reverse-mode sweep from a scalar loss. Populates .grad on every
/// requires_grad tensor reachable from the loss (accumulating), then
/// releases the traversed graph; a second sweep over the same nodes throws.
void backward(const Tensor& loss);

/// Max over all parameter coordinates of
/// |analytic - central difference| / max(1, |analytic|).
/// f must rebuild the loss graph from the current parameter values.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double h = 1e-5);

// ---- serialization (flat binary: "LPTT", u32 rank, u32 dims..., f64 payload LE) ----

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

}  // namespace lpt
