#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace cmamba {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Forward-pass payload shared by Tensor handles. `node`/`epoch` tie the
// tensor to a recording on the active tape; a stale epoch means detached.
struct TensorData {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until populated by backward()
    int node = -1;
    std::uint64_t epoch = 0;
};

// Value-semantics handle onto shared storage. Copies alias the same data,
// matching the usual dynamic-graph tensor contract.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values);
    explicit Tensor(Shape shape, double fill = 0.0);

    static Tensor scalar(double v);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
    static Tensor normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0);

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    std::vector<double>& values();
    const std::vector<double>& values() const;
    double item() const;  // requires size() == 1
    double at(std::initializer_list<std::size_t> index) const;

    Tensor& set_requires_grad(bool on = true);
    bool requires_grad() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;  // throws when absent
    void zero_grad();

    // Deep copy of values only; result is detached and grad-free.
    Tensor clone() const;

    std::shared_ptr<TensorData> data() const { return d_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;

    friend Tensor wrap(std::shared_ptr<TensorData>);
};

Tensor wrap(std::shared_ptr<TensorData> d);

// One recorded operation. Parents always precede the node itself, so a
// single reverse sweep over the tape is a valid backpropagation order.
class BackwardBuffers;
using BackwardFn = std::function<void(const std::vector<double>& gout, BackwardBuffers& bufs)>;

struct TapeNode {
    const char* kind;
    std::vector<int> parents;
    std::shared_ptr<TensorData> out;
    BackwardFn backward;  // null for leaves
};

// Wengert-list tape. Constructing a Tape makes it the active tape for the
// current thread (stack discipline); ops record onto it only while an input
// requires a gradient. Clearing or destroying the tape invalidates every
// node identifier issued under its epoch.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    std::size_t size() const { return nodes_.size(); }
    std::uint64_t epoch() const { return epoch_; }
    void clear();

    const TapeNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    // Returns the node id for a tensor on this tape, creating a leaf record
    // for fresh requires_grad tensors; -1 for constants.
    int node_of(const std::shared_ptr<TensorData>& td);
    int record(const char* kind, std::vector<int> parents,
               const std::shared_ptr<TensorData>& out, BackwardFn backward);

private:
    std::vector<TapeNode> nodes_;
    std::uint64_t epoch_;
    Tape* prev_;
};

// Scratch gradient buffers keyed by node id, used only inside backward().
class BackwardBuffers {
public:
    explicit BackwardBuffers(Tape& tape) : tape_(tape), bufs_(tape.size()) {}
    std::vector<double>& at(int node_id);
    bool allocated(int node_id) const;
    void release(int node_id);

private:
    Tape& tape_;
    std::vector<std::vector<double>> bufs_;
};

enum class EwOp { add, sub, mul, neg, exp, sigmoid, silu, softplus, relu, abs };

Tensor elementwise(EwOp op, const Tensor& a);
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Matrix product over the trailing two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

enum class Reduce { mean, sum, max };

// Drops `axis`. Max routes its gradient to the first maximal element.
Tensor reduce(Reduce op, const Tensor& x, std::size_t axis);
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);

Tensor transpose(const Tensor& x, std::size_t ax0, std::size_t ax1);
Tensor reshape(const Tensor& x, Shape shape);

// Escape hatch for test-defined ops (and deliberate negative controls).
Tensor custom_unary(const Tensor& x, const char* kind,
                    std::function<double(double)> fwd,
                    std::function<double(double)> dfdx);

// Reverse sweep from a scalar loss on the active tape. Gradients of every
// reachable requires_grad tensor are accumulated (+=) until zeroed.
void backward(const Tensor& loss);

struct GradCheckItem {
    std::string name;
    bool pass = true;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    bool pass = true;
    double tol = 0.0;
    std::vector<GradCheckItem> items;
    std::string summary() const;
};

// Central finite differences against the tape gradient. An entry passes when
// |analytic - numeric| <= tol * max(1, |analytic|, |numeric|); the reported
// relative error uses the same denominator. Parameter grads are cleared
// before and after. Throws when f produces a non-finite value.
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double step = 1e-5, double tol = 1e-4);

namespace detail {

struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a;  // element strides aligned to out, 0 on broadcast axes
    std::vector<std::size_t> stride_b;
};

BroadcastPlan broadcast_plan(const Shape& a, const Shape& b);

// Row-major dense kernels. All are deterministic: each output element is
// reduced serially by exactly one thread.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);

}  // namespace detail

}  // namespace cmamba
