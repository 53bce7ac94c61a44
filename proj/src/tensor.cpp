#include "cmamba/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "cmamba/rng.hpp"

namespace cmamba {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local std::uint64_t g_epoch_counter = 0;

constexpr std::size_t kParallelThreshold = 1 << 15;

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values)
    : d_(std::make_shared<TensorData>()) {
    for (std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (values.size() != numel(shape)) {
        throw std::invalid_argument("tensor value count " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    d_->shape = std::move(shape);
    d_->values = std::move(values);
}

Tensor::Tensor(Shape shape, double fill) : d_(std::make_shared<TensorData>()) {
    for (std::size_t d : shape) {
        if (d == 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
    }
    d_->values.assign(numel(shape), fill);
    d_->shape = std::move(shape);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::normal(Shape shape, Rng& rng, double mean, double stddev) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.normal(mean, stddev);
    return Tensor(std::move(shape), std::move(v));
}

const Shape& Tensor::shape() const {
    if (!d_) throw std::logic_error("use of undefined tensor");
    return d_->shape;
}

std::size_t Tensor::size() const { return d_ ? d_->values.size() : 0; }

std::vector<double>& Tensor::values() {
    if (!d_) throw std::logic_error("use of undefined tensor");
    return d_->values;
}

const std::vector<double>& Tensor::values() const {
    if (!d_) throw std::logic_error("use of undefined tensor");
    return d_->values;
}

double Tensor::item() const {
    if (size() != 1) {
        throw std::invalid_argument("item() requires a single-element tensor, got shape " + shape_str(shape()));
    }
    return d_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) {
        throw std::invalid_argument("index rank " + std::to_string(index.size()) +
                                    " does not match shape " + shape_str(s));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= s[axis]) throw std::out_of_range("index out of range in axis " + std::to_string(axis));
        flat = flat * s[axis] + i;
        ++axis;
    }
    return d_->values[flat];
}

Tensor& Tensor::set_requires_grad(bool on) {
    if (!d_) throw std::logic_error("use of undefined tensor");
    d_->requires_grad = on;
    return *this;
}

bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

bool Tensor::has_grad() const { return d_ && !d_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return d_->grad;
}

void Tensor::zero_grad() {
    if (!d_) return;
    d_->grad.assign(d_->values.size(), 0.0);
}

Tensor Tensor::clone() const {
    if (!d_) return Tensor();
    return Tensor(d_->shape, d_->values);
}

Tensor wrap(std::shared_ptr<TensorData> d) { return Tensor(std::move(d)); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : epoch_(++g_epoch_counter), prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::clear() {
    nodes_.clear();
    epoch_ = ++g_epoch_counter;
}

int Tape::node_of(const std::shared_ptr<TensorData>& td) {
    if (td->node >= 0 && td->epoch == epoch_) return td->node;
    if (!td->requires_grad) return -1;
    td->node = record("leaf", {}, td, nullptr);
    td->epoch = epoch_;
    return td->node;
}

int Tape::record(const char* kind, std::vector<int> parents,
                 const std::shared_ptr<TensorData>& out, BackwardFn backward) {
    nodes_.push_back(TapeNode{kind, std::move(parents), out, std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& BackwardBuffers::at(int node_id) {
    auto& buf = bufs_[static_cast<std::size_t>(node_id)];
    if (buf.empty()) buf.assign(tape_.node(node_id).out->values.size(), 0.0);
    return buf;
}

bool BackwardBuffers::allocated(int node_id) const {
    return !bufs_[static_cast<std::size_t>(node_id)].empty();
}

void BackwardBuffers::release(int node_id) {
    std::vector<double>().swap(bufs_[static_cast<std::size_t>(node_id)]);
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

namespace detail {

BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
    const std::size_t ra = a.size(), rb = b.size();
    const std::size_t ro = std::max(ra, rb);
    BroadcastPlan plan;
    plan.out.resize(ro);
    // padded dims
    std::vector<std::size_t> da(ro, 1), db(ro, 1);
    for (std::size_t i = 0; i < ra; ++i) da[ro - ra + i] = a[i];
    for (std::size_t i = 0; i < rb; ++i) db[ro - rb + i] = b[i];
    for (std::size_t i = 0; i < ro; ++i) {
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
            throw std::invalid_argument("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        }
        plan.out[i] = std::max(da[i], db[i]);
    }
    // natural row-major strides on the padded shapes, zeroed on broadcast axes
    plan.stride_a.assign(ro, 0);
    plan.stride_b.assign(ro, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t i = ro; i-- > 0;) {
        plan.stride_a[i] = (da[i] == 1) ? 0 : sa;
        plan.stride_b[i] = (db[i] == 1) ? 0 : sb;
        sa *= da[i];
        sb *= db[i];
    }
    return plan;
}

// Odometer over the broadcast output space, tracking input offsets.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
    const std::size_t n = numel(plan.out);
    const std::size_t ro = plan.out.size();
    if (ro == 0) {
        fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    std::vector<std::size_t> idx(ro, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t k = 0; k < n; ++k) {
        fn(k, ia, ib);
        for (std::size_t d = ro; d-- > 0;) {
            ++idx[d];
            ia += plan.stride_a[d];
            ib += plan.stride_b[d];
            if (idx[d] < plan.out[d]) break;
            idx[d] = 0;
            ia -= plan.stride_a[d] * plan.out[d];
            ib -= plan.stride_b[d] * plan.out[d];
        }
    }
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * n * k > kParallelThreshold)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, 0.0);
        const double* arow = a + static_cast<std::size_t>(i) * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * n * k > kParallelThreshold)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        const double* arow = a + static_cast<std::size_t>(i) * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * n * k > kParallelThreshold)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[p * m + static_cast<std::size_t>(i)];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Op recording helpers
// ---------------------------------------------------------------------------

namespace {

// Records `out` on the active tape when gradients should flow from `inputs`.
void maybe_record(const char* kind, std::initializer_list<Tensor> inputs,
                  Tensor& out, const std::function<BackwardFn(const std::vector<int>&)>& make_backward) {
    Tape* tape = Tape::active();
    if (!tape) return;
    bool track = false;
    for (const Tensor& t : inputs) {
        if (t.requires_grad() || (t.data()->node >= 0 && t.data()->epoch == tape->epoch())) {
            track = true;
            break;
        }
    }
    if (!track) return;
    std::vector<int> parents;
    parents.reserve(inputs.size());
    for (const Tensor& t : inputs) parents.push_back(tape->node_of(t.data()));
    out.set_requires_grad(true);
    out.data()->node = tape->record(kind, parents, out.data(), make_backward(parents));
    out.data()->epoch = tape->epoch();
}

void add_scaled(std::vector<double>& dst, const std::vector<double>& src, double scale = 1.0) {
#pragma omp parallel for schedule(static) if (dst.size() > kParallelThreshold)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(dst.size()); ++i) {
        dst[static_cast<std::size_t>(i)] += scale * src[static_cast<std::size_t>(i)];
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

double ew_forward(EwOp op, double x) {
    switch (op) {
        case EwOp::neg: return -x;
        case EwOp::exp: return std::exp(x);
        case EwOp::sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case EwOp::silu: return x / (1.0 + std::exp(-x));
        case EwOp::softplus:
            // overflow-safe log(1 + e^x)
            return x > 30.0 ? x : std::log1p(std::exp(x));
        case EwOp::relu: return x > 0.0 ? x : 0.0;
        case EwOp::abs: return std::fabs(x);
        default: throw std::logic_error("binary op used as unary");
    }
}

// Derivative at x. relu and abs use subgradient 0 at the kink.
double ew_derivative(EwOp op, double x) {
    switch (op) {
        case EwOp::neg: return -1.0;
        case EwOp::exp: return std::exp(x);
        case EwOp::sigmoid: {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 - s);
        }
        case EwOp::silu: {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        }
        case EwOp::softplus: return 1.0 / (1.0 + std::exp(-x));
        case EwOp::relu: return x > 0.0 ? 1.0 : 0.0;
        case EwOp::abs: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
        default: throw std::logic_error("binary op used as unary");
    }
}

const char* ew_name(EwOp op) {
    switch (op) {
        case EwOp::add: return "add";
        case EwOp::sub: return "sub";
        case EwOp::mul: return "mul";
        case EwOp::neg: return "neg";
        case EwOp::exp: return "exp";
        case EwOp::sigmoid: return "sigmoid";
        case EwOp::silu: return "silu";
        case EwOp::softplus: return "softplus";
        case EwOp::relu: return "relu";
        case EwOp::abs: return "abs";
    }
    return "?";
}

}  // namespace

Tensor elementwise(EwOp op, const Tensor& a) {
    if (op == EwOp::add || op == EwOp::sub || op == EwOp::mul) {
        throw std::invalid_argument("elementwise: binary op requires two inputs");
    }
    const auto& av = a.values();
    std::vector<double> out(av.size());
#pragma omp parallel for schedule(static) if (av.size() > kParallelThreshold)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(av.size()); ++i) {
        out[static_cast<std::size_t>(i)] = ew_forward(op, av[static_cast<std::size_t>(i)]);
    }
    Tensor result(a.shape(), std::move(out));
    auto ad = a.data();
    maybe_record(ew_name(op), {a}, result, [op, ad](const std::vector<int>& parents) -> BackwardFn {
        const int pa = parents[0];
        return [op, ad, pa](const std::vector<double>& gout, BackwardBuffers& bufs) {
            if (pa < 0) return;
            auto& ga = bufs.at(pa);
            const auto& x = ad->values;
#pragma omp parallel for schedule(static) if (gout.size() > kParallelThreshold)
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(gout.size()); ++i) {
                const auto k = static_cast<std::size_t>(i);
                ga[k] += ew_derivative(op, x[k]) * gout[k];
            }
        };
    });
    return result;
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
    if (!(op == EwOp::add || op == EwOp::sub || op == EwOp::mul)) {
        throw std::invalid_argument("elementwise: unary op requires one input");
    }
    const auto plan = detail::broadcast_plan(a.shape(), b.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(numel(plan.out));
    const bool same = a.shape() == b.shape();
    if (same) {
#pragma omp parallel for schedule(static) if (out.size() > kParallelThreshold)
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(out.size()); ++i) {
            const auto k = static_cast<std::size_t>(i);
            out[k] = op == EwOp::add ? av[k] + bv[k] : (op == EwOp::sub ? av[k] - bv[k] : av[k] * bv[k]);
        }
    } else {
        detail::for_each_broadcast(plan, [&](std::size_t k, std::size_t ia, std::size_t ib) {
            out[k] = op == EwOp::add ? av[ia] + bv[ib] : (op == EwOp::sub ? av[ia] - bv[ib] : av[ia] * bv[ib]);
        });
    }
    Tensor result(plan.out, std::move(out));
    auto ad = a.data();
    auto bd = b.data();
    maybe_record(ew_name(op), {a, b}, result, [op, ad, bd, plan, same](const std::vector<int>& parents) -> BackwardFn {
        const int pa = parents[0], pb = parents[1];
        return [op, ad, bd, plan, same, pa, pb](const std::vector<double>& gout, BackwardBuffers& bufs) {
            std::vector<double>* ga = pa >= 0 ? &bufs.at(pa) : nullptr;
            std::vector<double>* gb = pb >= 0 ? &bufs.at(pb) : nullptr;
            const auto& av = ad->values;
            const auto& bv = bd->values;
            if (same) {
                // equal shapes: disjoint element updates, safe to parallelize
                // (both updates for index i run on the same thread even when
                // the two inputs alias)
#pragma omp parallel for schedule(static) if (gout.size() > kParallelThreshold)
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(gout.size()); ++i) {
                    const auto k = static_cast<std::size_t>(i);
                    const double g = gout[k];
                    switch (op) {
                        case EwOp::add:
                            if (ga) (*ga)[k] += g;
                            if (gb) (*gb)[k] += g;
                            break;
                        case EwOp::sub:
                            if (ga) (*ga)[k] += g;
                            if (gb) (*gb)[k] -= g;
                            break;
                        default:
                            if (ga) (*ga)[k] += bv[k] * g;
                            if (gb) (*gb)[k] += av[k] * g;
                            break;
                    }
                }
                return;
            }
            detail::for_each_broadcast(plan, [&](std::size_t k, std::size_t ia, std::size_t ib) {
                const double g = gout[k];
                switch (op) {
                    case EwOp::add:
                        if (ga) (*ga)[ia] += g;
                        if (gb) (*gb)[ib] += g;
                        break;
                    case EwOp::sub:
                        if (ga) (*ga)[ia] += g;
                        if (gb) (*gb)[ib] -= g;
                        break;
                    default:  // mul
                        if (ga) (*ga)[ia] += bv[ib] * g;
                        if (gb) (*gb)[ib] += av[ia] * g;
                        break;
                }
            });
        };
    });
    return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::mul, a, b); }
Tensor neg(const Tensor& a) { return elementwise(EwOp::neg, a); }
Tensor exp(const Tensor& a) { return elementwise(EwOp::exp, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(EwOp::sigmoid, a); }
Tensor silu(const Tensor& a) { return elementwise(EwOp::silu, a); }
Tensor softplus(const Tensor& a) { return elementwise(EwOp::softplus, a); }
Tensor relu(const Tensor& a) { return elementwise(EwOp::relu, a); }
Tensor abs(const Tensor& a) { return elementwise(EwOp::abs, a); }

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        throw std::invalid_argument("matmul requires rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
    }
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t ka = sa[sa.size() - 1];
    const std::size_t kb = sb[sb.size() - 2];
    const std::size_t n = sb[sb.size() - 1];
    if (ka != kb) {
        throw std::invalid_argument("matmul inner dimensions differ: " + shape_str(sa) + " vs " + shape_str(sb));
    }
    const Shape batch_a(sa.begin(), sa.end() - 2);
    const Shape batch_b(sb.begin(), sb.end() - 2);
    const auto plan = detail::broadcast_plan(batch_a, batch_b);
    const std::size_t batches = numel(plan.out);

    Shape out_shape = plan.out;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(numel(out_shape));

    const std::size_t a_mat = m * ka;
    const std::size_t b_mat = kb * n;
    const std::size_t o_mat = m * n;

    // offsets of each broadcast batch into a and b
    std::vector<std::size_t> offs_a(batches), offs_b(batches);
    detail::for_each_broadcast(plan, [&](std::size_t k, std::size_t ia, std::size_t ib) {
        offs_a[k] = ia * a_mat;
        offs_b[k] = ib * b_mat;
    });

    const auto& av = a.values();
    const auto& bv = b.values();
    if (batch_b.empty() && batches >= 1) {
        // weights on the right: one flat GEMM over all leading axes of a
        detail::gemm_nn(batches * m, n, ka, av.data(), bv.data(), out.data(), false);
    } else {
        for (std::size_t i = 0; i < batches; ++i) {
            detail::gemm_nn(m, n, ka, av.data() + offs_a[i], bv.data() + offs_b[i], out.data() + i * o_mat, false);
        }
    }

    Tensor result(out_shape, std::move(out));
    auto ad = a.data();
    auto bd = b.data();
    maybe_record("matmul", {a, b}, result, [=](const std::vector<int>& parents) -> BackwardFn {
        const int pa = parents[0], pb = parents[1];
        return [=](const std::vector<double>& gout, BackwardBuffers& bufs) {
            const auto& av = ad->values;
            const auto& bv = bd->values;
            if (pa >= 0) {
                auto& ga = bufs.at(pa);
                if (batch_b.empty()) {
                    detail::gemm_nt(batches * m, ka, n, gout.data(), bv.data(), ga.data(), true);
                } else {
                    // dA broadcast batches accumulate serially, in batch order
                    for (std::size_t i = 0; i < batches; ++i) {
                        detail::gemm_nt(m, ka, n, gout.data() + i * o_mat, bv.data() + offs_b[i],
                                        ga.data() + offs_a[i], true);
                    }
                }
            }
            if (pb >= 0) {
                auto& gb = bufs.at(pb);
                if (batch_b.empty()) {
                    detail::gemm_tn(ka, n, batches * m, av.data(), gout.data(), gb.data(), true);
                } else {
                    for (std::size_t i = 0; i < batches; ++i) {
                        detail::gemm_tn(ka, n, m, av.data() + offs_a[i], gout.data() + i * o_mat,
                                        gb.data() + offs_b[i], true);
                    }
                }
            }
        };
    });
    return result;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor reduce(Reduce op, const Tensor& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size()) {
        throw std::invalid_argument("reduce: axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    }
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != axis) out_shape.push_back(s[i]);
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];

    const auto& xv = x.values();
    std::vector<double> out(outer * inner);
    auto argmax = std::make_shared<std::vector<std::size_t>>();
    if (op == Reduce::max) argmax->resize(outer * inner);

    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            if (op == Reduce::max) {
                double best = xv[base];
                std::size_t best_i = 0;
                for (std::size_t j = 1; j < len; ++j) {
                    const double v = xv[base + j * inner];
                    if (v > best) {  // strict: ties keep the first occurrence
                        best = v;
                        best_i = j;
                    }
                }
                out[o * inner + in] = best;
                (*argmax)[o * inner + in] = best_i;
            } else {
                double acc = 0.0;
                for (std::size_t j = 0; j < len; ++j) acc += xv[base + j * inner];
                out[o * inner + in] = op == Reduce::mean ? acc / static_cast<double>(len) : acc;
            }
        }
    }

    Tensor result(out_shape, std::move(out));
    const char* kind = op == Reduce::mean ? "mean" : (op == Reduce::sum ? "sum" : "max");
    maybe_record(kind, {x}, result, [=](const std::vector<int>& parents) -> BackwardFn {
        const int pa = parents[0];
        return [=](const std::vector<double>& gout, BackwardBuffers& bufs) {
            if (pa < 0) return;
            auto& ga = bufs.at(pa);
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    const double g = gout[o * inner + in];
                    switch (op) {
                        case Reduce::mean: {
                            const double gs = g / static_cast<double>(len);
                            for (std::size_t j = 0; j < len; ++j) ga[base + j * inner] += gs;
                            break;
                        }
                        case Reduce::sum:
                            for (std::size_t j = 0; j < len; ++j) ga[base + j * inner] += g;
                            break;
                        case Reduce::max:
                            ga[base + (*argmax)[o * inner + in] * inner] += g;
                            break;
                    }
                }
            }
        };
    });
    return result;
}

namespace {

Tensor full_reduce(const Tensor& x, bool mean) {
    const auto& xv = x.values();
    double acc = 0.0;
    for (double v : xv) acc += v;
    const double denom = mean ? static_cast<double>(xv.size()) : 1.0;
    Tensor result = Tensor::scalar(acc / denom);
    const std::size_t n = xv.size();
    maybe_record(mean ? "mean_all" : "sum_all", {x}, result, [=](const std::vector<int>& parents) -> BackwardFn {
        const int pa = parents[0];
        return [=](const std::vector<double>& gout, BackwardBuffers& bufs) {
            if (pa < 0) return;
            auto& ga = bufs.at(pa);
            const double g = gout[0] / denom;
            for (std::size_t i = 0; i < n; ++i) ga[i] += g;
        };
    });
    return result;
}

}  // namespace

Tensor mean_all(const Tensor& x) { return full_reduce(x, true); }
Tensor sum_all(const Tensor& x) { return full_reduce(x, false); }

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor transpose(const Tensor& x, std::size_t ax0, std::size_t ax1) {
    const Shape& s = x.shape();
    if (ax0 >= s.size() || ax1 >= s.size()) {
        throw std::invalid_argument("transpose: axes (" + std::to_string(ax0) + ", " + std::to_string(ax1) +
                                    ") out of range for shape " + shape_str(s));
    }
    Shape out_shape = s;
    std::swap(out_shape[ax0], out_shape[ax1]);

    // strides of the source
    std::vector<std::size_t> stride(s.size(), 1);
    for (std::size_t i = s.size() - 1; i-- > 0;) stride[i] = stride[i + 1] * s[i + 1];
    std::vector<std::size_t> perm_stride(stride);
    std::swap(perm_stride[ax0], perm_stride[ax1]);

    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    const std::size_t rank = s.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t k = 0; k < out.size(); ++k) {
        out[k] = xv[src];
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += perm_stride[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            src -= perm_stride[d] * out_shape[d];
        }
    }

    Tensor result(out_shape, std::move(out));
    maybe_record("transpose", {x}, result, [=](const std::vector<int>& parents) -> BackwardFn {
        const int pa = parents[0];
        return [=](const std::vector<double>& gout, BackwardBuffers& bufs) {
            if (pa < 0) return;
            auto& ga = bufs.at(pa);
            std::vector<std::size_t> idx(rank, 0);
            std::size_t src = 0;
            for (std::size_t k = 0; k < gout.size(); ++k) {
                ga[src] += gout[k];
                for (std::size_t d = rank; d-- > 0;) {
                    ++idx[d];
                    src += perm_stride[d];
                    if (idx[d] < out_shape[d]) break;
                    idx[d] = 0;
                    src -= perm_stride[d] * out_shape[d];
                }
            }
        };
    });
    return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor result(shape, x.values());
    maybe_record("reshape", {x}, result, [](const std::vector<int>& parents) -> BackwardFn {
        const int pa = parents[0];
        return [pa](const std::vector<double>& gout, BackwardBuffers& bufs) {
            if (pa < 0) return;
            add_scaled(bufs.at(pa), gout);
        };
    });
    return result;
}

Tensor custom_unary(const Tensor& x, const char* kind,
                    std::function<double(double)> fwd,
                    std::function<double(double)> dfdx) {
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    Tensor result(x.shape(), std::move(out));
    auto xd = x.data();
    maybe_record(kind, {x}, result, [xd, dfdx](const std::vector<int>& parents) -> BackwardFn {
        const int pa = parents[0];
        return [xd, dfdx, pa](const std::vector<double>& gout, BackwardBuffers& bufs) {
            if (pa < 0) return;
            auto& ga = bufs.at(pa);
            for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += dfdx(xd->values[i]) * gout[i];
        };
    });
    return result;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) throw std::logic_error("backward: no active tape");
    auto td = loss.data();
    if (!td || td->node < 0 || td->epoch != tape->epoch()) {
        throw std::invalid_argument("backward: tensor is detached from the active tape");
    }
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    const int root = td->node;

    // reachability over parents
    std::vector<char> reachable(tape->size(), 0);
    std::vector<int> stack{root};
    reachable[static_cast<std::size_t>(root)] = 1;
    while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        for (int p : tape->node(id).parents) {
            if (p >= 0 && !reachable[static_cast<std::size_t>(p)]) {
                reachable[static_cast<std::size_t>(p)] = 1;
                stack.push_back(p);
            }
        }
    }

    BackwardBuffers bufs(*tape);
    bufs.at(root)[0] = 1.0;
    for (int i = root; i >= 0; --i) {
        if (!reachable[static_cast<std::size_t>(i)] || !bufs.allocated(i)) continue;
        const TapeNode& node = tape->node(i);
        const auto& g = bufs.at(i);
        if (node.backward) node.backward(g, bufs);
        if (node.out->requires_grad) {
            if (node.out->grad.empty()) node.out->grad.assign(node.out->values.size(), 0.0);
            add_scaled(node.out->grad, g);
        }
        bufs.release(i);
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    for (const auto& it : items) {
        os << (it.pass ? "pass " : "FAIL ") << it.name << " max_rel_err=" << it.max_rel_err
           << " at [" << it.worst_index << "] analytic=" << it.analytic << " numeric=" << it.numeric << "\n";
    }
    return os.str();
}

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double step, double tol) {
    GradCheckReport report;
    report.tol = tol;

    std::vector<std::vector<double>> analytic;
    {
        for (const auto& [name, p] : params) const_cast<Tensor&>(p).zero_grad();
        Tape tape;
        Tensor loss = f();
        if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: non-finite forward value");
        backward(loss);
        for (const auto& [name, p] : params) {
            analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));
        }
    }

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& name = params[pi].first;
        Tensor p = params[pi].second;
        GradCheckItem item;
        item.name = name;
        auto& vals = p.values();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double orig = vals[j];
            vals[j] = orig + step;
            const double f_plus = f().item();
            vals[j] = orig - step;
            const double f_minus = f().item();
            vals[j] = orig;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                throw std::runtime_error("grad_check: non-finite forward value while perturbing " + name);
            }
            const double numeric = (f_plus - f_minus) / (2.0 * step);
            const double a = analytic[pi][j];
            const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > item.max_rel_err) {
                item.max_rel_err = rel;
                item.worst_index = j;
                item.analytic = a;
                item.numeric = numeric;
            }
        }
        item.pass = item.max_rel_err <= tol;
        if (!item.pass) report.pass = false;
        report.items.push_back(std::move(item));
    }
    for (const auto& [name, p] : params) const_cast<Tensor&>(p).zero_grad();
    return report;
}

}  // namespace cmamba
