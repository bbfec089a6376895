#include "tspm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace tspm {

namespace detail {

struct Node;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until needed
    bool requires_grad = false;
    std::unique_ptr<Node> node;
};

struct Node {
    std::vector<std::shared_ptr<TensorImpl>> parents;
    // Reads out.grad, accumulates into parent grads.
    std::function<void(TensorImpl& out)> backprop;
};

} // namespace detail

using detail::Node;
using detail::TensorImpl;

namespace {

thread_local bool g_grad_enabled = true;

bool impl_needs_grad(const TensorImpl& t) { return t.requires_grad || t.node != nullptr; }

std::vector<double>& ensure_grad(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    return t.grad;
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size());
    std::int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        strides[static_cast<std::size_t>(i)] = acc;
        acc *= shape[static_cast<std::size_t>(i)];
    }
    return strides;
}

int normalize_axis(int axis, int rank, const char* op) {
    int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank)
        throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                    " out of range for rank " + std::to_string(rank));
    return a;
}

} // namespace

std::int64_t shape_size(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t e : shape) n *= e;
    return shape.empty() ? 1 : n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor::Tensor() = default;

Tensor Tensor::create(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::int64_t e : shape)
        if (e < 1)
            throw std::invalid_argument("tensor create: zero extent in shape " + shape_str(shape));
    const std::int64_t n = shape_size(shape);
    if (n != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument("tensor create: length mismatch " + std::to_string(n) +
                                    " vs " + std::to_string(data.size()));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> data(static_cast<std::size_t>(shape_size(shape)), 0.0);
    return create(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> data(static_cast<std::size_t>(shape_size(shape)), value);
    return create(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value) { return create({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(int axis) const {
    return impl_->shape[static_cast<std::size_t>(normalize_axis(axis, rank(), "dim"))];
}

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(impl_->data.size()); }

int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

const std::vector<double>& Tensor::data() const { return impl_->data; }

std::vector<double>& Tensor::raw_data() { return impl_->data; }

double Tensor::value() const {
    if (size() != 1)
        throw std::invalid_argument("tensor value: expected single element, got " +
                                    shape_str(impl_->shape));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
    if (static_cast<int>(index.size()) != rank())
        throw std::invalid_argument("tensor at: index rank mismatch");
    const auto strides = row_major_strides(impl_->shape);
    std::int64_t off = 0;
    std::size_t i = 0;
    for (std::int64_t ix : index) {
        if (ix < 0 || ix >= impl_->shape[i])
            throw std::out_of_range("tensor at: index out of range");
        off += ix * strides[i];
        ++i;
    }
    return impl_->data[static_cast<std::size_t>(off)];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
bool Tensor::has_graph() const { return impl_->node != nullptr; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty())
        throw std::runtime_error("tensor grad: no gradient buffer present");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::backward() const {
    if (size() != 1)
        throw std::invalid_argument("backward: loss must have one element, got " +
                                    shape_str(impl_->shape));
    if (!impl_->node) throw std::invalid_argument("backward: tensor has no graph");

    // Iterative post-order DFS: topological order with each node visited once.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [cur, next_parent] = stack.back();
        if (!cur->node || next_parent >= cur->node->parents.size()) {
            order.push_back(cur);
            stack.pop_back();
            continue;
        }
        TensorImpl* parent = cur->node->parents[next_parent].get();
        ++next_parent;
        if (parent->node && !seen.count(parent)) {
            seen.insert(parent);
            stack.emplace_back(parent, 0);
        }
    }

    // Interior gradients are fresh per sweep; leaf gradients persist and
    // accumulate across sweeps.
    for (TensorImpl* t : order) {
        ensure_grad(*t);
        std::fill(t->grad.begin(), t->grad.end(), 0.0);
    }
    impl_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        (*it)->node->backprop(**it);
    }
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// op construction helper
// ---------------------------------------------------------------------------

namespace {

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorImpl&)> backprop) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool record = g_grad_enabled;
    if (record) {
        bool any = false;
        for (const auto& p : parents) any = any || impl_needs_grad(*p.impl());
        record = any;
    }
    if (record) {
        auto node = std::make_unique<Node>();
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.impl());
        node->backprop = std::move(backprop);
        impl->node = std::move(node);
    }
    return Tensor(std::move(impl));
}

// Accumulate src-shaped gradient from an out-shaped buffer produced by
// broadcasting src up to out (numpy trailing-axis alignment).
void reduce_into(const std::vector<double>& grad_out, const Shape& out_shape,
                 std::vector<double>& grad_src, const Shape& src_shape) {
    if (out_shape == src_shape) {
        for (std::size_t i = 0; i < grad_out.size(); ++i) grad_src[i] += grad_out[i];
        return;
    }
    const int out_rank = static_cast<int>(out_shape.size());
    const int src_rank = static_cast<int>(src_shape.size());
    const auto src_strides = row_major_strides(src_shape);
    std::vector<std::int64_t> map_strides(static_cast<std::size_t>(out_rank), 0);
    for (int i = 0; i < src_rank; ++i) {
        const int oi = out_rank - src_rank + i;
        if (src_shape[static_cast<std::size_t>(i)] != 1)
            map_strides[static_cast<std::size_t>(oi)] = src_strides[static_cast<std::size_t>(i)];
    }
    std::vector<std::int64_t> coord(static_cast<std::size_t>(out_rank), 0);
    std::int64_t src_off = 0;
    for (std::size_t flat = 0; flat < grad_out.size(); ++flat) {
        grad_src[static_cast<std::size_t>(src_off)] += grad_out[flat];
        for (int ax = out_rank - 1; ax >= 0; --ax) {
            auto a = static_cast<std::size_t>(ax);
            src_off += map_strides[a];
            if (++coord[a] < out_shape[a]) break;
            src_off -= map_strides[a] * out_shape[a];
            coord[a] = 0;
        }
    }
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const int ra = static_cast<int>(a.size());
    const int rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    Shape out(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const std::int64_t ea = i < r - ra ? 1 : a[static_cast<std::size_t>(i - (r - ra))];
        const std::int64_t eb = i < r - rb ? 1 : b[static_cast<std::size_t>(i - (r - rb))];
        if (ea != eb && ea != 1 && eb != 1)
            throw std::invalid_argument(std::string(op) + ": broadcast incompatibility " +
                                        shape_str(a) + " vs " + shape_str(b));
        out[static_cast<std::size_t>(i)] = std::max(ea, eb);
    }
    return out;
}

// Strides of src viewed through out's shape, zero on broadcast axes.
std::vector<std::int64_t> broadcast_strides(const Shape& src, const Shape& out) {
    const int r = static_cast<int>(out.size());
    const int rs = static_cast<int>(src.size());
    const auto s = row_major_strides(src);
    std::vector<std::int64_t> st(static_cast<std::size_t>(r), 0);
    for (int i = 0; i < rs; ++i) {
        const int oi = r - rs + i;
        if (src[static_cast<std::size_t>(i)] != 1)
            st[static_cast<std::size_t>(oi)] = s[static_cast<std::size_t>(i)];
    }
    return st;
}

template <typename F>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, const char* op, F&& f,
                        std::function<void(TensorImpl&, const TensorImpl&, const TensorImpl&)> bp) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa == sb) {
        const auto& da = a.data();
        const auto& db = b.data();
        std::vector<double> out(da.size());
        for (std::size_t i = 0; i < da.size(); ++i) out[i] = f(da[i], db[i]);
        auto pa = a.impl();
        auto pb = b.impl();
        return make_op(sa, std::move(out), {a, b},
                       [bp, pa, pb](TensorImpl& o) { bp(o, *pa, *pb); });
    }
    Shape so = broadcast_shape(sa, sb, op);
    const auto st_a = broadcast_strides(sa, so);
    const auto st_b = broadcast_strides(sb, so);
    const std::int64_t n = shape_size(so);
    std::vector<double> out(static_cast<std::size_t>(n));
    const auto& da = a.data();
    const auto& db = b.data();
    const int r = static_cast<int>(so.size());
    std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        out[static_cast<std::size_t>(flat)] =
            f(da[static_cast<std::size_t>(oa)], db[static_cast<std::size_t>(ob)]);
        for (int ax = r - 1; ax >= 0; --ax) {
            auto x = static_cast<std::size_t>(ax);
            oa += st_a[x];
            ob += st_b[x];
            if (++coord[x] < so[x]) break;
            oa -= st_a[x] * so[x];
            ob -= st_b[x] * so[x];
            coord[x] = 0;
        }
    }
    auto pa = a.impl();
    auto pb = b.impl();
    return make_op(std::move(so), std::move(out), {a, b},
                   [bp, pa, pb](TensorImpl& o) { bp(o, *pa, *pb); });
}

// Walk out-shaped space yielding (flat, off_a, off_b); used by broadcast
// backward rules that need the co-located operand values.
template <typename Visit>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, Visit&& visit) {
    const auto st_a = broadcast_strides(sa, out);
    const auto st_b = broadcast_strides(sb, out);
    const std::int64_t n = shape_size(out);
    const int r = static_cast<int>(out.size());
    std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        visit(static_cast<std::size_t>(flat), static_cast<std::size_t>(oa),
              static_cast<std::size_t>(ob));
        for (int ax = r - 1; ax >= 0; --ax) {
            auto x = static_cast<std::size_t>(ax);
            oa += st_a[x];
            ob += st_b[x];
            if (++coord[x] < out[x]) break;
            oa -= st_a[x] * out[x];
            ob -= st_b[x] * out[x];
            coord[x] = 0;
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_broadcast(
        a, b, "add", [](double x, double y) { return x + y; },
        [](TensorImpl& o, const TensorImpl& pa, const TensorImpl& pb) {
            auto& ia = const_cast<TensorImpl&>(pa);
            auto& ib = const_cast<TensorImpl&>(pb);
            if (impl_needs_grad(ia)) reduce_into(o.grad, o.shape, ensure_grad(ia), ia.shape);
            if (impl_needs_grad(ib)) reduce_into(o.grad, o.shape, ensure_grad(ib), ib.shape);
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_broadcast(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](TensorImpl& o, const TensorImpl& pa, const TensorImpl& pb) {
            auto& ia = const_cast<TensorImpl&>(pa);
            auto& ib = const_cast<TensorImpl&>(pb);
            if (impl_needs_grad(ia)) reduce_into(o.grad, o.shape, ensure_grad(ia), ia.shape);
            if (impl_needs_grad(ib)) {
                std::vector<double> neg(o.grad.size());
                for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -o.grad[i];
                reduce_into(neg, o.shape, ensure_grad(ib), ib.shape);
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_broadcast(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](TensorImpl& o, const TensorImpl& pa, const TensorImpl& pb) {
            auto& ia = const_cast<TensorImpl&>(pa);
            auto& ib = const_cast<TensorImpl&>(pb);
            const bool ga = impl_needs_grad(ia);
            const bool gb = impl_needs_grad(ib);
            if (!ga && !gb) return;
            if (ga) ensure_grad(ia);
            if (gb) ensure_grad(ib);
            if (ia.shape == ib.shape) {
                for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    if (ga) ia.grad[i] += o.grad[i] * ib.data[i];
                    if (gb) ib.grad[i] += o.grad[i] * ia.data[i];
                }
                return;
            }
            for_each_broadcast(o.shape, ia.shape, ib.shape,
                               [&](std::size_t f, std::size_t oa, std::size_t ob) {
                                   if (ga) ia.grad[oa] += o.grad[f] * ib.data[ob];
                                   if (gb) ib.grad[ob] += o.grad[f] * ia.data[oa];
                               });
        });
}

namespace {

template <typename FwdF, typename DerivF>
Tensor unary_op(const Tensor& a, FwdF&& f, DerivF&& df) {
    const auto& da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < da.size(); ++i) out[i] = f(da[i]);
    auto pa = a.impl();
    return make_op(a.shape(), std::move(out), {a}, [pa, df](TensorImpl& o) {
        if (!impl_needs_grad(*pa)) return;
        auto& g = ensure_grad(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * df(pa->data[i], o.data[i]);
    });
}

} // namespace

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(
        a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary_op(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.data())
        if (!(v > 0.0))
            throw std::invalid_argument("log: non-positive input " + std::to_string(v));
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

// C[n,m] += A[n,k] * B[k,m], raw buffers.
void gemm_acc(const double* a, const double* b, double* c, std::int64_t n, std::int64_t k,
              std::int64_t m, bool transpose_a, bool transpose_b) {
    for (std::int64_t i = 0; i < n; ++i) {
        double* crow = c + i * m;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = transpose_a ? a[p * n + i] : a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = transpose_b ? nullptr : b + p * m;
            if (transpose_b) {
                for (std::int64_t j = 0; j < m; ++j) crow[j] += av * b[j * k + p];
            } else {
                for (std::int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const int ra = a.rank();
    const int rb = b.rank();
    if (ra < 2 || rb < 2) throw std::invalid_argument("matmul: operands must have rank >= 2");

    const std::int64_t k = a.shape()[static_cast<std::size_t>(ra - 1)];
    const std::int64_t n = a.shape()[static_cast<std::size_t>(ra - 2)];

    if (rb == 2) {
        if (b.shape()[0] != k)
            throw std::invalid_argument("matmul: inner-dimension mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
        const std::int64_t m = b.shape()[1];
        const std::int64_t rows = a.size() / k;
        std::vector<double> out(static_cast<std::size_t>(rows * m), 0.0);
        gemm_acc(a.data().data(), b.data().data(), out.data(), rows, k, m, false, false);
        Shape so(a.shape().begin(), a.shape().end() - 1);
        so.push_back(m);
        auto pa = a.impl();
        auto pb = b.impl();
        return make_op(std::move(so), std::move(out), {a, b}, [pa, pb, rows, k, m](TensorImpl& o) {
            if (impl_needs_grad(*pa)) {
                auto& g = ensure_grad(*pa);
                // dA = dC * B^T
                gemm_acc(o.grad.data(), pb->data.data(), g.data(), rows, m, k, false, true);
            }
            if (impl_needs_grad(*pb)) {
                auto& g = ensure_grad(*pb);
                // dB = A^T * dC
                gemm_acc(pa->data.data(), o.grad.data(), g.data(), k, rows, m, true, false);
            }
        });
    }

    // batched: equal leading axes
    if (ra != rb)
        throw std::invalid_argument("matmul: batched operands must share rank, got " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    for (int i = 0; i < ra - 2; ++i)
        if (a.shape()[static_cast<std::size_t>(i)] != b.shape()[static_cast<std::size_t>(i)])
            throw std::invalid_argument("matmul: batch shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    if (b.shape()[static_cast<std::size_t>(rb - 2)] != k)
        throw std::invalid_argument("matmul: inner-dimension mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const std::int64_t m = b.shape()[static_cast<std::size_t>(rb - 1)];
    std::int64_t batch = 1;
    for (int i = 0; i < ra - 2; ++i) batch *= a.shape()[static_cast<std::size_t>(i)];
    std::vector<double> out(static_cast<std::size_t>(batch * n * m), 0.0);
    for (std::int64_t bi = 0; bi < batch; ++bi)
        gemm_acc(a.data().data() + bi * n * k, b.data().data() + bi * k * m,
                 out.data() + bi * n * m, n, k, m, false, false);
    Shape so(a.shape().begin(), a.shape().end() - 2);
    so.push_back(n);
    so.push_back(m);
    auto pa = a.impl();
    auto pb = b.impl();
    return make_op(std::move(so), std::move(out), {a, b},
                   [pa, pb, batch, n, k, m](TensorImpl& o) {
                       const bool ga = impl_needs_grad(*pa);
                       const bool gb = impl_needs_grad(*pb);
                       if (ga) ensure_grad(*pa);
                       if (gb) ensure_grad(*pb);
                       for (std::int64_t bi = 0; bi < batch; ++bi) {
                           const double* go = o.grad.data() + bi * n * m;
                           if (ga)
                               gemm_acc(go, pb->data.data() + bi * k * m,
                                        pa->grad.data() + bi * n * k, n, m, k, false, true);
                           if (gb)
                               gemm_acc(pa->data.data() + bi * n * k, go,
                                        pb->grad.data() + bi * k * m, k, n, m, true, false);
                       }
                   });
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

namespace {

struct Conv2dDims {
    std::int64_t batch, rows, cols, ci, kr, kc, co, orows, ocols;
    int sr, sc, pr, pc;
    bool batched;
};

Conv2dDims conv2d_dims(const Tensor& input, const Tensor& weight, std::pair<int, int> stride,
                       std::pair<int, int> padding, const char* op) {
    if (input.rank() != 3 && input.rank() != 4)
        throw std::invalid_argument(std::string(op) + ": input must be rank 3 or 4, got " +
                                    shape_str(input.shape()));
    if (weight.rank() != 4)
        throw std::invalid_argument(std::string(op) + ": weight must be rank 4, got " +
                                    shape_str(weight.shape()));
    if (stride.first < 1 || stride.second < 1)
        throw std::invalid_argument(std::string(op) + ": stride must be positive");
    if (padding.first < 0 || padding.second < 0)
        throw std::invalid_argument(std::string(op) + ": padding must be non-negative");
    Conv2dDims d{};
    d.batched = input.rank() == 4;
    d.batch = d.batched ? input.shape()[0] : 1;
    const std::size_t base = d.batched ? 1 : 0;
    d.rows = input.shape()[base];
    d.cols = input.shape()[base + 1];
    d.ci = input.shape()[base + 2];
    d.kr = weight.shape()[0];
    d.kc = weight.shape()[1];
    d.co = weight.shape()[3];
    d.sr = stride.first;
    d.sc = stride.second;
    d.pr = padding.first;
    d.pc = padding.second;
    return d;
}

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, std::pair<int, int> stride,
              std::pair<int, int> padding) {
    Conv2dDims d = conv2d_dims(input, weight, stride, padding, "conv2d");
    if (weight.shape()[2] != d.ci)
        throw std::invalid_argument("conv2d: channel mismatch input " + shape_str(input.shape()) +
                                    " weight " + shape_str(weight.shape()));
    if (d.kr > d.rows + 2 * d.pr || d.kc > d.cols + 2 * d.pc)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    d.orows = (d.rows + 2 * d.pr - d.kr) / d.sr + 1;
    d.ocols = (d.cols + 2 * d.pc - d.kc) / d.sc + 1;

    std::vector<double> out(static_cast<std::size_t>(d.batch * d.orows * d.ocols * d.co), 0.0);
    const double* x = input.data().data();
    const double* w = weight.data().data();
    for (std::int64_t b = 0; b < d.batch; ++b) {
        const double* xb = x + b * d.rows * d.cols * d.ci;
        double* ob = out.data() + b * d.orows * d.ocols * d.co;
        for (std::int64_t orr = 0; orr < d.orows; ++orr) {
            for (std::int64_t occ = 0; occ < d.ocols; ++occ) {
                double* op = ob + (orr * d.ocols + occ) * d.co;
                for (std::int64_t kr = 0; kr < d.kr; ++kr) {
                    const std::int64_t ir = orr * d.sr - d.pr + kr;
                    if (ir < 0 || ir >= d.rows) continue;
                    for (std::int64_t kc = 0; kc < d.kc; ++kc) {
                        const std::int64_t ic = occ * d.sc - d.pc + kc;
                        if (ic < 0 || ic >= d.cols) continue;
                        const double* xp = xb + (ir * d.cols + ic) * d.ci;
                        const double* wp = w + (kr * d.kc + kc) * d.ci * d.co;
                        for (std::int64_t ci = 0; ci < d.ci; ++ci) {
                            const double xv = xp[ci];
                            if (xv == 0.0) continue;
                            const double* wrow = wp + ci * d.co;
                            for (std::int64_t co = 0; co < d.co; ++co) op[co] += xv * wrow[co];
                        }
                    }
                }
            }
        }
    }

    Shape so = d.batched ? Shape{d.batch, d.orows, d.ocols, d.co} : Shape{d.orows, d.ocols, d.co};
    auto pi = input.impl();
    auto pw = weight.impl();
    return make_op(std::move(so), std::move(out), {input, weight}, [pi, pw, d](TensorImpl& o) {
        const bool gi = impl_needs_grad(*pi);
        const bool gw = impl_needs_grad(*pw);
        if (!gi && !gw) return;
        if (gi) ensure_grad(*pi);
        if (gw) ensure_grad(*pw);
        const double* w = pw->data.data();
        for (std::int64_t b = 0; b < d.batch; ++b) {
            const double* xb = pi->data.data() + b * d.rows * d.cols * d.ci;
            double* gxb = gi ? pi->grad.data() + b * d.rows * d.cols * d.ci : nullptr;
            const double* gob = o.grad.data() + b * d.orows * d.ocols * d.co;
            for (std::int64_t orr = 0; orr < d.orows; ++orr) {
                for (std::int64_t occ = 0; occ < d.ocols; ++occ) {
                    const double* gop = gob + (orr * d.ocols + occ) * d.co;
                    for (std::int64_t kr = 0; kr < d.kr; ++kr) {
                        const std::int64_t ir = orr * d.sr - d.pr + kr;
                        if (ir < 0 || ir >= d.rows) continue;
                        for (std::int64_t kc = 0; kc < d.kc; ++kc) {
                            const std::int64_t ic = occ * d.sc - d.pc + kc;
                            if (ic < 0 || ic >= d.cols) continue;
                            const std::int64_t xoff = (ir * d.cols + ic) * d.ci;
                            const std::int64_t woff = (kr * d.kc + kc) * d.ci * d.co;
                            for (std::int64_t ci = 0; ci < d.ci; ++ci) {
                                const double* wrow = w + woff + ci * d.co;
                                double acc = 0.0;
                                if (gw) {
                                    const double xv = xb[xoff + ci];
                                    double* gwrow = pw->grad.data() + woff + ci * d.co;
                                    for (std::int64_t co = 0; co < d.co; ++co) {
                                        const double g = gop[co];
                                        acc += g * wrow[co];
                                        gwrow[co] += g * xv;
                                    }
                                } else {
                                    for (std::int64_t co = 0; co < d.co; ++co)
                                        acc += gop[co] * wrow[co];
                                }
                                if (gi) gxb[xoff + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    });
}

Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, std::pair<int, int> stride,
                        std::pair<int, int> padding) {
    Conv2dDims d = conv2d_dims(input, weight, stride, padding, "conv_transpose2d");
    // input channels correspond to the weight's ch_out axis
    if (d.co != d.ci)
        ; // d.ci is the input's channel count; weight [kr,kc,cw_in,cw_out] maps cw_out -> cw_in
    const std::int64_t cw_in = weight.shape()[2];
    const std::int64_t cw_out = weight.shape()[3];
    if (cw_out != d.ci)
        throw std::invalid_argument("conv_transpose2d: channel mismatch input " +
                                    shape_str(input.shape()) + " weight " +
                                    shape_str(weight.shape()));
    const std::int64_t orows = static_cast<std::int64_t>(d.sr) * (d.rows - 1) + d.kr - 2 * d.pr;
    const std::int64_t ocols = static_cast<std::int64_t>(d.sc) * (d.cols - 1) + d.kc - 2 * d.pc;
    if (orows < 1 || ocols < 1)
        throw std::invalid_argument("conv_transpose2d: kernel larger than padded input");

    std::vector<double> out(static_cast<std::size_t>(d.batch * orows * ocols * cw_in), 0.0);
    const double* x = input.data().data();
    const double* w = weight.data().data();
    for (std::int64_t b = 0; b < d.batch; ++b) {
        const double* xb = x + b * d.rows * d.cols * d.ci;
        double* ob = out.data() + b * orows * ocols * cw_in;
        for (std::int64_t ir = 0; ir < d.rows; ++ir) {
            for (std::int64_t ic = 0; ic < d.cols; ++ic) {
                const double* xp = xb + (ir * d.cols + ic) * d.ci;
                for (std::int64_t kr = 0; kr < d.kr; ++kr) {
                    const std::int64_t orr = ir * d.sr - d.pr + kr;
                    if (orr < 0 || orr >= orows) continue;
                    for (std::int64_t kc = 0; kc < d.kc; ++kc) {
                        const std::int64_t occ = ic * d.sc - d.pc + kc;
                        if (occ < 0 || occ >= ocols) continue;
                        double* op = ob + (orr * ocols + occ) * cw_in;
                        const double* wp = w + (kr * d.kc + kc) * cw_in * cw_out;
                        for (std::int64_t cin = 0; cin < cw_in; ++cin) {
                            const double* wrow = wp + cin * cw_out;
                            double acc = 0.0;
                            for (std::int64_t cout = 0; cout < cw_out; ++cout)
                                acc += xp[cout] * wrow[cout];
                            op[cin] += acc;
                        }
                    }
                }
            }
        }
    }

    Shape so = d.batched ? Shape{d.batch, orows, ocols, cw_in} : Shape{orows, ocols, cw_in};
    auto pi = input.impl();
    auto pw = weight.impl();
    return make_op(
        std::move(so), std::move(out), {input, weight}, [pi, pw, d, orows, ocols, cw_in, cw_out](TensorImpl& o) {
            const bool gi = impl_needs_grad(*pi);
            const bool gw = impl_needs_grad(*pw);
            if (!gi && !gw) return;
            if (gi) ensure_grad(*pi);
            if (gw) ensure_grad(*pw);
            const double* w = pw->data.data();
            for (std::int64_t b = 0; b < d.batch; ++b) {
                const double* xb = pi->data.data() + b * d.rows * d.cols * d.ci;
                double* gxb = gi ? pi->grad.data() + b * d.rows * d.cols * d.ci : nullptr;
                const double* gob = o.grad.data() + b * orows * ocols * cw_in;
                for (std::int64_t ir = 0; ir < d.rows; ++ir) {
                    for (std::int64_t ic = 0; ic < d.cols; ++ic) {
                        const std::int64_t xoff = (ir * d.cols + ic) * d.ci;
                        for (std::int64_t kr = 0; kr < d.kr; ++kr) {
                            const std::int64_t orr = ir * d.sr - d.pr + kr;
                            if (orr < 0 || orr >= orows) continue;
                            for (std::int64_t kc = 0; kc < d.kc; ++kc) {
                                const std::int64_t occ = ic * d.sc - d.pc + kc;
                                if (occ < 0 || occ >= ocols) continue;
                                const double* gop = gob + (orr * ocols + occ) * cw_in;
                                const std::int64_t woff = (kr * d.kc + kc) * cw_in * cw_out;
                                for (std::int64_t cin = 0; cin < cw_in; ++cin) {
                                    const double g = gop[cin];
                                    if (g == 0.0) continue;
                                    const double* wrow = w + woff + cin * cw_out;
                                    if (gw) {
                                        double* gwrow = pw->grad.data() + woff + cin * cw_out;
                                        for (std::int64_t cout = 0; cout < cw_out; ++cout) {
                                            if (gi) gxb[xoff + cout] += g * wrow[cout];
                                            gwrow[cout] += g * xb[xoff + cout];
                                        }
                                    } else {
                                        for (std::int64_t cout = 0; cout < cw_out; ++cout)
                                            gxb[xoff + cout] += g * wrow[cout];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor conv1d(const Tensor& input, const Tensor& weight, int stride, int padding) {
    if (input.rank() != 2 && input.rank() != 3)
        throw std::invalid_argument("conv1d: input must be rank 2 or 3, got " +
                                    shape_str(input.shape()));
    if (weight.rank() != 3)
        throw std::invalid_argument("conv1d: weight must be rank 3, got " +
                                    shape_str(weight.shape()));
    const bool batched = input.rank() == 3;
    // reuse conv2d by inserting a singleton row axis
    Shape s = input.shape();
    Shape s2 = batched ? Shape{s[0], std::int64_t{1}, s[1], s[2]} : Shape{std::int64_t{1}, s[0], s[1]};
    Shape w2{std::int64_t{1}, weight.shape()[0], weight.shape()[1], weight.shape()[2]};
    Tensor out = conv2d(reshape(input, s2), reshape(weight, w2), {1, stride}, {0, padding});
    Shape so = out.shape();
    Shape flat = batched ? Shape{so[0], so[2], so[3]} : Shape{so[1], so[2]};
    return reshape(out, flat);
}

// ---------------------------------------------------------------------------
// softmax / layer_norm
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    const int ax = normalize_axis(axis, a.rank(), "softmax");
    for (double v : a.data())
        if (!std::isfinite(v))
            throw std::invalid_argument("softmax: non-finite input");
    const auto& s = a.shape();
    const std::int64_t n = s[static_cast<std::size_t>(ax)];
    std::int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < a.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
    for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];

    std::vector<double> out(a.data().size());
    const double* x = a.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            double mx = x[base];
            for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
            double sum = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const double e = std::exp(x[base + i * inner] - mx);
                out[static_cast<std::size_t>(base + i * inner)] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::int64_t i = 0; i < n; ++i)
                out[static_cast<std::size_t>(base + i * inner)] *= inv;
        }
    }
    auto pa = a.impl();
    return make_op(a.shape(), std::move(out), {a}, [pa, n, inner, outer](TensorImpl& o) {
        if (!impl_needs_grad(*pa)) return;
        auto& g = ensure_grad(*pa);
        const double* y = o.data.data();
        const double* gy = o.grad.data();
        for (std::int64_t ot = 0; ot < outer; ++ot) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = ot * n * inner + in;
                double dot = 0.0;
                for (std::int64_t i = 0; i < n; ++i) {
                    const std::int64_t ix = base + i * inner;
                    dot += gy[ix] * y[ix];
                }
                for (std::int64_t i = 0; i < n; ++i) {
                    const std::int64_t ix = base + i * inner;
                    g[static_cast<std::size_t>(ix)] += y[ix] * (gy[ix] - dot);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank must be >= 1");
    const std::int64_t dfeat = x.shape().back();
    if (gain.rank() != 1 || gain.shape()[0] != dfeat || bias.rank() != 1 ||
        bias.shape()[0] != dfeat)
        throw std::invalid_argument("layer_norm: gain/bias must match last axis " +
                                    std::to_string(dfeat));
    const std::int64_t rows = x.size() / dfeat;
    std::vector<double> out(x.data().size());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    std::vector<double> xhat(x.data().size());
    const double* xd = x.data().data();
    const double* gd = gain.data().data();
    const double* bd = bias.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xd + r * dfeat;
        double mean = 0.0;
        for (std::int64_t j = 0; j < dfeat; ++j) mean += row[j];
        mean /= static_cast<double>(dfeat);
        double var = 0.0;
        for (std::int64_t j = 0; j < dfeat; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(dfeat);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < dfeat; ++j) {
            const double h = (row[j] - mean) * is;
            xhat[static_cast<std::size_t>(r * dfeat + j)] = h;
            out[static_cast<std::size_t>(r * dfeat + j)] = gd[j] * h + bd[j];
        }
    }
    auto px = x.impl();
    auto pg = gain.impl();
    auto pb = bias.impl();
    return make_op(x.shape(), std::move(out), {x, gain, bias},
                   [px, pg, pb, rows, dfeat, inv_std = std::move(inv_std),
                    xhat = std::move(xhat)](TensorImpl& o) {
                       const bool gx = impl_needs_grad(*px);
                       const bool gg = impl_needs_grad(*pg);
                       const bool gb = impl_needs_grad(*pb);
                       if (gx) ensure_grad(*px);
                       if (gg) ensure_grad(*pg);
                       if (gb) ensure_grad(*pb);
                       const double* gy = o.grad.data();
                       const double* gd = pg->data.data();
                       for (std::int64_t r = 0; r < rows; ++r) {
                           const double* gyr = gy + r * dfeat;
                           const double* hr = xhat.data() + r * dfeat;
                           if (gg || gb) {
                               for (std::int64_t j = 0; j < dfeat; ++j) {
                                   if (gg) pg->grad[static_cast<std::size_t>(j)] += gyr[j] * hr[j];
                                   if (gb) pb->grad[static_cast<std::size_t>(j)] += gyr[j];
                               }
                           }
                           if (!gx) continue;
                           double mean_dh = 0.0, mean_dh_h = 0.0;
                           for (std::int64_t j = 0; j < dfeat; ++j) {
                               const double dh = gyr[j] * gd[j];
                               mean_dh += dh;
                               mean_dh_h += dh * hr[j];
                           }
                           mean_dh /= static_cast<double>(dfeat);
                           mean_dh_h /= static_cast<double>(dfeat);
                           const double is = inv_std[static_cast<std::size_t>(r)];
                           double* gxr = px->grad.data() + r * dfeat;
                           for (std::int64_t j = 0; j < dfeat; ++j) {
                               const double dh = gyr[j] * gd[j];
                               gxr[j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    for (std::int64_t e : shape)
        if (e < 1) throw std::invalid_argument("reshape: zero extent in " + shape_str(shape));
    if (shape_size(shape) != a.size())
        throw std::invalid_argument("reshape: size mismatch " + shape_str(a.shape()) + " -> " +
                                    shape_str(shape));
    auto pa = a.impl();
    Shape from = a.shape();
    return make_op(std::move(shape), a.data(), {a}, [pa](TensorImpl& o) {
        if (!impl_needs_grad(*pa)) return;
        auto& g = ensure_grad(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
}

namespace {

std::vector<double> permute_buffer(const std::vector<double>& src, const Shape& s,
                                   const std::vector<int>& axes, Shape& out_shape) {
    const int r = static_cast<int>(s.size());
    out_shape.resize(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    const auto in_strides = row_major_strides(s);
    std::vector<std::int64_t> step(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i)
        step[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    std::vector<double> out(src.size());
    std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
    std::int64_t src_off = 0;
    for (std::size_t flat = 0; flat < src.size(); ++flat) {
        out[flat] = src[static_cast<std::size_t>(src_off)];
        for (int ax = r - 1; ax >= 0; --ax) {
            auto x = static_cast<std::size_t>(ax);
            src_off += step[x];
            if (++coord[x] < out_shape[x]) break;
            src_off -= step[x] * out_shape[x];
            coord[x] = 0;
        }
    }
    return out;
}

} // namespace

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const int r = a.rank();
    if (static_cast<int>(axes.size()) != r)
        throw std::invalid_argument("permute: axes size mismatch");
    std::vector<bool> used(static_cast<std::size_t>(r), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= r || used[static_cast<std::size_t>(ax)])
            throw std::invalid_argument("permute: invalid axes");
        used[static_cast<std::size_t>(ax)] = true;
    }
    Shape out_shape;
    std::vector<double> out = permute_buffer(a.data(), a.shape(), axes, out_shape);
    std::vector<int> inverse(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) inverse[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])] = i;
    auto pa = a.impl();
    return make_op(std::move(out_shape), std::move(out), {a}, [pa, inverse](TensorImpl& o) {
        if (!impl_needs_grad(*pa)) return;
        auto& g = ensure_grad(*pa);
        Shape back_shape;
        std::vector<double> gb = permute_buffer(o.grad, o.shape, inverse, back_shape);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gb[i];
    });
}

Tensor transpose(const Tensor& a) {
    const int r = a.rank();
    if (r < 2) throw std::invalid_argument("transpose: rank must be >= 2");
    std::vector<int> axes(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) axes[static_cast<std::size_t>(i)] = i;
    std::swap(axes[static_cast<std::size_t>(r - 2)], axes[static_cast<std::size_t>(r - 1)]);
    return permute(a, axes);
}

Tensor pad_axis(const Tensor& a, int axis, std::int64_t before, std::int64_t after) {
    const int ax = normalize_axis(axis, a.rank(), "pad_axis");
    if (before < 0 || after < 0) throw std::invalid_argument("pad_axis: negative padding");
    if (before == 0 && after == 0) {
        // still record an identity hop so graph structure stays uniform
        Shape s = a.shape();
        auto pa = a.impl();
        return make_op(std::move(s), a.data(), {a}, [pa](TensorImpl& o) {
            if (!impl_needs_grad(*pa)) return;
            auto& g = ensure_grad(*pa);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        });
    }
    Shape so = a.shape();
    const std::int64_t n = so[static_cast<std::size_t>(ax)];
    so[static_cast<std::size_t>(ax)] = n + before + after;
    std::int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < a.rank(); ++i) inner *= a.shape()[static_cast<std::size_t>(i)];
    for (int i = 0; i < ax; ++i) outer *= a.shape()[static_cast<std::size_t>(i)];
    std::vector<double> out(static_cast<std::size_t>(shape_size(so)), 0.0);
    const double* x = a.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        double* dst = out.data() + (o * (n + before + after) + before) * inner;
        const double* src = x + o * n * inner;
        std::copy(src, src + n * inner, dst);
    }
    auto pa = a.impl();
    return make_op(std::move(so), std::move(out), {a},
                   [pa, n, before, after, inner, outer](TensorImpl& o) {
                       if (!impl_needs_grad(*pa)) return;
                       auto& g = ensure_grad(*pa);
                       for (std::int64_t ot = 0; ot < outer; ++ot) {
                           const double* src = o.grad.data() + (ot * (n + before + after) + before) * inner;
                           double* dst = g.data() + ot * n * inner;
                           for (std::int64_t i = 0; i < n * inner; ++i) dst[i] += src[i];
                       }
                   });
}

Tensor slice_axis(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
    const int ax = normalize_axis(axis, a.rank(), "slice_axis");
    const std::int64_t n = a.shape()[static_cast<std::size_t>(ax)];
    if (start < 0 || length < 1 || start + length > n)
        throw std::invalid_argument("slice_axis: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + length) + ") out of range for extent " +
                                    std::to_string(n));
    Shape so = a.shape();
    so[static_cast<std::size_t>(ax)] = length;
    std::int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < a.rank(); ++i) inner *= a.shape()[static_cast<std::size_t>(i)];
    for (int i = 0; i < ax; ++i) outer *= a.shape()[static_cast<std::size_t>(i)];
    std::vector<double> out(static_cast<std::size_t>(outer * length * inner));
    const double* x = a.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = x + (o * n + start) * inner;
        std::copy(src, src + length * inner, out.data() + o * length * inner);
    }
    auto pa = a.impl();
    return make_op(std::move(so), std::move(out), {a},
                   [pa, n, start, length, inner, outer](TensorImpl& o) {
                       if (!impl_needs_grad(*pa)) return;
                       auto& g = ensure_grad(*pa);
                       for (std::int64_t ot = 0; ot < outer; ++ot) {
                           const double* src = o.grad.data() + ot * length * inner;
                           double* dst = g.data() + (ot * n + start) * inner;
                           for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                       }
                   });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no tensors");
    const int ax = normalize_axis(axis, parts[0].rank(), "concat");
    Shape so = parts[0].shape();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank())
            throw std::invalid_argument("concat: rank mismatch");
        for (int i = 0; i < p.rank(); ++i)
            if (i != ax && p.shape()[static_cast<std::size_t>(i)] != so[static_cast<std::size_t>(i)])
                throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) +
                                            " vs " + shape_str(so));
        total += p.shape()[static_cast<std::size_t>(ax)];
    }
    so[static_cast<std::size_t>(ax)] = total;
    std::int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < parts[0].rank(); ++i) inner *= so[static_cast<std::size_t>(i)];
    for (int i = 0; i < ax; ++i) outer *= so[static_cast<std::size_t>(i)];
    std::vector<double> out(static_cast<std::size_t>(outer * total * inner));
    std::vector<std::int64_t> extents;
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t e = p.shape()[static_cast<std::size_t>(ax)];
        extents.push_back(e);
        const double* src = p.data().data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(src + o * e * inner, src + (o + 1) * e * inner,
                      out.data() + (o * total + off) * inner);
        off += e;
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    return make_op(std::move(so), std::move(out), parts,
                   [impls, extents, total, inner, outer](TensorImpl& o) {
                       std::int64_t off = 0;
                       for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                           auto& p = *impls[pi];
                           const std::int64_t e = extents[pi];
                           if (impl_needs_grad(p)) {
                               auto& g = ensure_grad(p);
                               for (std::int64_t ot = 0; ot < outer; ++ot) {
                                   const double* src = o.grad.data() + (ot * total + off) * inner;
                                   double* dst = g.data() + ot * e * inner;
                                   for (std::int64_t i = 0; i < e * inner; ++i) dst[i] += src[i];
                               }
                           }
                           off += e;
                       }
                   });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto pa = a.impl();
    return make_op({1}, {s}, {a}, [pa](TensorImpl& o) {
        if (!impl_needs_grad(*pa)) return;
        auto& g = ensure_grad(*pa);
        const double gy = o.grad[0];
        for (double& v : g) v += gy;
    });
}

Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto pa = a.impl();
    return make_op({1}, {s * inv}, {a}, [pa, inv](TensorImpl& o) {
        if (!impl_needs_grad(*pa)) return;
        auto& g = ensure_grad(*pa);
        const double gy = o.grad[0] * inv;
        for (double& v : g) v += gy;
    });
}

namespace {

Tensor reduce_axis(const Tensor& a, int axis, bool mean, const char* op) {
    const int ax = normalize_axis(axis, a.rank(), op);
    if (a.rank() == 1) return mean ? mean_all(a) : sum_all(a);
    const std::int64_t n = a.shape()[static_cast<std::size_t>(ax)];
    std::int64_t inner = 1, outer = 1;
    for (int i = ax + 1; i < a.rank(); ++i) inner *= a.shape()[static_cast<std::size_t>(i)];
    for (int i = 0; i < ax; ++i) outer *= a.shape()[static_cast<std::size_t>(i)];
    Shape so;
    for (int i = 0; i < a.rank(); ++i)
        if (i != ax) so.push_back(a.shape()[static_cast<std::size_t>(i)]);
    const double scale = mean ? 1.0 / static_cast<double>(n) : 1.0;
    std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
    const double* x = a.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < n; ++i) {
            const double* src = x + (o * n + i) * inner;
            double* dst = out.data() + o * inner;
            for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j];
        }
    if (mean)
        for (double& v : out) v *= scale;
    auto pa = a.impl();
    return make_op(std::move(so), std::move(out), {a}, [pa, n, inner, outer, scale](TensorImpl& o) {
        if (!impl_needs_grad(*pa)) return;
        auto& g = ensure_grad(*pa);
        for (std::int64_t ot = 0; ot < outer; ++ot)
            for (std::int64_t i = 0; i < n; ++i) {
                const double* src = o.grad.data() + ot * inner;
                double* dst = g.data() + (ot * n + i) * inner;
                for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j] * scale;
            }
    });
}

} // namespace

Tensor sum_axis(const Tensor& a, int axis) { return reduce_axis(a, axis, false, "sum_axis"); }
Tensor mean_axis(const Tensor& a, int axis) { return reduce_axis(a, axis, true, "mean_axis"); }

} // namespace tspm
