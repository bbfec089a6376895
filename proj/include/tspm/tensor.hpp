#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace tspm {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

/// Dense row-major tensor of 64-bit floats with reverse-mode automatic
/// differentiation.
///
/// Tensors are cheap shared handles. An operation applied to tensors that
/// require gradients records a graph node holding the parent handles and the
/// local gradient rule; the graph is rebuilt on every forward pass and freed
/// when the outputs go out of scope. Calling backward() on a scalar result
/// traverses the graph once in reverse topological order and accumulates
/// d(result)/d(leaf) into the grad buffer of every reachable leaf that
/// requires gradients. Leaf gradients accumulate additively across backward
/// calls until zero_grad() is called.
///
/// Tensors that participate in a live graph must not be mutated; parameter
/// buffers may be updated in place between passes (the optimizer does this
/// after the previous graph has been dropped).
class Tensor {
public:
    Tensor();

    /// Leaf constructor. Throws if product(shape) != data.size() or any
    /// extent is < 1.
    static Tensor create(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::int64_t dim(int axis) const;
    std::int64_t size() const;
    int rank() const;

    const std::vector<double>& data() const;
    /// Mutable access to the buffer; only meaningful for leaves between
    /// graph builds (optimizer updates, data staging).
    std::vector<double>& raw_data();
    double value() const; // single-element tensors
    double at(std::initializer_list<std::int64_t> index) const;

    bool requires_grad() const;
    bool has_graph() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

    /// Reverse-mode sweep from a single-element tensor.
    void backward() const;

    /// Same values, no graph, no gradient requirement.
    Tensor detach() const;

    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Whether newly created ops record graph nodes (thread-local).
bool grad_enabled();

/// RAII scope that disables graph recording (inference, metric evaluation).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- elementwise & broadcast ----
// add/sub/mul broadcast with numpy alignment on trailing axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor gelu(const Tensor& a); // exact erf form
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a); // domain error on non-positive input

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- linear algebra ----
/// matmul supports three forms:
///   [n,k] x [k,m]            -> [n,m]
///   [...,k] x [k,m]          -> [...,m]   (map applied to the last axis)
///   [B...,n,k] x [B...,k,m]  -> [B...,n,m] (batched, equal leading axes)
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- convolutions ----
/// input [len,ch_in] or [B,len,ch_in]; weight [k,ch_in,ch_out].
Tensor conv1d(const Tensor& input, const Tensor& weight, int stride, int padding);
/// input [rows,cols,ch_in] or [B,rows,cols,ch_in]; weight [kr,kc,ch_in,ch_out].
/// Output extents floor((dim + 2*pad - k)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, std::pair<int, int> stride,
              std::pair<int, int> padding);
/// Adjoint of conv2d with the same weight: conv_transpose2d(y, W) equals the
/// gradient of conv2d(x, W) with respect to x when y plays the output
/// cotangent. Input channels are the weight's ch_out axis. Output extents
/// stride*(dim-1) + k - 2*pad.
Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, std::pair<int, int> stride,
                        std::pair<int, int> padding);

// ---- normalization ----
/// Stable softmax along an axis (max subtraction). Rejects non-finite input.
Tensor softmax(const Tensor& a, int axis);
/// Normalizes the last axis to mean 0 / variance 1 (population), then applies
/// gain and bias (both shaped like the last axis). eps must be positive.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
/// Swaps the last two axes (rank >= 2).
Tensor transpose(const Tensor& a);
Tensor pad_axis(const Tensor& a, int axis, std::int64_t before, std::int64_t after);
Tensor slice_axis(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);

} // namespace tspm
