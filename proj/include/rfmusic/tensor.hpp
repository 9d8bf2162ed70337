#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace rfm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

template <class T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Real T>
class Tensor;

namespace detail {

template <Real T>
struct TensorImpl;

// One recorded operation. `backward` reads the output gradient and
// accumulates into the gradients of `inputs` that require grad.
template <Real T>
struct GradFn {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::function<void(std::span<const T> out_grad)> backward;
};

template <Real T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::shared_ptr<GradFn<T>> grad_fn;

    // Zero-filled gradient buffer, allocated on first use.
    std::vector<T>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <Real T>
void check_finite(const char* op, std::span<const T> values) {
    for (T v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

// Graph recording switch; see NoGradGuard.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline void validate_shape(const Shape& shape) {
    for (std::size_t e : shape) {
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
}

}  // namespace detail

/// Dense row-major n-d array with optional gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Values are
/// treated as immutable once produced by an op; the only sanctioned
/// mutation path is `mutable_data()`, used by initializers and optimizers
/// between steps.
template <Real T>
class Tensor {
   public:
    using value_type = T;
    using Impl = detail::TensorImpl<T>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : impl_(std::make_shared<Impl>()) {
        detail::validate_shape(shape);
        if (rfm::numel(shape) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             to_string(shape));
        }
        detail::check_finite<T>("tensor construction", data);
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = rfm::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const std::size_t n = rfm::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    /// Extent along `axis`; negative axes count from the end.
    std::size_t size(int axis) const {
        const int r = static_cast<int>(dim());
        const int a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
        return impl_->shape[static_cast<std::size_t>(a)];
    }

    std::span<const T> data() const { return impl_->data; }
    T operator[](std::size_t i) const { return impl_->data[i]; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }
    bool is_leaf() const { return impl_->grad_fn == nullptr; }

    bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }

    /// Gradient values; zeros if backward has not reached this tensor.
    std::span<const T> grad() const {
        impl_->grad_buffer();
        return impl_->grad;
    }

    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    // In-place update path for initializers and optimizers. Not recorded.
    std::span<T> mutable_data() { return impl_->data; }
    std::span<T> mutable_grad() { return impl_->grad_buffer(); }

    /// Deep copy without graph history.
    Tensor clone(bool requires_grad = false) const {
        return Tensor(impl_->shape, impl_->data, requires_grad);
    }

    Tensor detach() const { return clone(false); }

    std::vector<T> to_vector() const { return impl_->data; }

    const std::shared_ptr<Impl>& impl() const { return impl_; }

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
    /// calls; intermediate gradients are transient.
    void backward() const;

    static Tensor from_impl(std::shared_ptr<Impl> impl) {
        Tensor t;
        t.impl_ = std::move(impl);
        return t;
    }

   private:
    std::shared_ptr<Impl> impl_;
};

namespace detail {

// Builds an op result. The graph node is only recorded when some input
// requires grad.
template <Real T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(std::span<const T>)> backward) {
    check_finite<T>(op, data);
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool needs = false;
    if (grad_mode())
        for (const Tensor<T>* in : inputs) needs = needs || in->requires_grad();
    if (needs) {
        impl->requires_grad = true;
        auto fn = std::make_shared<GradFn<T>>();
        fn->op = op;
        for (const Tensor<T>* in : inputs) fn->inputs.push_back(in->impl());
        fn->backward = std::move(backward);
        impl->grad_fn = std::move(fn);
    }
    return Tensor<T>::from_impl(std::move(impl));
}

template <Real T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(std::span<const T>)> backward) {
    check_finite<T>(op, data);
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool needs = false;
    if (grad_mode())
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        impl->requires_grad = true;
        auto fn = std::make_shared<GradFn<T>>();
        fn->op = op;
        for (const auto& in : inputs) fn->inputs.push_back(in.impl());
        fn->backward = std::move(backward);
        impl->grad_fn = std::move(fn);
    }
    return Tensor<T>::from_impl(std::move(impl));
}

// Gradient buffer of an input if it participates in differentiation.
template <Real T>
T* grad_of(const std::shared_ptr<TensorImpl<T>>& impl) {
    return impl->requires_grad ? impl->grad_buffer().data() : nullptr;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime. Op results
/// produced inside never require grad.
class NoGradGuard {
   public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool prev_;
};

template <Real T>
void backward(const Tensor<T>& loss) {
    using Impl = detail::TensorImpl<T>;
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) throw ContractError("backward on a tensor that does not require grad");

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<Impl*> order;
    std::unordered_set<Impl*> visited;
    std::vector<std::pair<Impl*, std::size_t>> stack{{loss.impl().get(), 0}};
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        const auto* fn = node->grad_fn.get();
        if (fn && next < fn->inputs.size()) {
            Impl* child = fn->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Impl* node : order) {
        if (node->grad_fn) node->grad.assign(node->data.size(), T(0));
    }
    loss.impl()->grad_buffer()[0] += T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Impl* node = *it;
        if (!node->grad_fn) continue;
        node->grad_fn->backward(node->grad);
        if (node != loss.impl().get()) std::vector<T>().swap(node->grad);
    }
}

template <Real T>
void Tensor<T>::backward() const {
    rfm::backward(*this);
}

}  // namespace rfm
