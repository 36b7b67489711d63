#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "talk3d/common.hpp"

namespace talk3d::ad {

/// Allocator that skips value-initialization for trivially constructible
/// elements. Op outputs are always fully written, so zero-filling them first
/// only burns memory bandwidth.
template <class T>
struct NoInitAllocator {
    using value_type = T;
    NoInitAllocator() = default;
    template <class U>
    NoInitAllocator(const NoInitAllocator<U>&) {}
    T* allocate(std::size_t n) { return std::allocator<T>().allocate(n); }
    void deallocate(T* p, std::size_t n) { std::allocator<T>().deallocate(p, n); }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) > 0)
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    template <class U>
    bool operator==(const NoInitAllocator<U>&) const {
        return true;
    }
};

/// Dense f64 storage.
using DVec = std::vector<double, NoInitAllocator<double>>;

inline bool operator==(const DVec& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}
inline bool operator==(const std::vector<double>& a, const DVec& b) { return b == a; }

using Shape = std::vector<int>;

std::int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl;
class Tensor;

/// One record on the tape: the tensors the op consumed plus the closure that
/// routes the output gradient back to them.
struct Node {
    std::vector<Tensor> parents;
    std::function<void(const TensorImpl& out, const std::vector<Tensor>& parents)> backward;
    const char* op = "";
    std::uint64_t seq = 0;
};

struct TensorImpl {
    Shape shape;
    std::int64_t numel = 0;
    DVec data;
    bool requires_grad = false;
    DVec grad;  // empty until touched
    std::shared_ptr<Node> node;
};

/// Shared-handle dense f64 tensor, row-major.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    /// Uninitialized storage; for op outputs that overwrite every element.
    static Tensor uninitialized(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return impl_->numel; }

    DVec& data() { return impl_->data; }
    const DVec& data() const { return impl_->data; }
    double* ptr() { return impl_->data.data(); }
    const double* ptr() const { return impl_->data.data(); }

    /// Value of a single-element tensor.
    double value() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v);

    /// Gradient buffer, allocated (zeroed) on first access.
    DVec& grad();
    const DVec& grad() const;
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() const;

    double grad_at(std::int64_t i) const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    TensorImpl* raw() const { return impl_.get(); }

    /// Deep copy of values; detached from the tape.
    Tensor clone_detached() const;

    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Scoped toggle: while disabled, ops do not record tape nodes.
class GradGuard {
public:
    explicit GradGuard(bool enabled);
    ~GradGuard();

private:
    bool prev_;
};

bool grad_enabled();

/// Reverse sweep from a scalar loss. Visits op records in exact reverse
/// topological order; leaves that never receive a contribution keep (or are
/// given) zero gradients.
void backward(const Tensor& loss);

/// Per-op output finite validation (NaN/Inf raises). Off by default; tests
/// and gradcheck enable it.
void set_finite_checks(bool enabled);
bool finite_checks();

/// When non-null, backward() appends the op name of every node it visits.
void set_backward_trace(std::vector<std::string>* sink);

void check_finite(const Tensor& t, const char* what);
void check_finite_span(const double* p, std::int64_t n, const char* what);

namespace detail {
Tensor make_op_output(Shape shape, const char* op, std::vector<Tensor> parents,
                      std::function<void(const TensorImpl&, const std::vector<Tensor>&)> bwd);
/// Gradient accumulation target for a parent; nullptr if the parent does not
/// require grad (caller skips the work).
double* grad_sink(const Tensor& parent);
const double* out_grad(const TensorImpl& out);
}  // namespace detail

}  // namespace talk3d::ad
