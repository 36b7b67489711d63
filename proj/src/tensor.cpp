#include "talk3d/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <sstream>
#include <unordered_set>

#include <malloc.h>

namespace talk3d {

namespace {
// Training allocates and frees the same large activation buffers every step;
// keeping them on the heap freelist avoids re-faulting pages each time.
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
}  // namespace

}  // namespace talk3d

namespace talk3d::ad {

namespace {
bool g_grad_enabled = true;
bool g_finite_checks = false;
std::vector<std::string>* g_trace = nullptr;
std::atomic<std::uint64_t> g_seq{0};
}  // namespace

std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        T3D_REQUIRE(d > 0, "tensor dimension must be positive");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    Tensor t = uninitialized(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), 0.0);
    return t;
}

Tensor Tensor::uninitialized(Shape shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->numel = numel_of(shape);
    impl->shape = std::move(shape);
    impl->data.resize(static_cast<std::size_t>(impl->numel));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->numel = numel_of(shape);
    impl->shape = std::move(shape);
    T3D_REQUIRE(static_cast<std::int64_t>(data.size()) == impl->numel,
                "from_data: data length does not match shape " + shape_str(impl->shape));
    impl->data.assign(data.begin(), data.end());
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
}

double Tensor::value() const {
    T3D_REQUIRE(numel() == 1, "value(): tensor is not a scalar");
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

DVec& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(static_cast<std::size_t>(impl_->numel), 0.0);
    return impl_->grad;
}

const DVec& Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(static_cast<std::size_t>(impl_->numel), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() const {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::grad_at(std::int64_t i) const {
    if (impl_->grad.empty()) return 0.0;
    return impl_->grad[static_cast<std::size_t>(i)];
}

Tensor Tensor::clone_detached() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->numel = impl_->numel;
    impl->data = impl_->data;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

GradGuard::GradGuard(bool enabled) : prev_(g_grad_enabled) { g_grad_enabled = enabled; }
GradGuard::~GradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks() { return g_finite_checks; }
void set_backward_trace(std::vector<std::string>* sink) { g_trace = sink; }

void check_finite_span(const double* p, std::int64_t n, const char* what) {
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) {
            fail(std::string("non-finite value in ") + what);
        }
    }
}

void check_finite(const Tensor& t, const char* what) {
    check_finite_span(t.ptr(), t.numel(), what);
}

void backward(const Tensor& loss) {
    T3D_REQUIRE(loss.defined() && loss.numel() == 1, "backward: loss must be a defined scalar");
    check_finite(loss, "loss");

    // Iterative postorder DFS; reversing the postorder yields an order in
    // which every tensor is visited before all of its producers' inputs.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    struct Frame {
        TensorImpl* t;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.raw(), 0});
    seen.insert(loss.raw());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (!f.t->node || f.next_parent >= f.t->node->parents.size()) {
            order.push_back(f.t);
            stack.pop_back();
            continue;
        }
        TensorImpl* p = f.t->node->parents[f.next_parent++].raw();
        if (seen.insert(p).second) stack.push_back({p, 0});
    }

    loss.raw()->grad.assign(1, 1.0);
    static const bool profile = std::getenv("TALK3D_PROFILE_BACKWARD") != nullptr;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        if (!t->node) continue;
        if (t->grad.empty()) continue;  // no contribution flowed here
        if (g_trace) g_trace->push_back(t->node->op);
        if (profile) {
            const auto t0 = std::chrono::steady_clock::now();
            t->node->backward(*t, t->node->parents);
            const auto t1 = std::chrono::steady_clock::now();
            fprintf(stderr, "[bwd] %-16s %7.1f ms\n", t->node->op,
                    std::chrono::duration<double, std::milli>(t1 - t0).count());
        } else {
            t->node->backward(*t, t->node->parents);
        }
    }
}

namespace detail {

Tensor make_op_output(Shape shape, const char* op, std::vector<Tensor> parents,
                      std::function<void(const TensorImpl&, const std::vector<Tensor>&)> bwd) {
    bool rg = false;
    if (grad_enabled()) {
        for (const auto& p : parents)
            if (p.requires_grad()) rg = true;
    }
    Tensor out = Tensor::uninitialized(std::move(shape), rg);
    if (rg) {
        auto node = std::make_shared<Node>();
        node->parents = std::move(parents);
        node->backward = std::move(bwd);
        node->op = op;
        node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
        out.impl()->node = std::move(node);
    }
    return out;
}

double* grad_sink(const Tensor& parent) {
    if (!parent.requires_grad() && !parent.raw()->node) return nullptr;
    TensorImpl* impl = parent.raw();
    if (impl->grad.empty()) impl->grad.assign(static_cast<std::size_t>(impl->numel), 0.0);
    return impl->grad.data();
}

const double* out_grad(const TensorImpl& out) { return out.grad.data(); }

}  // namespace detail

}  // namespace talk3d::ad
