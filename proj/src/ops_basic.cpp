#include <algorithm>
#include <cstring>

#include "talk3d/ops.hpp"

namespace talk3d::ad {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    T3D_REQUIRE(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                            shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void maybe_check(const Tensor& t, const char* op) {
    if (finite_checks()) check_finite(t, op);
}

constexpr int kReduceChunks = 64;

/// Deterministic chunked sum: fixed chunk partition (independent of thread
/// count), partials combined in chunk order.
double chunked_sum(const double* p, std::int64_t n) {
    if (n == 0) return 0.0;
    const std::int64_t chunk = (n + kReduceChunks - 1) / kReduceChunks;
    double partial[kReduceChunks] = {0.0};
    const int nchunks = static_cast<int>((n + chunk - 1) / chunk);
    parallel_for(nchunks, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
            const std::int64_t lo = c * chunk;
            const std::int64_t hi = std::min(n, lo + chunk);
            double s = 0.0;
            for (std::int64_t i = lo; i < hi; ++i) s += p[i];
            partial[c] = s;
        }
    });
    double total = 0.0;
    for (int c = 0; c < nchunks; ++c) total += partial[c];
    return total;
}

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
    Tensor out = detail::make_op_output(
        a.shape(), name, {a},
        [bwd](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const Tensor& x = parents[0];
            double* gx = detail::grad_sink(x);
            if (!gx) return;
            const double* g = o.grad.data();
            const double* xd = x.ptr();
            const double* yd = o.data.data();
            parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i) gx[i] += bwd(xd[i], yd[i], g[i]);
            });
        });
    const double* xd = a.ptr();
    double* yd = out.ptr();
    parallel_for(a.numel(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yd[i] = fwd(xd[i]);
    });
    maybe_check(out, name);
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = detail::make_op_output(
        a.shape(), "add", {a, b}, [](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            for (int pi = 0; pi < 2; ++pi) {
                double* gp = detail::grad_sink(parents[static_cast<std::size_t>(pi)]);
                if (!gp) continue;
                parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) gp[i] += g[i];
                });
            }
        });
    const double* ad = a.ptr();
    const double* bd = b.ptr();
    double* yd = out.ptr();
    parallel_for(a.numel(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yd[i] = ad[i] + bd[i];
    });
    maybe_check(out, "add");
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = detail::make_op_output(
        a.shape(), "sub", {a, b}, [](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            if (double* ga = detail::grad_sink(parents[0])) {
                parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) ga[i] += g[i];
                });
            }
            if (double* gb = detail::grad_sink(parents[1])) {
                parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) gb[i] -= g[i];
                });
            }
        });
    const double* ad = a.ptr();
    const double* bd = b.ptr();
    double* yd = out.ptr();
    parallel_for(a.numel(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yd[i] = ad[i] - bd[i];
    });
    maybe_check(out, "sub");
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = detail::make_op_output(
        a.shape(), "mul", {a, b}, [](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            const double* ad = parents[0].ptr();
            const double* bd = parents[1].ptr();
            if (double* ga = detail::grad_sink(parents[0])) {
                parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) ga[i] += g[i] * bd[i];
                });
            }
            if (double* gb = detail::grad_sink(parents[1])) {
                parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) gb[i] += g[i] * ad[i];
                });
            }
        });
    const double* ad = a.ptr();
    const double* bd = b.ptr();
    double* yd = out.ptr();
    parallel_for(a.numel(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yd[i] = ad[i] * bd[i];
    });
    maybe_check(out, "mul");
    return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    Tensor out = detail::make_op_output(
        a.shape(), "div", {a, b}, [](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            const double* ad = parents[0].ptr();
            const double* bd = parents[1].ptr();
            if (double* ga = detail::grad_sink(parents[0])) {
                parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) ga[i] += g[i] / bd[i];
                });
            }
            if (double* gb = detail::grad_sink(parents[1])) {
                parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i)
                        gb[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                });
            }
        });
    const double* ad = a.ptr();
    const double* bd = b.ptr();
    double* yd = out.ptr();
    parallel_for(a.numel(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) yd[i] = ad[i] / bd[i];
    });
    maybe_check(out, "div");
    return out;
}

Tensor neg(const Tensor& a) {
    return unary_op(
        "neg", a, [](double x) { return -x; },
        [](double, double, double g) { return -g; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        "add_scalar", a, [s](double x) { return x + s; },
        [](double, double, double g) { return g; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(
        "mul_scalar", a, [s](double x) { return x * s; },
        [s](double, double, double g) { return g * s; });
}

Tensor abs(const Tensor& a) {
    return unary_op(
        "abs", a, [](double x) { return std::abs(x); },
        [](double x, double, double g) { return x > 0 ? g : (x < 0 ? -g : 0.0); });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        "exp", a, [](double x) { return std::exp(x); },
        [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        "log", a, [](double x) { return std::log(x); },
        [](double x, double, double g) { return g / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y, double g) { return g / (2.0 * y); });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a, [](double x) { return fast_sigmoid(x); },
        [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
    return unary_op(
        "silu", a,
        [](double x) { return x * fast_sigmoid(x); },
        [](double x, double, double g) {
            const double s = fast_sigmoid(x);
            return g * s * (1.0 + x * (1.0 - s));
        });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        "softplus", a,
        [](double x) { return x > 30.0 ? x : std::log1p(fast_exp(x)); },
        [](double x, double, double g) { return g * fast_sigmoid(x); });
}

Tensor sum(const Tensor& a) {
    Tensor out = detail::make_op_output(
        {1}, "sum", {a}, [](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double g = o.grad[0];
            parallel_for(parents[0].numel(), [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i) gx[i] += g;
            });
        });
    out.ptr()[0] = chunked_sum(a.ptr(), a.numel());
    maybe_check(out, "sum");
    return out;
}

Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    Tensor out = detail::make_op_output(
        {1}, "mean", {a}, [inv](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double g = o.grad[0] * inv;
            parallel_for(parents[0].numel(), [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i) gx[i] += g;
            });
        });
    out.ptr()[0] = chunked_sum(a.ptr(), a.numel()) * inv;
    maybe_check(out, "mean");
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    T3D_REQUIRE(numel_of(shape) == a.numel(), "reshape: element count mismatch");
    Tensor out = detail::make_op_output(
        std::move(shape), "reshape", {a},
        [](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double* g = o.grad.data();
            parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i) gx[i] += g[i];
            });
        });
    std::memcpy(out.ptr(), a.ptr(), sizeof(double) * static_cast<std::size_t>(a.numel()));
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    T3D_REQUIRE(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    const int nd = static_cast<int>(s0.size());
    T3D_REQUIRE(axis >= 0 && axis < nd, "concat: bad axis");
    Shape out_shape = s0;
    int total_axis = 0;
    for (const auto& p : parts) {
        T3D_REQUIRE(p.ndim() == nd, "concat: rank mismatch");
        for (int d = 0; d < nd; ++d) {
            if (d != axis)
                T3D_REQUIRE(p.dim(d) == s0[static_cast<std::size_t>(d)],
                            "concat: shape mismatch off-axis");
        }
        total_axis += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total_axis;

    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < nd; ++d) inner *= s0[static_cast<std::size_t>(d)];

    std::vector<int> axis_sizes;
    axis_sizes.reserve(parts.size());
    for (const auto& p : parts) axis_sizes.push_back(p.dim(axis));

    Tensor out = detail::make_op_output(
        out_shape, "concat", parts,
        [outer, inner, axis_sizes, total_axis](const TensorImpl& o,
                                               const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            std::int64_t off = 0;
            for (std::size_t pi = 0; pi < parents.size(); ++pi) {
                const std::int64_t an = axis_sizes[pi];
                double* gp = detail::grad_sink(parents[pi]);
                if (gp) {
                    const std::int64_t rows = outer * an;
                    const std::int64_t cur_off = off;
                    parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t r = lo; r < hi; ++r) {
                            const std::int64_t ou = r / an;
                            const std::int64_t ai = r % an;
                            const double* src =
                                g + ((ou * total_axis + cur_off + ai) * inner);
                            double* dst = gp + r * inner;
                            for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                        }
                    });
                }
                off += an;
            }
        });

    double* yd = out.ptr();
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t an = p.dim(axis);
        const double* src = p.ptr();
        const std::int64_t rows = outer * an;
        const std::int64_t cur_off = off;
        parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t r = lo; r < hi; ++r) {
                const std::int64_t ou = r / an;
                const std::int64_t ai = r % an;
                double* dst = yd + ((ou * total_axis + cur_off + ai) * inner);
                std::memcpy(dst, src + r * inner, sizeof(double) * static_cast<std::size_t>(inner));
            }
        });
        off += an;
    }
    maybe_check(out, "concat");
    return out;
}

Tensor slice_axis0(const Tensor& a, int begin, int end) {
    T3D_REQUIRE(a.ndim() >= 1 && begin >= 0 && end <= a.dim(0) && begin < end,
                "slice_axis0: bad range");
    Shape out_shape = a.shape();
    out_shape[0] = end - begin;
    std::int64_t inner = 1;
    for (int d = 1; d < a.ndim(); ++d) inner *= a.dim(d);
    Tensor out = detail::make_op_output(
        out_shape, "slice_axis0", {a},
        [begin, inner](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double* g = o.grad.data();
            const std::int64_t n = o.numel;
            double* base = gx + begin * inner;
            parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i) base[i] += g[i];
            });
        });
    std::memcpy(out.ptr(), a.ptr() + begin * inner,
                sizeof(double) * static_cast<std::size_t>(out.numel()));
    return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    T3D_REQUIRE(x.ndim() == 2 && b.ndim() == 1 && x.dim(1) == b.dim(0),
                "add_row_bias: want [n,d] + [d]");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    Tensor out = detail::make_op_output(
        x.shape(), "add_row_bias", {x, b},
        [n, d](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            if (double* gx = detail::grad_sink(parents[0])) {
                parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) gx[i] += g[i];
                });
            }
            if (double* gb = detail::grad_sink(parents[1])) {
                // fixed-chunk partials over rows, combined in chunk order
                const std::int64_t chunk = (n + kReduceChunks - 1) / kReduceChunks;
                const int nchunks = static_cast<int>((n + chunk - 1) / chunk);
                std::vector<double> partial(static_cast<std::size_t>(nchunks) * d, 0.0);
                parallel_for(nchunks, [&](std::int64_t c0, std::int64_t c1) {
                    for (std::int64_t c = c0; c < c1; ++c) {
                        double* part = partial.data() + c * d;
                        const std::int64_t lo = c * chunk, hi = std::min(n, lo + chunk);
                        for (std::int64_t r = lo; r < hi; ++r) {
                            const double* gr = g + r * d;
                            for (std::int64_t j = 0; j < d; ++j) part[j] += gr[j];
                        }
                    }
                });
                for (int c = 0; c < nchunks; ++c) {
                    const double* part = partial.data() + static_cast<std::int64_t>(c) * d;
                    for (std::int64_t j = 0; j < d; ++j) gb[j] += part[j];
                }
            }
        });
    const double* xd = x.ptr();
    const double* bd = b.ptr();
    double* yd = out.ptr();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
            const double* xr = xd + r * d;
            double* yr = yd + r * d;
            for (std::int64_t j = 0; j < d; ++j) yr[j] = xr[j] + bd[j];
        }
    });
    maybe_check(out, "add_row_bias");
    return out;
}

Tensor row_affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    T3D_REQUIRE(x.ndim() == 2 && scale.ndim() == 1 && shift.ndim() == 1 &&
                    x.dim(1) == scale.dim(0) && x.dim(1) == shift.dim(0),
                "row_affine: want [n,d], [d], [d]");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    Tensor out = detail::make_op_output(
        x.shape(), "row_affine", {x, scale, shift},
        [n, d](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            const double* xd = parents[0].ptr();
            const double* sd = parents[1].ptr();
            if (double* gx = detail::grad_sink(parents[0])) {
                parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t r = lo; r < hi; ++r)
                        for (std::int64_t j = 0; j < d; ++j)
                            gx[r * d + j] += g[r * d + j] * (1.0 + sd[j]);
                });
            }
            double* gs = detail::grad_sink(parents[1]);
            double* gt = detail::grad_sink(parents[2]);
            if (gs || gt) {
                for (std::int64_t r = 0; r < n; ++r) {
                    const double* gr = g + r * d;
                    const double* xr = xd + r * d;
                    for (std::int64_t j = 0; j < d; ++j) {
                        if (gs) gs[j] += gr[j] * xr[j];
                        if (gt) gt[j] += gr[j];
                    }
                }
            }
        });
    const double* xd = x.ptr();
    const double* sd = scale.ptr();
    const double* td = shift.ptr();
    double* yd = out.ptr();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r)
            for (std::int64_t j = 0; j < d; ++j)
                yd[r * d + j] = xd[r * d + j] * (1.0 + sd[j]) + td[j];
    });
    maybe_check(out, "row_affine");
    return out;
}

}  // namespace talk3d::ad
