#include <algorithm>
#include <cstring>
#include <memory>

#include "talk3d/ops.hpp"

namespace talk3d::ad {

namespace {

void maybe_check(const Tensor& t, const char* op) {
    if (finite_checks()) check_finite(t, op);
}

constexpr int kReduceChunks = 64;

/// Dot product with eight independent accumulator lanes combined in a fixed
/// tree. The lane loop vectorizes; the result is deterministic everywhere.
inline double dot8(const double* a, const double* b, std::int64_t n) {
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::int64_t l = 0;
    for (; l + 8 <= n; l += 8)
        for (int u = 0; u < 8; ++u) acc[u] += a[l + u] * b[l + u];
    double tail = 0.0;
    for (; l < n; ++l) tail += a[l] * b[l];
    return (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) +
           tail;
}

/// Same lane pattern with a strided second operand.
inline double dot8_strided(const double* a, const double* b, std::int64_t n, std::int64_t bstride) {
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::int64_t l = 0;
    for (; l + 8 <= n; l += 8)
        for (int u = 0; u < 8; ++u) acc[u] += a[l + u] * b[(l + u) * bstride];
    double tail = 0.0;
    for (; l < n; ++l) tail += a[l] * b[l * bstride];
    return (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) +
           tail;
}

}  // namespace

// ---------------------------------------------------------------------------
// GEMM kernels. Row-parallel with per-element fixed accumulation order, so
// results are bit-identical for any thread count.
// ---------------------------------------------------------------------------

void gemm_nn(std::int64_t m, std::int64_t k, std::int64_t n, const double* A, const double* B,
             double* C) {
    constexpr int JT = 64;  // output tile kept in registers across the k loop
    parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
        double acc[JT];
        for (std::int64_t i = lo; i < hi; ++i) {
            double* c = C + i * n;
            const double* a = A + i * k;
            for (std::int64_t j0 = 0; j0 < n; j0 += JT) {
                const int jl = static_cast<int>(std::min<std::int64_t>(JT, n - j0));
                if (jl == JT) {
                    for (int u = 0; u < JT; ++u) acc[u] = 0.0;
                    for (std::int64_t l = 0; l < k; ++l) {
                        const double al = a[l];
                        const double* b = B + l * n + j0;
                        for (int u = 0; u < JT; ++u) acc[u] += al * b[u];
                    }
                    for (int u = 0; u < JT; ++u) c[j0 + u] = acc[u];
                } else {
                    for (int u = 0; u < jl; ++u) acc[u] = 0.0;
                    for (std::int64_t l = 0; l < k; ++l) {
                        const double al = a[l];
                        const double* b = B + l * n + j0;
                        for (int u = 0; u < jl; ++u) acc[u] += al * b[u];
                    }
                    for (int u = 0; u < jl; ++u) c[j0 + u] = acc[u];
                }
            }
        }
    });
}

void gemm_nt(std::int64_t m, std::int64_t k, std::int64_t n, const double* A, const double* B,
             double* C) {
    // Blocks of 8 output columns share the A-row loads; per-element lane
    // pattern matches dot8, so blocking does not change the arithmetic.
    constexpr int JB = 8;
    parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
        double acc[JB][8];
        for (std::int64_t i = lo; i < hi; ++i) {
            const double* a = A + i * k;
            double* c = C + i * n;
            std::int64_t j0 = 0;
            for (; j0 + JB <= n; j0 += JB) {
                for (int j = 0; j < JB; ++j)
                    for (int u = 0; u < 8; ++u) acc[j][u] = 0.0;
                std::int64_t l = 0;
                for (; l + 8 <= k; l += 8) {
                    for (int j = 0; j < JB; ++j) {
                        const double* b = B + (j0 + j) * k + l;
                        const double* av = a + l;
                        for (int u = 0; u < 8; ++u) acc[j][u] += av[u] * b[u];
                    }
                }
                for (int j = 0; j < JB; ++j) {
                    double tail = 0.0;
                    const double* b = B + (j0 + j) * k;
                    for (std::int64_t t = l; t < k; ++t) tail += a[t] * b[t];
                    const double* q = acc[j];
                    c[j0 + j] = (((q[0] + q[1]) + (q[2] + q[3])) +
                                 ((q[4] + q[5]) + (q[6] + q[7]))) +
                                tail;
                }
            }
            for (; j0 < n; ++j0) c[j0] = dot8(a, B + j0 * k, k);
        }
    });
}

void gemm_nn_accum(std::int64_t m, std::int64_t k, std::int64_t n, const double* A,
                   const double* B, double* C) {
    constexpr int JT = 64;
    parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
        double acc[JT];
        for (std::int64_t i = lo; i < hi; ++i) {
            double* c = C + i * n;
            const double* a = A + i * k;
            for (std::int64_t j0 = 0; j0 < n; j0 += JT) {
                const int jl = static_cast<int>(std::min<std::int64_t>(JT, n - j0));
                if (jl == JT) {
                    for (int u = 0; u < JT; ++u) acc[u] = 0.0;
                    for (std::int64_t l = 0; l < k; ++l) {
                        const double al = a[l];
                        const double* b = B + l * n + j0;
                        for (int u = 0; u < JT; ++u) acc[u] += al * b[u];
                    }
                    for (int u = 0; u < JT; ++u) c[j0 + u] += acc[u];
                } else {
                    for (int u = 0; u < jl; ++u) acc[u] = 0.0;
                    for (std::int64_t l = 0; l < k; ++l) {
                        const double al = a[l];
                        const double* b = B + l * n + j0;
                        for (int u = 0; u < jl; ++u) acc[u] += al * b[u];
                    }
                    for (int u = 0; u < jl; ++u) c[j0 + u] += acc[u];
                }
            }
        }
    });
}

/// Transpose of a small row-major matrix into a scratch buffer.
static void transpose_small(std::int64_t r, std::int64_t c, const double* A, double* AT) {
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) AT[j * r + i] = A[i * c + j];
}

void gemm_nt_accum(std::int64_t m, std::int64_t k, std::int64_t n, const double* A,
                   const double* B, double* C) {
    constexpr int JB = 8;
    parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
        double acc[JB][8];
        for (std::int64_t i = lo; i < hi; ++i) {
            const double* a = A + i * k;
            double* c = C + i * n;
            std::int64_t j0 = 0;
            for (; j0 + JB <= n; j0 += JB) {
                for (int j = 0; j < JB; ++j)
                    for (int u = 0; u < 8; ++u) acc[j][u] = 0.0;
                std::int64_t l = 0;
                for (; l + 8 <= k; l += 8) {
                    for (int j = 0; j < JB; ++j) {
                        const double* b = B + (j0 + j) * k + l;
                        const double* av = a + l;
                        for (int u = 0; u < 8; ++u) acc[j][u] += av[u] * b[u];
                    }
                }
                for (int j = 0; j < JB; ++j) {
                    double tail = 0.0;
                    const double* b = B + (j0 + j) * k;
                    for (std::int64_t t = l; t < k; ++t) tail += a[t] * b[t];
                    const double* q = acc[j];
                    c[j0 + j] += (((q[0] + q[1]) + (q[2] + q[3])) +
                                  ((q[4] + q[5]) + (q[6] + q[7]))) +
                                 tail;
                }
            }
            for (; j0 < n; ++j0) c[j0] += dot8(a, B + j0 * k, k);
        }
    });
}

void gemm_tn_accum(std::int64_t m, std::int64_t k, std::int64_t n, const double* A,
                   const double* B, double* C) {
    // C[k,n] += A^T B with A [m,k], B [m,n]; fixed-chunk partials over m.
    const std::int64_t chunk = (m + kReduceChunks - 1) / kReduceChunks;
    const int nchunks = static_cast<int>(chunk > 0 ? (m + chunk - 1) / chunk : 0);
    if (nchunks == 0) return;
    std::vector<double> partial(static_cast<std::size_t>(nchunks) * k * n, 0.0);
    parallel_for(nchunks, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
            double* part = partial.data() + c * k * n;
            const std::int64_t lo = c * chunk, hi = std::min(m, lo + chunk);
            std::int64_t i = lo;
            // four rows per pass to cut partial-buffer traffic; the blocking
            // depends only on the fixed chunk bounds, so results stay
            // reproducible for any thread count
            for (; i + 4 <= hi; i += 4) {
                const double* a0 = A + i * k;
                const double* a1 = a0 + k;
                const double* a2 = a1 + k;
                const double* a3 = a2 + k;
                const double* b0 = B + i * n;
                const double* b1 = b0 + n;
                const double* b2 = b1 + n;
                const double* b3 = b2 + n;
                for (std::int64_t l = 0; l < k; ++l) {
                    const double v0 = a0[l], v1 = a1[l], v2 = a2[l], v3 = a3[l];
                    double* p = part + l * n;
                    for (std::int64_t j = 0; j < n; ++j)
                        p[j] += ((v0 * b0[j] + v1 * b1[j]) + (v2 * b2[j] + v3 * b3[j]));
                }
            }
            for (; i < hi; ++i) {
                const double* a = A + i * k;
                const double* b = B + i * n;
                for (std::int64_t l = 0; l < k; ++l) {
                    const double al = a[l];
                    double* p = part + l * n;
                    for (std::int64_t j = 0; j < n; ++j) p[j] += al * b[j];
                }
            }
        }
    });
    for (int c = 0; c < nchunks; ++c) {
        const double* part = partial.data() + static_cast<std::int64_t>(c) * k * n;
        parallel_for(k * n, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) C[i] += part[i];
        });
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    T3D_REQUIRE(a.ndim() == 2 && b.ndim() == 2, "matmul: inputs must be 2-D");
    T3D_REQUIRE(a.dim(1) == b.dim(0), "matmul: inner dimensions differ (" +
                                          shape_str(a.shape()) + " x " + shape_str(b.shape()) + ")");
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = detail::make_op_output(
        {static_cast<int>(m), static_cast<int>(n)}, "matmul", {a, b},
        [m, k, n](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            const double* A = parents[0].ptr();
            const double* B = parents[1].ptr();
            if (double* ga = detail::grad_sink(parents[0])) {
                // dA += g * B^T, via a transposed copy of the small factor so
                // the hot kernel keeps single-stream row access
                std::vector<double> BT(static_cast<std::size_t>(k * n));
                transpose_small(k, n, B, BT.data());
                gemm_nn_accum(m, n, k, g, BT.data(), ga);
            }
            if (double* gb = detail::grad_sink(parents[1])) {
                gemm_tn_accum(m, k, n, A, g, gb);  // dB += A^T * g
            }
        });
    gemm_nn(m, k, n, a.ptr(), b.ptr(), out.ptr());
    maybe_check(out, "matmul");
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Act act) {
    T3D_REQUIRE(x.ndim() == 2 && w.ndim() == 2 && b.ndim() == 1, "linear: want [n,k],[k,o],[o]");
    T3D_REQUIRE(x.dim(1) == w.dim(0) && w.dim(1) == b.dim(0), "linear: dimension mismatch");
    const std::int64_t m = x.dim(0), k = x.dim(1), n = w.dim(1);

    // pre-activation values are needed by the silu backward
    std::shared_ptr<DVec> pre;
    if (act == Act::silu) {
        pre = std::make_shared<DVec>();
        pre->resize(static_cast<std::size_t>(m * n));
    }

    Tensor out = detail::make_op_output(
        {static_cast<int>(m), static_cast<int>(n)}, "linear", {x, w, b},
        [m, k, n, act, pre](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            const double* X = parents[0].ptr();
            const double* W = parents[1].ptr();
            DVec gpre_buf;
            const double* gpre = g;
            if (act == Act::silu) {
                gpre_buf.resize(static_cast<std::size_t>(m * n));
                const double* pd = pre->data();
                double* gp = gpre_buf.data();
                parallel_for(m * n, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) {
                        const double s = fast_sigmoid(pd[i]);
                        gp[i] = g[i] * s * (1.0 + pd[i] * (1.0 - s));
                    }
                });
                gpre = gp;
            }
            if (double* gx = detail::grad_sink(parents[0])) {
                std::vector<double> WT(static_cast<std::size_t>(k * n));
                transpose_small(k, n, W, WT.data());
                gemm_nn_accum(m, n, k, gpre, WT.data(), gx);
            }
            if (double* gw = detail::grad_sink(parents[1])) gemm_tn_accum(m, k, n, X, gpre, gw);
            if (double* gb = detail::grad_sink(parents[2])) {
                const std::int64_t chunk = (m + kReduceChunks - 1) / kReduceChunks;
                const int nchunks = static_cast<int>((m + chunk - 1) / chunk);
                std::vector<double> partial(static_cast<std::size_t>(nchunks) * n, 0.0);
                parallel_for(nchunks, [&](std::int64_t c0, std::int64_t c1) {
                    for (std::int64_t c = c0; c < c1; ++c) {
                        double* part = partial.data() + c * n;
                        const std::int64_t lo = c * chunk, hi = std::min(m, lo + chunk);
                        for (std::int64_t r = lo; r < hi; ++r) {
                            const double* gr = gpre + r * n;
                            for (std::int64_t j = 0; j < n; ++j) part[j] += gr[j];
                        }
                    }
                });
                for (int c = 0; c < nchunks; ++c) {
                    const double* part = partial.data() + static_cast<std::int64_t>(c) * n;
                    for (std::int64_t j = 0; j < n; ++j) gb[j] += part[j];
                }
            }
        });

    gemm_nn(m, k, n, x.ptr(), w.ptr(), out.ptr());
    const double* bd = b.ptr();
    double* yd = out.ptr();
    if (act == Act::silu) {
        double* pd = pre->data();
        parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t r = lo; r < hi; ++r) {
                for (std::int64_t j = 0; j < n; ++j) {
                    const double p = yd[r * n + j] + bd[j];
                    pd[r * n + j] = p;
                    yd[r * n + j] = p * fast_sigmoid(p);
                }
            }
        });
    } else {
        parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t r = lo; r < hi; ++r)
                for (std::int64_t j = 0; j < n; ++j) yd[r * n + j] += bd[j];
        });
    }
    maybe_check(out, "linear");
    return out;
}

Tensor transpose2d(const Tensor& a) {
    T3D_REQUIRE(a.ndim() == 2, "transpose2d: input must be 2-D");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = detail::make_op_output(
        {static_cast<int>(n), static_cast<int>(m)}, "transpose2d", {a},
        [m, n](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double* g = o.grad.data();
            parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i)
                    for (std::int64_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
            });
        });
    const double* ad = a.ptr();
    double* yd = out.ptr();
    parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i)
            for (std::int64_t j = 0; j < n; ++j) yd[j * m + i] = ad[i * n + j];
    });
    return out;
}

// ---------------------------------------------------------------------------
// conv2d on [C,H,W] with kernel [O,C,kh,kw]: cross-correlation, zero padding.
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int C, H, W, O, kh, kw, stride, pad, OH, OW;
};

inline void valid_range(int kpos, int pad, int stride, int in_size, int out_size, int& lo,
                        int& hi) {
    // output indices where in = out*stride + kpos - pad lands in [0, in_size)
    lo = 0;
    while (lo < out_size && lo * stride + kpos - pad < 0) ++lo;
    hi = out_size - 1;
    while (hi >= 0 && hi * stride + kpos - pad >= in_size) --hi;
}

void conv_forward(const ConvDims& d, const double* x, const double* k, double* y) {
    const std::int64_t in_plane = static_cast<std::int64_t>(d.H) * d.W;
    const std::int64_t out_plane = static_cast<std::int64_t>(d.OH) * d.OW;
    parallel_for(d.O, [&](std::int64_t o0, std::int64_t o1) {
        for (std::int64_t o = o0; o < o1; ++o) {
            double* yo = y + o * out_plane;
            std::memset(yo, 0, sizeof(double) * static_cast<std::size_t>(out_plane));
            for (int c = 0; c < d.C; ++c) {
                const double* xc = x + c * in_plane;
                const double* kc = k + ((o * d.C + c) * d.kh) * d.kw;
                for (int ky = 0; ky < d.kh; ++ky) {
                    int oy_lo, oy_hi;
                    valid_range(ky, d.pad, d.stride, d.H, d.OH, oy_lo, oy_hi);
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const double kv = kc[ky * d.kw + kx];
                        if (kv == 0.0) continue;
                        int ox_lo, ox_hi;
                        valid_range(kx, d.pad, d.stride, d.W, d.OW, ox_lo, ox_hi);
                        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int iy = oy * d.stride + ky - d.pad;
                            const double* xrow = xc + static_cast<std::int64_t>(iy) * d.W;
                            double* yrow = yo + static_cast<std::int64_t>(oy) * d.OW;
                            if (d.stride == 1) {
                                const int ib = ox_lo + kx - d.pad;
                                for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    yrow[ox] += kv * xrow[ib + (ox - ox_lo)];
                            } else {
                                for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    yrow[ox] += kv * xrow[ox * d.stride + kx - d.pad];
                            }
                        }
                    }
                }
            }
        }
    });
}

void conv_backward_x(const ConvDims& d, const double* k, const double* gy, double* gx) {
    const std::int64_t in_plane = static_cast<std::int64_t>(d.H) * d.W;
    const std::int64_t out_plane = static_cast<std::int64_t>(d.OH) * d.OW;
    parallel_for(d.C, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
            double* gxc = gx + c * in_plane;
            for (int o = 0; o < d.O; ++o) {
                const double* go = gy + static_cast<std::int64_t>(o) * out_plane;
                const double* kc = k + ((o * d.C + c) * d.kh) * d.kw;
                for (int ky = 0; ky < d.kh; ++ky) {
                    int oy_lo, oy_hi;
                    valid_range(ky, d.pad, d.stride, d.H, d.OH, oy_lo, oy_hi);
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const double kv = kc[ky * d.kw + kx];
                        if (kv == 0.0) continue;
                        int ox_lo, ox_hi;
                        valid_range(kx, d.pad, d.stride, d.W, d.OW, ox_lo, ox_hi);
                        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int iy = oy * d.stride + ky - d.pad;
                            double* gxrow = gxc + static_cast<std::int64_t>(iy) * d.W;
                            const double* grow = go + static_cast<std::int64_t>(oy) * d.OW;
                            for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                gxrow[ox * d.stride + kx - d.pad] += kv * grow[ox];
                        }
                    }
                }
            }
        }
    });
}

void conv_backward_k(const ConvDims& d, const double* x, const double* gy, double* gk) {
    const std::int64_t in_plane = static_cast<std::int64_t>(d.H) * d.W;
    const std::int64_t out_plane = static_cast<std::int64_t>(d.OH) * d.OW;
    parallel_for(d.O, [&](std::int64_t o0, std::int64_t o1) {
        for (std::int64_t o = o0; o < o1; ++o) {
            const double* go = gy + o * out_plane;
            for (int c = 0; c < d.C; ++c) {
                const double* xc = x + static_cast<std::int64_t>(c) * in_plane;
                double* gkc = gk + ((o * d.C + c) * d.kh) * d.kw;
                for (int ky = 0; ky < d.kh; ++ky) {
                    int oy_lo, oy_hi;
                    valid_range(ky, d.pad, d.stride, d.H, d.OH, oy_lo, oy_hi);
                    for (int kx = 0; kx < d.kw; ++kx) {
                        int ox_lo, ox_hi;
                        valid_range(kx, d.pad, d.stride, d.W, d.OW, ox_lo, ox_hi);
                        if (ox_hi < ox_lo) continue;
                        const int len = ox_hi - ox_lo + 1;
                        double s = 0.0;
                        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int iy = oy * d.stride + ky - d.pad;
                            const double* xrow =
                                xc + static_cast<std::int64_t>(iy) * d.W + ox_lo * d.stride + kx -
                                d.pad;
                            const double* grow =
                                go + static_cast<std::int64_t>(oy) * d.OW + ox_lo;
                            s += (d.stride == 1) ? dot8(grow, xrow, len)
                                                 : dot8_strided(grow, xrow, len, d.stride);
                        }
                        gkc[ky * d.kw + kx] += s;
                    }
                }
            }
        }
    });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int padding) {
    T3D_REQUIRE(x.ndim() == 3 && kernel.ndim() == 4, "conv2d: want x [C,H,W], kernel [O,C,kh,kw]");
    T3D_REQUIRE(kernel.dim(1) == x.dim(0), "conv2d: channel mismatch");
    T3D_REQUIRE(kernel.dim(2) % 2 == 1 && kernel.dim(3) % 2 == 1,
                "conv2d: kernel extents must be odd");
    T3D_REQUIRE(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
    ConvDims d;
    d.C = x.dim(0);
    d.H = x.dim(1);
    d.W = x.dim(2);
    d.O = kernel.dim(0);
    d.kh = kernel.dim(2);
    d.kw = kernel.dim(3);
    d.stride = stride;
    d.pad = padding;
    d.OH = (d.H + 2 * padding - d.kh) / stride + 1;
    d.OW = (d.W + 2 * padding - d.kw) / stride + 1;
    T3D_REQUIRE(d.OH >= 1 && d.OW >= 1, "conv2d: output would be empty");

    Tensor out = detail::make_op_output(
        {d.O, d.OH, d.OW}, "conv2d", {x, kernel},
        [d](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            if (double* gx = detail::grad_sink(parents[0]))
                conv_backward_x(d, parents[1].ptr(), g, gx);
            if (double* gk = detail::grad_sink(parents[1]))
                conv_backward_k(d, parents[0].ptr(), g, gk);
        });
    conv_forward(d, x.ptr(), kernel.ptr(), out.ptr());
    maybe_check(out, "conv2d");
    return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    T3D_REQUIRE(x.ndim() == 3 && b.ndim() == 1 && b.dim(0) == x.dim(0),
                "add_channel_bias: want [C,H,W] + [C]");
    const std::int64_t C = x.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    Tensor out = detail::make_op_output(
        x.shape(), "add_channel_bias", {x, b},
        [C, plane](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            if (double* gx = detail::grad_sink(parents[0])) {
                parallel_for(o.numel, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) gx[i] += g[i];
                });
            }
            if (double* gb = detail::grad_sink(parents[1])) {
                parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
                    for (std::int64_t c = c0; c < c1; ++c) {
                        double s = 0.0;
                        const double* gc = g + c * plane;
                        for (std::int64_t i = 0; i < plane; ++i) s += gc[i];
                        gb[c] += s;
                    }
                });
            }
        });
    const double* xd = x.ptr();
    const double* bd = b.ptr();
    double* yd = out.ptr();
    parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
            const double bv = bd[c];
            const double* xc = xd + c * plane;
            double* yc = yd + c * plane;
            for (std::int64_t i = 0; i < plane; ++i) yc[i] = xc[i] + bv;
        }
    });
    maybe_check(out, "add_channel_bias");
    return out;
}

Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    T3D_REQUIRE(x.ndim() == 3 && scale.ndim() == 1 && shift.ndim() == 1 &&
                    scale.dim(0) == x.dim(0) && shift.dim(0) == x.dim(0),
                "channel_affine: want [C,H,W], [C], [C]");
    const std::int64_t C = x.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    Tensor out = detail::make_op_output(
        x.shape(), "channel_affine", {x, scale, shift},
        [C, plane](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            const double* xd = parents[0].ptr();
            const double* sd = parents[1].ptr();
            if (double* gx = detail::grad_sink(parents[0])) {
                parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
                    for (std::int64_t c = c0; c < c1; ++c) {
                        const double sv = 1.0 + sd[c];
                        const double* gc = g + c * plane;
                        double* gxc = gx + c * plane;
                        for (std::int64_t i = 0; i < plane; ++i) gxc[i] += gc[i] * sv;
                    }
                });
            }
            double* gs = detail::grad_sink(parents[1]);
            double* gt = detail::grad_sink(parents[2]);
            if (gs || gt) {
                parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
                    for (std::int64_t c = c0; c < c1; ++c) {
                        const double* gc = g + c * plane;
                        const double* xc = xd + c * plane;
                        double ss = 0.0, st = 0.0;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            ss += gc[i] * xc[i];
                            st += gc[i];
                        }
                        if (gs) gs[c] += ss;
                        if (gt) gt[c] += st;
                    }
                });
            }
        });
    const double* xd = x.ptr();
    const double* sd = scale.ptr();
    const double* td = shift.ptr();
    double* yd = out.ptr();
    parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
            const double sv = 1.0 + sd[c];
            const double tv = td[c];
            const double* xc = xd + c * plane;
            double* yc = yd + c * plane;
            for (std::int64_t i = 0; i < plane; ++i) yc[i] = xc[i] * sv + tv;
        }
    });
    maybe_check(out, "channel_affine");
    return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
    T3D_REQUIRE(x.ndim() == 3, "upsample_nearest2x: want [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor out = detail::make_op_output(
        {C, 2 * H, 2 * W}, "upsample_nearest2x", {x},
        [C, H, W](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double* g = o.grad.data();
            parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
                for (std::int64_t c = c0; c < c1; ++c) {
                    for (int y = 0; y < H; ++y)
                        for (int xx = 0; xx < W; ++xx) {
                            const std::int64_t base =
                                ((c * 2 * H + 2 * y) * 2 * W) + 2 * xx;
                            gx[(c * H + y) * W + xx] +=
                                g[base] + g[base + 1] + g[base + 2 * W] + g[base + 2 * W + 1];
                        }
                }
            });
        });
    const double* xd = x.ptr();
    double* yd = out.ptr();
    parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    const double v = xd[(c * H + y) * W + xx];
                    const std::int64_t base = ((c * 2 * H + 2 * y) * 2 * W) + 2 * xx;
                    yd[base] = v;
                    yd[base + 1] = v;
                    yd[base + 2 * W] = v;
                    yd[base + 2 * W + 1] = v;
                }
    });
    return out;
}

Tensor crop_hw(const Tensor& x, int y0, int y1, int x0, int x1) {
    T3D_REQUIRE(x.ndim() == 3, "crop_hw: want [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    T3D_REQUIRE(0 <= y0 && y0 < y1 && y1 <= H && 0 <= x0 && x0 < x1 && x1 <= W,
                "crop_hw: bad window");
    const int oh = y1 - y0, ow = x1 - x0;
    Tensor out = detail::make_op_output(
        {C, oh, ow}, "crop_hw", {x},
        [C, H, W, y0, x0, oh, ow](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double* g = o.grad.data();
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx)
                        gx[(static_cast<std::int64_t>(c) * H + (y0 + y)) * W + (x0 + xx)] +=
                            g[(static_cast<std::int64_t>(c) * oh + y) * ow + xx];
        });
    const double* xd = x.ptr();
    double* yd = out.ptr();
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < oh; ++y)
            std::memcpy(yd + (static_cast<std::int64_t>(c) * oh + y) * ow,
                        xd + (static_cast<std::int64_t>(c) * H + (y0 + y)) * W + x0,
                        sizeof(double) * static_cast<std::size_t>(ow));
    return out;
}

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
    T3D_REQUIRE(x.ndim() == 3 && out_h >= 1 && out_w >= 1, "resize_bilinear: want [C,H,W]");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const double sy = out_h > 1 ? static_cast<double>(H - 1) / (out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(W - 1) / (out_w - 1) : 0.0;
    Tensor out = detail::make_op_output(
        {C, out_h, out_w}, "resize_bilinear", {x},
        [C, H, W, out_h, out_w, sy, sx](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double* g = o.grad.data();
            parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
                for (std::int64_t c = c0; c < c1; ++c) {
                    double* gxc = gx + c * H * W;
                    const double* gc = g + c * out_h * out_w;
                    for (int y = 0; y < out_h; ++y) {
                        const double fy = y * sy;
                        const int y0 = std::min(static_cast<int>(fy), H - 1);
                        const int y1 = std::min(y0 + 1, H - 1);
                        const double wy = fy - y0;
                        for (int xx = 0; xx < out_w; ++xx) {
                            const double fx = xx * sx;
                            const int x0 = std::min(static_cast<int>(fx), W - 1);
                            const int x1 = std::min(x0 + 1, W - 1);
                            const double wx = fx - x0;
                            const double gv = gc[y * out_w + xx];
                            gxc[y0 * W + x0] += gv * (1 - wy) * (1 - wx);
                            gxc[y0 * W + x1] += gv * (1 - wy) * wx;
                            gxc[y1 * W + x0] += gv * wy * (1 - wx);
                            gxc[y1 * W + x1] += gv * wy * wx;
                        }
                    }
                }
            });
        });
    const double* xd = x.ptr();
    double* yd = out.ptr();
    parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
            const double* xc = xd + c * H * W;
            double* yc = yd + c * out_h * out_w;
            for (int y = 0; y < out_h; ++y) {
                const double fy = y * sy;
                const int y0 = std::min(static_cast<int>(fy), H - 1);
                const int y1 = std::min(y0 + 1, H - 1);
                const double wy = fy - y0;
                for (int xx = 0; xx < out_w; ++xx) {
                    const double fx = xx * sx;
                    const int x0 = std::min(static_cast<int>(fx), W - 1);
                    const int x1 = std::min(x0 + 1, W - 1);
                    const double wx = fx - x0;
                    yc[y * out_w + xx] = xc[y0 * W + x0] * (1 - wy) * (1 - wx) +
                                         xc[y0 * W + x1] * (1 - wy) * wx +
                                         xc[y1 * W + x0] * wy * (1 - wx) +
                                         xc[y1 * W + x1] * wy * wx;
                }
            }
        }
    });
    maybe_check(out, "resize_bilinear");
    return out;
}

Tensor mean_hw(const Tensor& x) {
    T3D_REQUIRE(x.ndim() == 3, "mean_hw: want [C,H,W]");
    const std::int64_t C = x.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    const double inv = 1.0 / static_cast<double>(plane);
    Tensor out = detail::make_op_output(
        {static_cast<int>(C)}, "mean_hw", {x},
        [C, plane, inv](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double* g = o.grad.data();
            parallel_for(C, [&](std::int64_t c0, std::int64_t c1) {
                for (std::int64_t c = c0; c < c1; ++c) {
                    const double gv = g[c] * inv;
                    double* gxc = gx + c * plane;
                    for (std::int64_t i = 0; i < plane; ++i) gxc[i] += gv;
                }
            });
        });
    const double* xd = x.ptr();
    double* yd = out.ptr();
    for (std::int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        const double* xc = xd + c * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += xc[i];
        yd[c] = s * inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    const int nd = x.ndim();
    T3D_REQUIRE(axis >= 0 && axis < nd, "softmax: bad axis");
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < nd; ++d) inner *= x.dim(d);
    const std::int64_t n = x.dim(axis);
    T3D_REQUIRE(n >= 1, "softmax: empty axis");

    Tensor out = detail::make_op_output(
        x.shape(), "softmax", {x},
        [outer, inner, n](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gx = detail::grad_sink(parents[0]);
            if (!gx) return;
            const double* g = o.grad.data();
            const double* y = o.data.data();
            parallel_for(outer * inner, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t r = lo; r < hi; ++r) {
                    const std::int64_t ou = r / inner, in = r % inner;
                    const std::int64_t base = ou * n * inner + in;
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < n; ++i)
                        dot += g[base + i * inner] * y[base + i * inner];
                    for (std::int64_t i = 0; i < n; ++i)
                        gx[base + i * inner] +=
                            y[base + i * inner] * (g[base + i * inner] - dot);
                }
            });
        });

    const double* xd = x.ptr();
    double* yd = out.ptr();
    parallel_for(outer * inner, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
            const std::int64_t ou = r / inner, in = r % inner;
            const std::int64_t base = ou * n * inner + in;
            double mx = xd[base];
            for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xd[base + i * inner]);
            double s = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const double e = fast_exp(xd[base + i * inner] - mx);
                yd[base + i * inner] = e;
                s += e;
            }
            const double invs = 1.0 / s;
            for (std::int64_t i = 0; i < n; ++i) yd[base + i * inner] *= invs;
        }
    });
    maybe_check(out, "softmax");
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    T3D_REQUIRE(x.ndim() == 2 && gamma.ndim() == 1 && beta.ndim() == 1 &&
                    gamma.dim(0) == x.dim(1) && beta.dim(0) == x.dim(1),
                "layer_norm: want [n,d], [d], [d]");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    constexpr double eps = 1e-5;

    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(2 * n));
    Tensor out = detail::make_op_output(
        x.shape(), "layer_norm", {x, gamma, beta},
        [n, d, stats](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            const double* xd = parents[0].ptr();
            const double* gm = parents[1].ptr();
            double* gx = detail::grad_sink(parents[0]);
            double* gg = detail::grad_sink(parents[1]);
            double* gb = detail::grad_sink(parents[2]);
            for (std::int64_t r = 0; r < n; ++r) {
                const double mu = (*stats)[static_cast<std::size_t>(2 * r)];
                const double rstd = (*stats)[static_cast<std::size_t>(2 * r + 1)];
                const double* xr = xd + r * d;
                const double* gr = g + r * d;
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const double xhat = (xr[j] - mu) * rstd;
                    const double dxhat = gr[j] * gm[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                    if (gg) gg[j] += gr[j] * xhat;
                    if (gb) gb[j] += gr[j];
                }
                mean_dxhat /= static_cast<double>(d);
                mean_dxhat_xhat /= static_cast<double>(d);
                if (gx) {
                    double* gxr = gx + r * d;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mu) * rstd;
                        const double dxhat = gr[j] * gm[j];
                        gxr[j] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        });

    const double* xd = x.ptr();
    const double* gm = gamma.ptr();
    const double* bt = beta.ptr();
    double* yd = out.ptr();
    for (std::int64_t r = 0; r < n; ++r) {
        const double* xr = xd + r * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        (*stats)[static_cast<std::size_t>(2 * r)] = mu;
        (*stats)[static_cast<std::size_t>(2 * r + 1)] = rstd;
        double* yr = yd + r * d;
        for (std::int64_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rstd * gm[j] + bt[j];
    }
    maybe_check(out, "layer_norm");
    return out;
}

// ---------------------------------------------------------------------------
// grid_sample_bilinear
// ---------------------------------------------------------------------------

Tensor grid_sample_bilinear(const Tensor& plane, const Tensor& uv) {
    T3D_REQUIRE(plane.ndim() == 3 && plane.dim(1) == plane.dim(2),
                "grid_sample: want plane [C,R,R]");
    T3D_REQUIRE(uv.ndim() == 2 && uv.dim(1) == 2, "grid_sample: want uv [N,2]");
    T3D_REQUIRE(!uv.requires_grad(), "grid_sample: gradients to uv are not supported");
    const int C = plane.dim(0), R = plane.dim(1);
    const std::int64_t N = uv.dim(0);
    const std::int64_t plane_sz = static_cast<std::int64_t>(R) * R;

    // clamp to [0, R-1]; grid nodes sit at the domain corners
    auto to_grid = [R](double v) {
        double g = (v + 1.0) * 0.5 * (R - 1);
        if (g < 0.0) g = 0.0;
        if (g > R - 1) g = R - 1;
        return g;
    };

    Tensor out = detail::make_op_output(
        {static_cast<int>(N), C}, "grid_sample", {plane, uv},
        [C, R, N, plane_sz, to_grid](const TensorImpl& o, const std::vector<Tensor>& parents) {
            double* gp = detail::grad_sink(parents[0]);
            if (!gp) return;
            const double* g = o.grad.data();
            const double* uvd = parents[1].ptr();
            // fixed-chunk scatter: per-chunk plane buffers combined in chunk
            // order, so the result is thread-count independent
            const std::int64_t chunk = (N + kReduceChunks - 1) / kReduceChunks;
            const int nchunks = static_cast<int>(chunk > 0 ? (N + chunk - 1) / chunk : 0);
            if (nchunks == 0) return;
            const std::int64_t psize = static_cast<std::int64_t>(C) * plane_sz;
            std::vector<double> partial(static_cast<std::size_t>(nchunks) * psize, 0.0);
            parallel_for(nchunks, [&](std::int64_t c0, std::int64_t c1) {
                for (std::int64_t ch = c0; ch < c1; ++ch) {
                    double* part = partial.data() + ch * psize;
                    const std::int64_t lo = ch * chunk, hi = std::min(N, lo + chunk);
                    for (std::int64_t i = lo; i < hi; ++i) {
                        const double gx = to_grid(uvd[2 * i]);
                        const double gy = to_grid(uvd[2 * i + 1]);
                        const int x0 = std::min(static_cast<int>(gx), R - 2 >= 0 ? R - 2 : 0);
                        const int y0 = std::min(static_cast<int>(gy), R - 2 >= 0 ? R - 2 : 0);
                        const double wx = gx - x0, wy = gy - y0;
                        const std::int64_t b00 = static_cast<std::int64_t>(y0) * R + x0;
                        for (int c = 0; c < C; ++c) {
                            const double gv = g[i * C + c];
                            double* pc = part + c * plane_sz + b00;
                            pc[0] += gv * (1 - wy) * (1 - wx);
                            if (R > 1) {
                                pc[1] += gv * (1 - wy) * wx;
                                pc[R] += gv * wy * (1 - wx);
                                pc[R + 1] += gv * wy * wx;
                            }
                        }
                    }
                }
            });
            parallel_for(psize, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i) {
                    double s = 0.0;
                    for (int ch = 0; ch < nchunks; ++ch) s += partial[ch * psize + i];
                    gp[i] += s;
                }
            });
        });

    const double* pd = plane.ptr();
    const double* uvd = uv.ptr();
    double* yd = out.ptr();
    parallel_for(N, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const double gx = to_grid(uvd[2 * i]);
            const double gy = to_grid(uvd[2 * i + 1]);
            const int x0 = std::min(static_cast<int>(gx), R - 2 >= 0 ? R - 2 : 0);
            const int y0 = std::min(static_cast<int>(gy), R - 2 >= 0 ? R - 2 : 0);
            const double wx = gx - x0, wy = gy - y0;
            const std::int64_t b00 = static_cast<std::int64_t>(y0) * R + x0;
            for (int c = 0; c < C; ++c) {
                const double* pc = pd + c * plane_sz + b00;
                double v;
                if (R > 1) {
                    v = pc[0] * (1 - wy) * (1 - wx) + pc[1] * (1 - wy) * wx +
                        pc[R] * wy * (1 - wx) + pc[R + 1] * wy * wx;
                } else {
                    v = pc[0];
                }
                yd[i * C + c] = v;
            }
        }
    });
    maybe_check(out, "grid_sample");
    return out;
}

// ---------------------------------------------------------------------------
// Volume compositing
// ---------------------------------------------------------------------------

void composite_ray_core(const double* sigma, const double* feats, const double* ts,
                        const double* deltas, int S, int F, double* out_feat,
                        double* out_depth, double* out_tfinal, double* save_w) {
    for (int f = 0; f < F; ++f) out_feat[f] = 0.0;
    double T = 1.0;
    double depth_num = 0.0;
    double wsum = 0.0;
    for (int i = 0; i < S; ++i) {
        const double alpha = 1.0 - fast_exp(-sigma[i] * deltas[i]);
        const double w = T * alpha;
        if (save_w) save_w[i] = w;
        const double* fi = feats + static_cast<std::int64_t>(i) * F;
        for (int f = 0; f < F; ++f) out_feat[f] += w * fi[f];
        depth_num += w * ts[i];
        wsum += w;
        T *= (1.0 - alpha);
    }
    *out_depth = depth_num / (wsum + 1e-8);
    *out_tfinal = T;
}

CompositeResult composite(const Tensor& sigma, const Tensor& feats,
                          const std::vector<std::int64_t>& offsets,
                          const std::vector<double>& ts, const std::vector<double>& deltas) {
    T3D_REQUIRE(sigma.ndim() == 1 && feats.ndim() == 2 && feats.dim(0) == sigma.dim(0),
                "composite: want sigma [P], feats [P,F]");
    T3D_REQUIRE(!offsets.empty() && offsets.back() == sigma.numel(),
                "composite: offsets must cover all samples");
    T3D_REQUIRE(ts.size() == static_cast<std::size_t>(sigma.numel()) && deltas.size() == ts.size(),
                "composite: ts/deltas size mismatch");
    const std::int64_t n_rays = static_cast<std::int64_t>(offsets.size()) - 1;
    const int F = feats.dim(1);

    auto off = std::make_shared<std::vector<std::int64_t>>(offsets);
    auto tsp = std::make_shared<std::vector<double>>(ts);
    auto dlp = std::make_shared<std::vector<double>>(deltas);

    CompositeResult res;
    res.depth.assign(static_cast<std::size_t>(n_rays), 0.0);
    res.t_final.assign(static_cast<std::size_t>(n_rays), 1.0);

    res.features = detail::make_op_output(
        {static_cast<int>(n_rays), F}, "composite", {sigma, feats},
        [n_rays, F, off, tsp, dlp](const TensorImpl& o, const std::vector<Tensor>& parents) {
            const double* g = o.grad.data();
            const double* sig = parents[0].ptr();
            const double* ft = parents[1].ptr();
            double* gsig = detail::grad_sink(parents[0]);
            double* gft = detail::grad_sink(parents[1]);
            if (!gsig && !gft) return;
            parallel_for(n_rays, [&](std::int64_t r0, std::int64_t r1) {
                std::vector<double> wv, gdotf, Tnext;
                for (std::int64_t r = r0; r < r1; ++r) {
                    const std::int64_t lo = (*off)[static_cast<std::size_t>(r)];
                    const std::int64_t hi = (*off)[static_cast<std::size_t>(r + 1)];
                    const int S = static_cast<int>(hi - lo);
                    if (S == 0) continue;
                    const double* gr = g + r * F;
                    // recompute alphas/transmittances exactly as in forward
                    double T = 1.0;
                    wv.resize(static_cast<std::size_t>(S));
                    gdotf.resize(static_cast<std::size_t>(S));
                    Tnext.resize(static_cast<std::size_t>(S));
                    for (int i = 0; i < S; ++i) {
                        const double alpha =
                            1.0 - fast_exp(-sig[lo + i] * (*dlp)[static_cast<std::size_t>(lo + i)]);
                        wv[static_cast<std::size_t>(i)] = T * alpha;
                        T *= (1.0 - alpha);
                        Tnext[static_cast<std::size_t>(i)] = T;
                        const double* fi = ft + (lo + i) * F;
                        double dot = 0.0;
                        for (int f = 0; f < F; ++f) dot += gr[f] * fi[f];
                        gdotf[static_cast<std::size_t>(i)] = dot;
                    }
                    if (gft) {
                        for (int i = 0; i < S; ++i) {
                            double* gf = gft + (lo + i) * F;
                            const double w = wv[static_cast<std::size_t>(i)];
                            for (int f = 0; f < F; ++f) gf[f] += w * gr[f];
                        }
                    }
                    if (gsig) {
                        double suffix = 0.0;
                        for (int i = S - 1; i >= 0; --i) {
                            const double d = (*dlp)[static_cast<std::size_t>(lo + i)];
                            gsig[lo + i] +=
                                d * (gdotf[static_cast<std::size_t>(i)] *
                                         Tnext[static_cast<std::size_t>(i)] -
                                     suffix);
                            suffix += gdotf[static_cast<std::size_t>(i)] *
                                      wv[static_cast<std::size_t>(i)];
                        }
                    }
                }
            });
        });

    const double* sig = sigma.ptr();
    const double* ft = feats.ptr();
    double* outF = res.features.ptr();
    double* dep = res.depth.data();
    double* tf = res.t_final.data();
    parallel_for(n_rays, [&](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
            const std::int64_t lo = offsets[static_cast<std::size_t>(r)];
            const std::int64_t hi = offsets[static_cast<std::size_t>(r + 1)];
            const int S = static_cast<int>(hi - lo);
            if (S == 0) {
                for (int f = 0; f < F; ++f) outF[r * F + f] = 0.0;
                dep[r] = 0.0;
                tf[r] = 1.0;
                continue;
            }
            composite_ray_core(sig + lo, ft + lo * F, ts.data() + lo, deltas.data() + lo, S, F,
                               outF + r * F, dep + r, tf + r);
        }
    });
    maybe_check(res.features, "composite");
    return res;
}

}  // namespace talk3d::ad
