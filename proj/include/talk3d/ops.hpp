#pragma once

#include "talk3d/tensor.hpp"

namespace talk3d::ad {

// Elementwise (same-shape unless noted).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);

// Reductions to scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);        // [m,k]x[k,n]
Tensor transpose2d(const Tensor& a);                    // [m,n]->[n,m]

/// Fused x*W + b with an optional activation; the workhorse of the field
/// decoder and token encoders (one output pass instead of three).
enum class Act { none, silu };
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Act act = Act::none);
Tensor add_row_bias(const Tensor& x, const Tensor& b);  // [n,d]+[d]
Tensor row_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);  // x*(1+s)+t per column

// Shape plumbing.
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice_axis0(const Tensor& a, int begin, int end);

// Image ops on [C,H,W].
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int padding);
Tensor add_channel_bias(const Tensor& x, const Tensor& b);                       // [C,H,W]+[C]
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);  // x*(1+s)+t per channel
Tensor upsample_nearest2x(const Tensor& x);
Tensor crop_hw(const Tensor& x, int y0, int y1, int x0, int x1);
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);
Tensor mean_hw(const Tensor& x);  // [C,H,W]->[C]

// Attention / field pieces.
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);  // rows of [n,d]

/// Bilinear sample of plane [C,R,R] at uv [N,2] in [-1,1]^2 (border clamp,
/// grid nodes at the corners). Gradients flow to the plane only.
Tensor grid_sample_bilinear(const Tensor& plane, const Tensor& uv);

/// Emission-absorption compositing of ragged per-ray samples. Inputs are
/// flattened ray-major: sigma [P], feats [P,F]; offsets has n_rays+1 entries.
/// Returns the feature map [n_rays, F]; depth and residual transmittance are
/// plain (non-differentiated) side outputs.
struct CompositeResult {
    Tensor features;              // [n_rays, F]
    std::vector<double> depth;    // expectation of sample depth under weights
    std::vector<double> t_final;  // residual transmittance per ray
};
CompositeResult composite(const Tensor& sigma, const Tensor& feats,
                          const std::vector<std::int64_t>& offsets,
                          const std::vector<double>& ts, const std::vector<double>& deltas);

/// The shared per-ray compositing contract (used by both the model path and
/// the analytic oracle). If save_w is non-null it receives the S weights.
void composite_ray_core(const double* sigma, const double* feats, const double* ts,
                        const double* deltas, int S, int F, double* out_feat,
                        double* out_depth, double* out_tfinal, double* save_w = nullptr);

// Raw kernels (deterministic for a fixed thread/chunk layout).
void gemm_nn(std::int64_t m, std::int64_t k, std::int64_t n, const double* A, const double* B,
             double* C);  // C = A*B
void gemm_nn_accum(std::int64_t m, std::int64_t k, std::int64_t n, const double* A,
                   const double* B, double* C);  // C += A*B
void gemm_nt(std::int64_t m, std::int64_t k, std::int64_t n, const double* A, const double* B,
             double* C);  // C[m,n] = A[m,k] * B[n,k]^T
void gemm_nt_accum(std::int64_t m, std::int64_t k, std::int64_t n, const double* A,
                   const double* B, double* C);  // C += A * B^T
void gemm_tn_accum(std::int64_t m, std::int64_t k, std::int64_t n, const double* A,
                   const double* B, double* C);  // C[k,n] += A[m,k]^T * B[m,n]

}  // namespace talk3d::ad
