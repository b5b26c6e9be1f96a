#pragma once

// Differentiable operations recorded on a Tape. The set is closed: anything
// the model needs is expressed through these.

#include <cstddef>
#include <span>
#include <vector>

#include "cil/tensor.hpp"

namespace cil {

// Elementwise binary ops broadcast numpy-style (right-aligned, size-1 dims stretch).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var add_scalar(Var x, double c);
Var mul_scalar(Var x, double c);
Var neg(Var x);

Var exp(Var x);
Var log(Var x);
Var relu(Var x);
/// Exact (erf) GELU.
Var gelu(Var x);

Var sum(Var x);
Var sum(Var x, int axis, bool keepdim = false);
Var mean(Var x);
Var mean(Var x, int axis, bool keepdim = false);
/// Reduce-max along an axis. Gradient routes to the first maximal element.
Var max(Var x, int axis, bool keepdim = false);

Var reshape(Var x, Shape shape);
Var permute(Var x, std::vector<std::size_t> axes);
Var transpose(Var x, std::size_t axis0, std::size_t axis1);
Var concat(std::span<const Var> parts, int axis);
Var slice(Var x, int axis, std::size_t start, std::size_t length);

/// [..., k] x [k, n] -> [..., n]. Leading dims of `a` are flattened into rows.
Var matmul(Var a, Var b);
/// Batched product [B, m, k] x [B, k, n] -> [B, m, n].
Var bmm(Var a, Var b);
/// x [b, c_in, h, w], kernel [c_out, c_in, kh, kw] -> [b, c_out, h', w'].
Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t padding);

/// Max-subtracted softmax along `axis`.
Var softmax(Var x, int axis = -1);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-6);

enum class BatchNormMode { train, eval };

/// Per-channel batch mean and unbiased variance observed in a train-mode pass.
struct BatchStats {
  std::vector<double> mean, var;
};

/// Per-channel normalization of [b, c, ...]. Train mode normalizes with batch
/// statistics and reports them through `observed` (if given); eval mode uses
/// the running buffers. Buffers are never modified here.
Var batch_norm(Var x, Var gain, Var bias, const Tensor& running_mean, const Tensor& running_var,
               BatchNormMode mode, BatchStats* observed = nullptr, double eps = 1e-5);

/// running = (1 - momentum) * running + momentum * observed.
void update_running_stats(Tensor& running_mean, Tensor& running_var, const BatchStats& observed,
                          double momentum = 0.1);

/// x / max(||x||, eps) along `axis`. Rows under the guard are counted in the
/// tape diagnostics.
Var l2_normalize(Var x, int axis = -1, double eps = 1e-12);

namespace kernels {
// C[m,n] (+)= op(A) * op(B), row-major, used by matmul/bmm/conv2d.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);
}  // namespace kernels

}  // namespace cil
