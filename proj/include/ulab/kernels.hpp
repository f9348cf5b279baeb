#pragma once

// Row-oriented numeric kernels shared by the differentiable ops and the
// incremental decoder. Every output element is accumulated in a fixed
// index order that does not depend on the number of rows, so a row computed
// inside a long sequence is bit-identical to the same row computed in a
// shorter prefix.

#include <cstddef>

namespace ulab::kernels {

// c[m x n] += a[m x k] * b[k x n]
void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n);

// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n);

// c[k x n] += a[m x k]^T * g[m x n]
void matmul_tn_acc(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                   std::size_t n);

// out[n x k] = in[k x n]^T
void transpose(const double* in, double* out, std::size_t k, std::size_t n);

double gelu(double x);
double gelu_grad(double x);

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes one row; writes the normalized (pre-affine) values to xhat and
// returns the reciprocal standard deviation.
double layer_norm_row(const double* x, double* xhat, std::size_t n);

// Softmax over the first `len` entries of a row; entries past `len` are set
// to zero (causal masking).
void softmax_prefix(const double* x, double* y, std::size_t len, std::size_t n);

}  // namespace ulab::kernels
