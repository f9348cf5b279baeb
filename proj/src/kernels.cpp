#include "ulab/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace ulab::kernels {

namespace {

constexpr std::size_t kRowBlock = 4;

typedef double Vec8 __attribute__((vector_size(64)));
constexpr std::size_t kLanes = 8;
constexpr std::size_t kColBlock = 2 * kLanes;

inline Vec8 load(const double* p) {
  Vec8 v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}
inline void store(double* p, Vec8 v) { __builtin_memcpy(p, &v, sizeof(v)); }

// c[0..4)[0..16) += a[0..4)[0..k) * b[0..k)[0..16); a rows are lda apart,
// b and c rows n apart. Each element sums over p in order.
void tile(const double* a, std::size_t lda, const double* b, double* c, std::size_t k, std::size_t n) {
  Vec8 c00 = load(c), c01 = load(c + kLanes);
  Vec8 c10 = load(c + n), c11 = load(c + n + kLanes);
  Vec8 c20 = load(c + 2 * n), c21 = load(c + 2 * n + kLanes);
  Vec8 c30 = load(c + 3 * n), c31 = load(c + 3 * n + kLanes);
  for (std::size_t p = 0; p < k; ++p) {
    const Vec8 b0 = load(b + p * n), b1 = load(b + p * n + kLanes);
    const double s0 = a[p], s1 = a[lda + p], s2 = a[2 * lda + p], s3 = a[3 * lda + p];
    c00 += s0 * b0;
    c01 += s0 * b1;
    c10 += s1 * b0;
    c11 += s1 * b1;
    c20 += s2 * b0;
    c21 += s2 * b1;
    c30 += s3 * b0;
    c31 += s3 * b1;
  }
  store(c, c00);
  store(c + kLanes, c01);
  store(c + n, c10);
  store(c + n + kLanes, c11);
  store(c + 2 * n, c20);
  store(c + 2 * n + kLanes, c21);
  store(c + 3 * n, c30);
  store(c + 3 * n + kLanes, c31);
}

// Depth chunk: keeps a 16-column strip of b within L1.
constexpr std::size_t kDepthBlock = 256;

}  // namespace

void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
  for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
    const std::size_t kk = std::min(kDepthBlock, k - p0);
    const double* bp0 = b + p0 * n;
    std::size_t j0 = 0;
    for (; j0 + kColBlock <= n; j0 += kColBlock) {
      std::size_t i = 0;
      for (; i + kRowBlock <= m; i += kRowBlock) tile(a + i * k + p0, k, bp0 + j0, c + i * n + j0, kk, n);
      for (; i < m; ++i)
        for (std::size_t p = 0; p < kk; ++p) {
          const double s = a[i * k + p0 + p];
          const double* bp = bp0 + p * n + j0;
          double* ci = c + i * n + j0;
          for (std::size_t j = 0; j < kColBlock; ++j) ci[j] += s * bp[j];
        }
    }
    if (j0 == n) continue;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < kk; ++p) {
        const double s = a[i * k + p0 + p];
        const double* bp = bp0 + p * n;
        double* ci = c + i * n;
        for (std::size_t j = j0; j < n; ++j) ci[j] += s * bp[j];
      }
  }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = s;
    }
  }
}

void matmul_tn_acc(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  // A 4 x 16 tile of c stays in registers while the m input rows stream
  // past it; each element still sums over i in increasing order.
  std::size_t p0 = 0;
  for (; p0 + kRowBlock <= k; p0 += kRowBlock) {
    double* c0 = c + p0 * n;
    std::size_t j0 = 0;
    for (; j0 + kColBlock <= n; j0 += kColBlock) {
      Vec8 c00 = load(c0 + j0), c01 = load(c0 + j0 + kLanes);
      Vec8 c10 = load(c0 + n + j0), c11 = load(c0 + n + j0 + kLanes);
      Vec8 c20 = load(c0 + 2 * n + j0), c21 = load(c0 + 2 * n + j0 + kLanes);
      Vec8 c30 = load(c0 + 3 * n + j0), c31 = load(c0 + 3 * n + j0 + kLanes);
      for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k + p0;
        const Vec8 g0 = load(g + i * n + j0), g1 = load(g + i * n + j0 + kLanes);
        const double s0 = ai[0], s1 = ai[1], s2 = ai[2], s3 = ai[3];
        c00 += s0 * g0;
        c01 += s0 * g1;
        c10 += s1 * g0;
        c11 += s1 * g1;
        c20 += s2 * g0;
        c21 += s2 * g1;
        c30 += s3 * g0;
        c31 += s3 * g1;
      }
      store(c0 + j0, c00);
      store(c0 + j0 + kLanes, c01);
      store(c0 + n + j0, c10);
      store(c0 + n + j0 + kLanes, c11);
      store(c0 + 2 * n + j0, c20);
      store(c0 + 2 * n + j0 + kLanes, c21);
      store(c0 + 3 * n + j0, c30);
      store(c0 + 3 * n + j0 + kLanes, c31);
    }
    if (j0 < n)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t r = 0; r < kRowBlock; ++r) {
          const double s = a[i * k + p0 + r];
          const double* gi = g + i * n;
          double* cp = c0 + r * n;
          for (std::size_t j = j0; j < n; ++j) cp[j] += s * gi[j];
        }
  }
  for (; p0 < k; ++p0) {
    double* cp = c + p0 * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double s = a[i * k + p0];
      const double* gi = g + i * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += s * gi[j];
    }
  }
}

void transpose(const double* in, double* out, std::size_t k, std::size_t n) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t p0 = 0; p0 < k; p0 += kBlock) {
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t p1 = std::min(k, p0 + kBlock);
      const std::size_t j1 = std::min(n, j0 + kBlock);
      for (std::size_t p = p0; p < p1; ++p)
        for (std::size_t j = j0; j < j1; ++j) out[j * k + p] = in[p * n + j];
    }
  }
}

namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCoeff = 0.044715;
}  // namespace

// tanh approximation
double gelu(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCoeff * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double layer_norm_row(const double* x, double* xhat, std::size_t n) {
  double mean = 0.0;
  for (std::size_t j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t j = 0; j < n; ++j) xhat[j] = (x[j] - mean) * rstd;
  return rstd;
}

void softmax_prefix(const double* x, double* y, std::size_t len, std::size_t n) {
  double mx = x[0];
  for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < len; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < len; ++j) y[j] *= inv;
  for (std::size_t j = len; j < n; ++j) y[j] = 0.0;
}

}  // namespace ulab::kernels
