#pragma once

// Low-level float kernels shared by the autodiff ops and the cached
// (incremental) inference path, so both routes run identical arithmetic for
// everything except the attention reduction.

#include <cstddef>
#include <cstdint>
#include <span>

namespace kvc::kernels {

enum class Trans : std::uint8_t { No, Yes };

// C[m×n] (+)= op(A) · op(B). Matrices are row-major with leading dimensions
// lda/ldb/ldc. accumulate=false overwrites C.
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc,
          bool accumulate = false, float alpha = 1.0f);

float dot(const float* a, const float* b, std::size_t n);
// y += alpha * x
void axpy(float alpha, const float* x, float* y, std::size_t n);

// Row-wise layer norm over `cols`. mean/rstd may be null.
void layernorm_rows(const float* x, const float* gamma, const float* beta, float* out, std::size_t rows,
                    std::size_t cols, float eps, float* mean, float* rstd);

float gelu(float x);
float gelu_grad(float x);

// In-place rotary rotation of one row holding n_heads heads of d_head values.
// Pairs (2i, 2i+1) of each head rotate by pos * base^(-2i/d_head); sign=-1
// applies the inverse rotation (used for the backward pass).
void rotary_row(float* row, std::size_t n_heads, std::size_t d_head, std::int64_t pos, double base,
                int sign = 1);

// Numerically stable softmax over the entries where keep[i] != 0; dropped
// entries become exactly 0. Returns false when nothing is kept.
bool softmax_masked(const float* logits, const std::uint8_t* keep, float* out, std::size_t n);

}  // namespace kvc::kernels
