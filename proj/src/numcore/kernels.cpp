#include "kvc/kernels.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>

namespace kvc::kernels {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

}  // namespace

void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate,
          float alpha) {
    if (m == 0 || n == 0) {
        return;
    }
    MutMap cm(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n),
              Eigen::OuterStride<>(static_cast<Eigen::Index>(ldc)));
    if (k == 0) {
        if (!accumulate) {
            cm.setZero();
        }
        return;
    }
    const auto rows_a = static_cast<Eigen::Index>(trans_a == Trans::No ? m : k);
    const auto cols_a = static_cast<Eigen::Index>(trans_a == Trans::No ? k : m);
    const auto rows_b = static_cast<Eigen::Index>(trans_b == Trans::No ? k : n);
    const auto cols_b = static_cast<Eigen::Index>(trans_b == Trans::No ? n : k);
    ConstMap am(a, rows_a, cols_a, Eigen::OuterStride<>(static_cast<Eigen::Index>(lda)));
    ConstMap bm(b, rows_b, cols_b, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldb)));

    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate) {
            cm.noalias() += alpha * (lhs * rhs);
        } else {
            cm.noalias() = alpha * (lhs * rhs);
        }
    };
    if (trans_a == Trans::No && trans_b == Trans::No) {
        run(am, bm);
    } else if (trans_a == Trans::No) {
        run(am, bm.transpose());
    } else if (trans_b == Trans::No) {
        run(am.transpose(), bm);
    } else {
        run(am.transpose(), bm.transpose());
    }
}

float dot(const float* a, const float* b, std::size_t n) {
    Eigen::Map<const Eigen::VectorXf> av(a, static_cast<Eigen::Index>(n));
    Eigen::Map<const Eigen::VectorXf> bv(b, static_cast<Eigen::Index>(n));
    return av.dot(bv);
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
    Eigen::Map<const Eigen::VectorXf> xv(x, static_cast<Eigen::Index>(n));
    Eigen::Map<Eigen::VectorXf> yv(y, static_cast<Eigen::Index>(n));
    yv += alpha * xv;
}

void layernorm_rows(const float* x, const float* gamma, const float* beta, float* out, std::size_t rows,
                    std::size_t cols, float eps, float* mean, float* rstd) {
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x + r * cols;
        float* yr = out + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            mu += xr[c];
        }
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = xr[c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const auto inv = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        const auto muf = static_cast<float>(mu);
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = (xr[c] - muf) * inv * gamma[c] + beta[c];
        }
        if (mean) {
            mean[r] = muf;
        }
        if (rstd) {
            rstd[r] = inv;
        }
    }
}

float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2.0)));
}

float gelu_grad(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2.0)));
    const float pdf = std::exp(-0.5f * x * x) * static_cast<float>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

void rotary_row(float* row, std::size_t n_heads, std::size_t d_head, std::int64_t pos, double base, int sign) {
    const std::size_t half = d_head / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double inv_freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
        const double angle = static_cast<double>(pos) * inv_freq;
        const auto c = static_cast<float>(std::cos(angle));
        const auto s = static_cast<float>(sign) * static_cast<float>(std::sin(angle));
        for (std::size_t h = 0; h < n_heads; ++h) {
            float* pair = row + h * d_head + 2 * i;
            const float x0 = pair[0];
            const float x1 = pair[1];
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }
}

bool softmax_masked(const float* logits, const std::uint8_t* keep, float* out, std::size_t n) {
    float max_value = -std::numeric_limits<float>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        if (keep[i] && (!any || logits[i] > max_value)) {
            max_value = logits[i];
            any = true;
        }
    }
    if (!any) {
        return false;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (keep[i]) {
            out[i] = std::exp(logits[i] - max_value);
            total += static_cast<double>(out[i]);
        } else {
            out[i] = 0.0f;
        }
    }
    const double inv = 1.0 / total;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>(out[i] * inv);
    }
    return true;
}

}  // namespace kvc::kernels
