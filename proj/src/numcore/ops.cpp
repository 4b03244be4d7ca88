#include "kvc/ops.hpp"

#include <cmath>
#include <limits>

#include "kvc/error.hpp"
#include "kvc/kernels.hpp"

namespace kvc {

namespace {

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(what) + " must be rank 2, got " + shape_string(t.shape()));
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul inner dims differ: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    Tensor out({a.rows(), b.cols()});
    kernels::gemm(kernels::Trans::No, kernels::Trans::No, a.rows(), b.cols(), a.cols(), a.raw(), a.cols(),
                  b.raw(), b.cols(), out.raw(), out.cols());
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt lhs");
    require_matrix(b, "matmul_nt rhs");
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt inner dims differ: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()) + "^T");
    }
    Tensor out({a.rows(), b.rows()});
    kernels::gemm(kernels::Trans::No, kernels::Trans::Yes, a.rows(), b.rows(), a.cols(), a.raw(), a.cols(),
                  b.raw(), b.cols(), out.raw(), out.cols());
    return out;
}

Tensor softmax_masked(std::span<const float> logits, std::span<const std::uint8_t> mask) {
    if (logits.size() != mask.size()) {
        throw DimensionError("softmax_masked: logits and mask lengths differ");
    }
    Tensor out({logits.size()});
    if (!kernels::softmax_masked(logits.data(), mask.data(), out.raw(), logits.size())) {
        throw InvalidMaskError("softmax_masked: mask keeps no entry");
    }
    return out;
}

Tensor softmax_masked(std::span<const float> logits, const std::vector<bool>& mask) {
    std::vector<std::uint8_t> keep(mask.begin(), mask.end());
    return softmax_masked(logits, std::span<const std::uint8_t>(keep));
}

double log_sum_exp(std::span<const float> logits) {
    double max_value = -std::numeric_limits<double>::infinity();
    for (float v : logits) {
        max_value = std::max(max_value, static_cast<double>(v));
    }
    double total = 0.0;
    for (float v : logits) {
        total += std::exp(static_cast<double>(v) - max_value);
    }
    return max_value + std::log(total);
}

float cross_entropy(std::span<const float> logits, std::int32_t target) {
    if (target == kIgnore) {
        return 0.0f;
    }
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
        throw IndexError("cross_entropy target " + std::to_string(target) + " outside vocabulary of " +
                         std::to_string(logits.size()));
    }
    return static_cast<float>(log_sum_exp(logits) - static_cast<double>(logits[static_cast<std::size_t>(target)]));
}

}  // namespace kvc
