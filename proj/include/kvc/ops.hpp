#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kvc/tensor.hpp"

namespace kvc {

// Label value excluded from the loss.
inline constexpr std::int32_t kIgnore = -100;

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Softmax restricted to entries with mask[i] set. Max-subtraction is taken over
// the kept entries only. Throws InvalidMaskError when no entry is kept.
Tensor softmax_masked(std::span<const float> logits, std::span<const std::uint8_t> mask);
Tensor softmax_masked(std::span<const float> logits, const std::vector<bool>& mask);

// -log softmax(logits)[target]; kIgnore gives 0.
float cross_entropy(std::span<const float> logits, std::int32_t target);

// log-sum-exp evaluated in double.
double log_sum_exp(std::span<const float> logits);

}  // namespace kvc
