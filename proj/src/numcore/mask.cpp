#include "kvc/mask.hpp"

#include <cmath>

namespace kvc {

AttentionMask AttentionMask::causal(std::size_t size) {
    AttentionMask mask(size);
    for (std::size_t q = 0; q < size; ++q) {
        for (std::size_t k = 0; k <= q; ++k) {
            mask.set(q, k, true);
        }
    }
    return mask;
}

std::size_t AttentionMask::row_count(std::size_t q) const noexcept {
    std::size_t count = 0;
    const std::uint8_t* r = row(q);
    for (std::size_t k = 0; k < size_; ++k) {
        count += r[k];
    }
    return count;
}

std::vector<std::size_t> AttentionMask::visible(std::size_t q) const {
    std::vector<std::size_t> out;
    const std::uint8_t* r = row(q);
    for (std::size_t k = 0; k < size_; ++k) {
        if (r[k]) {
            out.push_back(k);
        }
    }
    return out;
}

bool AttentionMask::is_causal_compatible() const noexcept {
    for (std::size_t q = 0; q < size_; ++q) {
        const std::uint8_t* r = row(q);
        for (std::size_t k = q + 1; k < size_; ++k) {
            if (r[k]) {
                return false;
            }
        }
    }
    return true;
}

bool AttentionMask::rows_nonempty() const noexcept {
    for (std::size_t q = 0; q < size_; ++q) {
        if (row_count(q) == 0) {
            return false;
        }
    }
    return true;
}

std::size_t local_window_start(std::size_t t, double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(t) * r));
}

}  // namespace kvc
