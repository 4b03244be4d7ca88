#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace kvc {

// Boolean visibility matrix for one sequence: allow(q, k) is true when query
// row q may attend key column k.
class AttentionMask {
public:
    AttentionMask() = default;
    explicit AttentionMask(std::size_t size) : size_(size), allow_(size * size, 0) {}

    static AttentionMask causal(std::size_t size);

    std::size_t size() const noexcept { return size_; }

    bool allowed(std::size_t q, std::size_t k) const noexcept { return allow_[q * size_ + k] != 0; }
    void set(std::size_t q, std::size_t k, bool value) noexcept {
        allow_[q * size_ + k] = value ? 1 : 0;
    }

    const std::uint8_t* row(std::size_t q) const noexcept { return allow_.data() + q * size_; }

    std::size_t row_count(std::size_t q) const noexcept;
    std::vector<std::size_t> visible(std::size_t q) const;

    // No future keys visible and every row shows at least one key.
    bool is_causal_compatible() const noexcept;
    bool rows_nonempty() const noexcept;

    friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

private:
    std::size_t size_ = 0;
    std::vector<std::uint8_t> allow_;
};

// First key column visible to query t under a local window of ratio r:
// floor(t * r). Shared by the Local Attention mask and its FIFO cache policy.
std::size_t local_window_start(std::size_t t, double r);

}  // namespace kvc
