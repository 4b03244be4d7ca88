#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace kvc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float32 tensor. Rank 1 and rank 2 are the only ranks the
// model needs; higher ranks are accepted for storage (checkpoints) only.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values);
    static Tensor vector(std::initializer_list<float> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Rank-1 tensors behave as a single row.
    std::size_t rows() const noexcept;
    std::size_t cols() const noexcept;

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    float* raw() noexcept { return data_.data(); }
    const float* raw() const noexcept { return data_.data(); }

    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }
    float& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const float> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols(), cols()};
    }

    void fill(float value) noexcept;
    bool all_finite() const noexcept;
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

}  // namespace kvc
