#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ciml {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape);

// Cache-line aligned storage, so vectorized kernels see the same alignment on
// every run and results do not depend on where the allocator placed a buffer.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, size_t) { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const {
        return true;
    }
};

// Dense row-major tensor. Image tensors use [N, C, spatial...] layout.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}
    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
            throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape_));
        }
    }

    const Shape& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_.at(static_cast<size_t>(i < 0 ? i + rank() : i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void reshape(Shape shape) {
        if (shape_numel(shape) != numel()) {
            throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        shape_ = std::move(shape);
    }

    // Number of elements per channel for [N, C, spatial...] tensors.
    int64_t spatial_numel() const {
        int64_t s = 1;
        for (size_t i = 2; i < shape_.size(); ++i) s *= shape_[i];
        return s;
    }
    Shape spatial_shape() const { return Shape(shape_.begin() + std::min<size_t>(2, shape_.size()), shape_.end()); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::copy(data_.begin(), data_.end(), out.data());
        return out;
    }

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<T, AlignedAllocator<T>> data_;
};

}  // namespace ciml
