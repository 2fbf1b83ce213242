#pragma once

// FP64-carrier tensors whose buffers are accounted by a process-wide
// high-water-mark meter.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ssmdyn/error.hpp"
#include "ssmdyn/numerics.hpp"

namespace ssmdyn {

/// Live/peak byte counters for tensor buffers allocated through `Tensor`.
class MemoryMeter {
public:
    static void on_alloc(std::size_t bytes) noexcept {
        const auto now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
        auto prev = peak_.load(std::memory_order_relaxed);
        while (now > prev && !peak_.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
        }
    }
    static void on_free(std::size_t bytes) noexcept {
        live_.fetch_sub(bytes, std::memory_order_relaxed);
    }
    /// Restarts peak tracking from the current live size.
    static void reset() noexcept { peak_.store(live_.load(std::memory_order_relaxed)); }
    static std::size_t live() noexcept { return live_.load(std::memory_order_relaxed); }
    static std::size_t peak() noexcept { return peak_.load(std::memory_order_relaxed); }

private:
    static inline std::atomic<std::size_t> live_{0};
    static inline std::atomic<std::size_t> peak_{0};
};

/// High-water mark of live tensor-buffer bytes since the last reset.
inline std::size_t memory_meter() { return MemoryMeter::peak(); }

template <class T>
struct TrackedAllocator {
    using value_type = T;
    TrackedAllocator() noexcept = default;
    template <class U>
    TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        MemoryMeter::on_alloc(n * sizeof(T));
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, std::size_t n) noexcept {
        MemoryMeter::on_free(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }
    template <class U>
    bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense row-major tensor on an FP64 carrier. `format()` names the grid the
/// values are guaranteed to lie on; it is only narrowed through `quantize`.
class Tensor {
public:
    using Storage = std::vector<double, TrackedAllocator<double>>;

    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0) : Tensor(Shape{rows, cols}, fill) {}

    static Tensor vector(std::size_t n, double fill = 0.0) { return Tensor(Shape{n}, fill); }
    static Tensor from(Shape shape, std::span<const double> values) {
        Tensor t(std::move(shape));
        require(values.size() == t.size(), "value count does not match shape");
        std::copy(values.begin(), values.end(), t.data_.begin());
        return t;
    }
    static Tensor from(Shape shape, std::initializer_list<double> values) {
        return from(std::move(shape), std::span<const double>(values.begin(), values.size()));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const noexcept { return shape_.size() < 2 ? 1 : shape_[1]; }

    NumericFormat format() const noexcept { return format_; }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> flat() noexcept { return {data_.data(), data_.size()}; }
    std::span<const double> flat() const noexcept { return {data_.data(), data_.size()}; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols(), cols()};
    }

    void fill(double v) {
        std::fill(data_.begin(), data_.end(), v);
        format_ = NumericFormat::FP64;
    }

    /// Rounds every element onto `fmt` and tags the tensor accordingly.
    Tensor& quantize(NumericFormat fmt) {
        quantize_inplace(flat(), fmt);
        format_ = fmt;
        return *this;
    }

    /// Tags the tensor without touching values; every element must already
    /// lie on `fmt`.
    Tensor& mark_format(NumericFormat fmt) noexcept {
        format_ = fmt;
        return *this;
    }

    bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    Storage data_;
    NumericFormat format_ = NumericFormat::FP64;
};

/// Bitwise equality of two tensors (distinguishes -0.0 from 0.0, NaN payloads).
inline bool bit_identical(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::equal(a.flat().begin(), a.flat().end(), b.flat().begin(), [](double x, double y) {
        return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
    });
}

inline double max_abs(std::span<const double> xs) {
    double m = 0.0;
    for (double x : xs) m = std::max(m, std::fabs(x));
    return m;
}

/// max|a - b| / max|b|, the infinity-norm relative deviation of `a` from `b`.
inline double max_relative_deviation(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "shape mismatch");
    double num = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) num = std::max(num, std::fabs(a[i] - b[i]));
    const double den = max_abs(b.flat());
    if (den == 0.0) return num;
    return num / den;
}

}  // namespace ssmdyn
