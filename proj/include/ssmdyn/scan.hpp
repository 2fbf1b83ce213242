#pragma once

// Sequential and chunked parallel evaluation of the diagonal linear
// recurrence x_t = a_t * x_{t-1} + b_t.

#include <algorithm>
#include <cstddef>
#include <span>
#include <thread>
#include <vector>

#include "ssmdyn/error.hpp"
#include "ssmdyn/numerics.hpp"
#include "ssmdyn/tensor.hpp"

namespace ssmdyn {

/// One step of the recurrence: decay `a` and drive `b`, both length d.
struct ScanElement {
    std::vector<double> a;
    std::vector<double> b;

    static ScanElement identity(std::size_t d) { return {std::vector<double>(d, 1.0), std::vector<double>(d, 0.0)}; }
};

/// Applies `first` then `second`: (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2).
inline ScanElement compose(const ScanElement& first, const ScanElement& second,
                           NumericFormat fmt = NumericFormat::FP64) {
    const std::size_t d = first.a.size();
    require(second.a.size() == d && first.b.size() == d && second.b.size() == d,
            "scan element length mismatch");
    ScanElement out{std::vector<double>(d), std::vector<double>(d)};
    for (std::size_t j = 0; j < d; ++j) {
        out.a[j] = quantize(first.a[j] * second.a[j], fmt);
        out.b[j] = quantize(quantize(second.a[j] * first.b[j], fmt) + second.b[j], fmt);
    }
    return out;
}

namespace detail {

inline void check_scan_inputs(const Tensor& a, const Tensor& b, std::span<const double> x0) {
    require(a.rank() == 2 && a.same_shape(b), "scan inputs must be matching T x d matrices");
    if (a.rows() == 0) throw Error("empty sequence");
    require(x0.size() == a.cols(), "x0 length does not match state dimension");
}

}  // namespace detail

/// Reference evaluation: states[t] = a[t] * states[t-1] + b[t], states[-1] = x0.
/// With `fmt` narrower than FP64 every product and sum is rounded onto `fmt`.
inline Tensor scan_sequential(const Tensor& a, const Tensor& b, std::span<const double> x0,
                              NumericFormat fmt = NumericFormat::FP64) {
    detail::check_scan_inputs(a, b, x0);
    const std::size_t T = a.rows(), d = a.cols();
    Tensor states(T, d);
    std::vector<double> x(x0.begin(), x0.end());
    quantize_inplace(x, fmt);
    with_rounder(fmt, [&](auto q) {
        for (std::size_t t = 0; t < T; ++t) {
            const auto at = a.row(t);
            const auto bt = b.row(t);
            auto st = states.row(t);
            for (std::size_t j = 0; j < d; ++j) {
                x[j] = q(q(at[j] * x[j]) + bt[j]);
                st[j] = x[j];
            }
        }
    });
    states.mark_format(fmt);
    return states;
}

inline Tensor scan_sequential(std::span<const ScanElement> elements, std::span<const double> x0,
                              NumericFormat fmt = NumericFormat::FP64) {
    if (elements.empty()) throw Error("empty sequence");
    const std::size_t d = x0.size();
    Tensor a(elements.size(), d), b(elements.size(), d);
    for (std::size_t t = 0; t < elements.size(); ++t) {
        require(elements[t].a.size() == d && elements[t].b.size() == d, "scan element length mismatch");
        std::copy(elements[t].a.begin(), elements[t].a.end(), a.row(t).begin());
        std::copy(elements[t].b.begin(), elements[t].b.end(), b.row(t).begin());
    }
    return scan_sequential(a, b, x0, fmt);
}

namespace detail {

/// Runs fn(i) for i in [0, n), spreading indices round-robin over `workers`
/// threads. Each index is handled by exactly one thread, so results do not
/// depend on the worker count.
template <class Fn>
void for_each_index(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
}

}  // namespace detail

/// Work-efficient chunked scan. Each chunk is scanned locally from a zero
/// state while its decay product is accumulated (up-sweep); a Blelloch
/// exclusive scan over the chunk summaries yields every chunk's carry-in;
/// the carries are then folded back into the chunk (down-sweep). The combine
/// order is fixed by `chunk`, never by `workers`.
inline Tensor scan_parallel(const Tensor& a, const Tensor& b, std::span<const double> x0,
                            std::size_t chunk, std::size_t workers = 1,
                            NumericFormat fmt = NumericFormat::FP64) {
    detail::check_scan_inputs(a, b, x0);
    require(chunk >= 1, "chunk size must be positive");
    const std::size_t T = a.rows(), d = a.cols();
    const std::size_t n_chunks = (T + chunk - 1) / chunk;

    Tensor states(T, d);
    Tensor decay(T, d);  // running product of a within the chunk

    detail::for_each_index(n_chunks, workers, [&](std::size_t c) {
        const std::size_t begin = c * chunk, end = std::min(T, begin + chunk);
        for (std::size_t t = begin; t < end; ++t) {
            const auto at = a.row(t);
            const auto bt = b.row(t);
            auto st = states.row(t);
            auto pt = decay.row(t);
            for (std::size_t j = 0; j < d; ++j) {
                if (t == begin) {
                    st[j] = bt[j];
                    pt[j] = at[j];
                } else {
                    st[j] = quantize(quantize(at[j] * states(t - 1, j), fmt) + bt[j], fmt);
                    pt[j] = quantize(at[j] * decay(t - 1, j), fmt);
                }
            }
        }
    });

    // Blelloch exclusive scan over chunk summaries, padded to a power of two
    // with identity elements.
    std::size_t width = 1;
    while (width < n_chunks) width <<= 1;
    std::vector<ScanElement> tree(width, ScanElement::identity(d));
    for (std::size_t c = 0; c < n_chunks; ++c) {
        const std::size_t last = std::min(T, (c + 1) * chunk) - 1;
        tree[c].a.assign(decay.row(last).begin(), decay.row(last).end());
        tree[c].b.assign(states.row(last).begin(), states.row(last).end());
    }
    for (std::size_t stride = 1; stride < width; stride <<= 1) {
        for (std::size_t i = 2 * stride - 1; i < width; i += 2 * stride)
            tree[i] = compose(tree[i - stride], tree[i], fmt);
    }
    tree[width - 1] = ScanElement::identity(d);
    for (std::size_t stride = width >> 1; stride >= 1; stride >>= 1) {
        for (std::size_t i = 2 * stride - 1; i < width; i += 2 * stride) {
            ScanElement left = tree[i - stride];
            tree[i - stride] = tree[i];
            tree[i] = compose(tree[i], left, fmt);
        }
    }

    std::vector<double> x0q(x0.begin(), x0.end());
    quantize_inplace(x0q, fmt);
    detail::for_each_index(n_chunks, workers, [&](std::size_t c) {
        const ScanElement& prefix = tree[c];
        std::vector<double> carry(d);
        for (std::size_t j = 0; j < d; ++j)
            carry[j] = quantize(quantize(prefix.a[j] * x0q[j], fmt) + prefix.b[j], fmt);
        const std::size_t begin = c * chunk, end = std::min(T, begin + chunk);
        with_rounder(fmt, [&](auto q) {
            for (std::size_t t = begin; t < end; ++t) {
                auto st = states.row(t);
                const auto pt = decay.row(t);
                for (std::size_t j = 0; j < d; ++j) st[j] = q(q(pt[j] * carry[j]) + st[j]);
            }
        });
    });
    states.mark_format(fmt);
    return states;
}

}  // namespace ssmdyn
