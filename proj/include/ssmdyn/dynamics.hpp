#pragma once

// Stability diagnostics for the block recurrence x_t = F(x_{t-1}, u_t):
// maximal Lyapunov exponents (closed form and from Jacobian products) and
// epsilon-perturbation divergence probes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ssmdyn/error.hpp"
#include "ssmdyn/precision.hpp"
#include "ssmdyn/ssm.hpp"

namespace ssmdyn {

struct LyapunovEstimate {
    std::vector<double> per_dim;
    double lambda_max = 0.0;
    double zeta_fit = 0.0;
    bool has_zeta = false;
    std::size_t T_used = 0;
};

namespace detail {

inline LyapunovEstimate finish_estimate(std::vector<double> per_dim, std::size_t T) {
    LyapunovEstimate est;
    est.per_dim = std::move(per_dim);
    est.lambda_max = *std::max_element(est.per_dim.begin(), est.per_dim.end());
    est.T_used = T;
    return est;
}

}  // namespace detail

/// per_dim[j] = A[j] * mean_t delta_bar[t][j] with A = -exp(A_log).
inline LyapunovEstimate lyapunov_closed_form(std::span<const double> A_log, const Tensor& delta_bars) {
    const std::size_t d = A_log.size();
    require(d >= 1, "state dimension must be positive");
    require(delta_bars.rank() == 2 && delta_bars.cols() == d, "delta_bars must be T x d");
    const std::size_t T = delta_bars.rows();
    require(T >= 1, "empty sequence");
    std::vector<double> sums(d, 0.0);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) {
            const double v = delta_bars(t, j);
            if (!(v >= 0.0)) throw Error("invalid Δ̄");
            sums[j] += v;
        }
    std::vector<double> per_dim(d);
    for (std::size_t j = 0; j < d; ++j) per_dim[j] = -std::exp(A_log[j]) * (sums[j] / static_cast<double>(T));
    return detail::finish_estimate(std::move(per_dim), T);
}

/// Log-domain average of the diagonal state Jacobians d x_t / d x_{t-1} =
/// diag(a_t) along the trajectory driven by u.
inline LyapunovEstimate lyapunov_numeric(const MambaParams& params, const Tensor& u) {
    const auto tr = mamba_forward(params, u);
    const std::size_t T = tr.length(), d = params.d;
    std::vector<double> log_sums(d, 0.0);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) log_sums[j] += std::log(std::fabs(tr.decay(t, j)));
    std::vector<double> per_dim(d);
    for (std::size_t j = 0; j < d; ++j) per_dim[j] = log_sums[j] / static_cast<double>(T);
    return detail::finish_estimate(std::move(per_dim), T);
}

enum class Perturb { X0, Input, Both };

inline std::string_view to_string(Perturb p) {
    switch (p) {
        case Perturb::X0: return "x0";
        case Perturb::Input: return "input";
        case Perturb::Both: return "both";
    }
    return "unknown";
}

inline Perturb parse_perturb(std::string_view s) {
    if (s == "x0") return Perturb::X0;
    if (s == "input") return Perturb::Input;
    if (s == "both") return Perturb::Both;
    throw Error("unknown perturbation '" + std::string(s) + "'");
}

struct DivergenceTrace {
    double epsilon = 0.0;
    std::vector<double> deviations;  // max_j |x_t - x'_t| for t = 1..T
    bool overflowed = false;
};

namespace detail {

inline DivergenceTrace compare_states(const Tensor& x, const Tensor& y, double epsilon) {
    DivergenceTrace tr;
    tr.epsilon = epsilon;
    tr.deviations.resize(x.rows());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        double m = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const double a = x(t, j), b = y(t, j);
            if (!std::isfinite(a) || !std::isfinite(b)) {
                tr.overflowed = true;
                m = std::numeric_limits<double>::infinity();
                continue;
            }
            m = std::max(m, std::fabs(a - b));
        }
        tr.deviations[t] = m;
    }
    return tr;
}

}  // namespace detail

/// Runs a nominal and an epsilon-perturbed trajectory under the same policy.
/// X0 adds epsilon to every component of x0, Input adds it to u_1, Both does
/// both.
inline DivergenceTrace divergence_probe(const MambaParams& params, const Tensor& u, double epsilon, Perturb perturb,
                                        const PrecisionPolicy& policy = {}, std::span<const double> x0 = {}) {
    require(epsilon > 0.0, "epsilon must be positive");
    require(u.rows() >= 2, "divergence probe needs T >= 2");
    std::vector<double> base(params.d, 0.0);
    if (!x0.empty()) base.assign(x0.begin(), x0.end());
    std::vector<double> moved = base;
    Tensor u2 = u;
    if (perturb != Perturb::Input)
        for (double& v : moved) v += epsilon;
    if (perturb != Perturb::X0)
        for (double& v : u2.row(0)) v += epsilon;
    const auto nominal = mamba_forward(params, u, base, policy);
    const auto perturbed = mamba_forward(params, u2, moved, policy);
    return detail::compare_states(nominal.states, perturbed.states, epsilon);
}

/// Deviation between the policy trajectory and the FP64 trajectory of the
/// same inputs, i.e. the accumulated effect of rounding alone.
inline DivergenceTrace precision_probe(const MambaParams& params, const Tensor& u, const PrecisionPolicy& policy,
                                       std::span<const double> x0 = {}) {
    const auto ref = mamba_forward(params, u, x0, PrecisionPolicy::fp64());
    const auto test = mamba_forward(params, u, x0, policy);
    return detail::compare_states(ref.states, test.states, 0.0);
}

inline constexpr std::size_t kMinFitPoints = 8;

/// Least-squares slope of log(deviation) against the step index, in nats per
/// step. Zero and non-finite deviations are skipped.
inline double fit_deviation_rate(const DivergenceTrace& trace) {
    std::vector<double> ts, ys;
    for (std::size_t t = 0; t < trace.deviations.size(); ++t) {
        const double v = trace.deviations[t];
        if (v > 0.0 && std::isfinite(v)) {
            ts.push_back(static_cast<double>(t));
            ys.push_back(std::log(v));
        }
    }
    if (ts.size() < kMinFitPoints) throw Error("insufficient signal");
    const double n = static_cast<double>(ts.size());
    double mt = 0.0, my = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        mt += ts[i];
        my += ys[i];
    }
    mt /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        sxy += (ts[i] - mt) * (ys[i] - my);
        sxx += (ts[i] - mt) * (ts[i] - mt);
    }
    return sxy / sxx;
}

/// mean(second half) / mean(first half) of the deviation sequence; +inf when
/// the first half is identically zero but the second is not, 0 when both are.
inline double half_ratio(std::span<const double> deviations) {
    const std::size_t half = deviations.size() / 2;
    require(half >= 1, "need at least two deviations");
    double first = 0.0, second = 0.0;
    for (std::size_t t = 0; t < half; ++t) first += deviations[t];
    for (std::size_t t = half; t < deviations.size(); ++t) second += deviations[t];
    first /= static_cast<double>(half);
    second /= static_cast<double>(deviations.size() - half);
    if (first == 0.0) return second == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return second / first;
}

/// Mean absolute elementwise difference of two equally shaped tensors.
inline double mean_abs_difference(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "shape mismatch");
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

/// Recipe for random valid blocks used by the stability experiments.
struct RandomBlockSpec {
    std::size_t d = 4;
    std::size_t T = 64;
    BufferMode mode = BufferMode::TimeIndexed;
    double w_std = 1.0;
    double input_std = 1.0;
};

struct RandomBlock {
    MambaParams params;
    Tensor u;
};

template <class Rng>
RandomBlock draw_block(const RandomBlockSpec& spec, Rng& rng) {
    RandomBlock b;
    b.params = random_params(spec.d, spec.T, spec.mode, rng, spec.w_std);
    b.u = random_matrix(spec.T, spec.d, rng, spec.input_std);
    return b;
}

/// True when every decay along the trajectory is at most 1 - margin.
inline bool strictly_contracting(const MambaParams& params, const Tensor& u, double margin = 1e-3) {
    const auto tr = mamba_forward(params, u);
    for (double a : tr.decay.flat())
        if (a > 1.0 - margin) return false;
    return true;
}

}  // namespace ssmdyn
