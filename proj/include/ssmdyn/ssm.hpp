#pragma once

// The selective state-space block: parameters, discretization, forward pass
// through the diagonal recurrence and its exact reverse-mode gradient.
//
//   delta_bar_t = softplus(delta_raw_t + delta_bias)
//   a_t         = exp(delta_bar_t * A),  A = -exp(A_log)
//   bcoef_t     = (a_t - 1) / A * B_t
//   x_t         = a_t * x_{t-1} + bcoef_t * u_t
//   y_t         = C_t * x_t
//
// All of A, B_t, C_t and delta_t are diagonal and stored as length-d vectors.

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ssmdyn/error.hpp"
#include "ssmdyn/linalg.hpp"
#include "ssmdyn/numerics.hpp"
#include "ssmdyn/precision.hpp"
#include "ssmdyn/scan.hpp"
#include "ssmdyn/tensor.hpp"

namespace ssmdyn {

/// How the per-timestep (delta, B, C) diagonals are obtained from the fused
/// weight `W`.
enum class BufferMode {
    TimeIndexed,    ///< W is T_max x 3d; row t-1 serves timestep t
    InputProjected  ///< W is d x 3d; row for timestep t is u_t^T W
};

inline std::string_view to_string(BufferMode m) {
    return m == BufferMode::TimeIndexed ? "time_indexed" : "input_projected";
}

inline BufferMode parse_buffer_mode(std::string_view s) {
    if (s == "time_indexed") return BufferMode::TimeIndexed;
    if (s == "input_projected") return BufferMode::InputProjected;
    throw Error("unknown buffer mode '" + std::string(s) + "'");
}

/// Single matrix holding the delta, B and C diagonals in column segments
/// [0,d), [d,2d) and [2d,3d).
struct FusedBuffer {
    BufferMode mode = BufferMode::TimeIndexed;
    Tensor W;

    std::size_t state_dim() const { return W.cols() / 3; }
};

struct MambaParams {
    std::size_t d = 0;
    std::size_t T_max = 0;
    Tensor A_log;       // d
    FusedBuffer fused;  // T_max x 3d or d x 3d
    Tensor delta_bias;  // d
    bool gate_enabled = false;
    Tensor gate_weight;  // d x d

    /// Zero-initialised parameters with consistent shapes.
    static MambaParams zeros(std::size_t d, std::size_t T_max, BufferMode mode) {
        require(d >= 1 && T_max >= 1, "dimensions must be positive");
        MambaParams p;
        p.d = d;
        p.T_max = T_max;
        p.A_log = Tensor::vector(d);
        p.fused.mode = mode;
        p.fused.W = mode == BufferMode::TimeIndexed ? Tensor(T_max, 3 * d) : Tensor(d, 3 * d);
        p.delta_bias = Tensor::vector(d);
        p.gate_weight = Tensor(d, d);
        return p;
    }

    /// Materialised A = -exp(A_log); strictly negative.
    std::vector<double> A() const {
        std::vector<double> out(d);
        for (std::size_t j = 0; j < d; ++j) out[j] = -std::exp(A_log[j]);
        return out;
    }

    void validate() const {
        require(d >= 1, "state dimension must be positive");
        require(A_log.size() == d, "A_log length must equal d");
        require(delta_bias.size() == d, "delta_bias length must equal d");
        require(fused.W.rank() == 2 && fused.W.cols() == 3 * d, "fused buffer must have 3d columns");
        if (fused.mode == BufferMode::TimeIndexed)
            require(fused.W.rows() == T_max, "time-indexed buffer must have T_max rows");
        else
            require(fused.W.rows() == d, "input-projected buffer must have d rows");
        require(gate_weight.rows() == d && gate_weight.cols() == d, "gate weight must be d x d");
        for (double v : A_log.flat())
            require(std::isfinite(v) && std::isfinite(std::exp(v)), "A_log must be finite");
    }
};

/// Discretized decay and input coefficient for one timestep.
struct Discretized {
    std::vector<double> a;
    std::vector<double> bcoef;
};

namespace detail {

/// Per-channel discretization with every intermediate rounded onto `fmt`.
struct ChannelStep {
    double s, delta_bar, exponent, a, c, bcoef;
};

template <class Q>
ChannelStep discretize_channel(double delta_raw, double bias, double A, double B, Q q) {
    ChannelStep st;
    st.s = q(delta_raw + bias);
    st.delta_bar = q(softplus(st.s));
    st.exponent = q(st.delta_bar * A);
    st.a = q(std::exp(st.exponent));
    // (a - 1) / A evaluated through expm1 so the small-step limit stays exact
    st.c = q(std::expm1(st.exponent) / A);
    st.bcoef = q(st.c * B);
    return st;
}

/// discretize_channel over a whole row, staged so the roundings vectorize
/// and only the transcendental calls stay scalar. w holds (delta_raw, B, C).
template <class Q>
void discretize_row(std::size_t d, Q q, const double* __restrict w, const double* __restrict bias,
                    const double* __restrict A, const double* __restrict u, double* __restrict ex,
                    double* __restrict dbar, double* __restrict a, double* __restrict c,
                    double* __restrict drive) {
    for (std::size_t j = 0; j < d; ++j) dbar[j] = q(w[j] + bias[j]);
    for (std::size_t j = 0; j < d; ++j) dbar[j] = softplus(dbar[j]);
    for (std::size_t j = 0; j < d; ++j) {
        dbar[j] = q(dbar[j]);
        ex[j] = q(dbar[j] * A[j]);
    }
    for (std::size_t j = 0; j < d; ++j) {
        a[j] = std::exp(ex[j]);
        c[j] = std::expm1(ex[j]) / A[j];
    }
    for (std::size_t j = 0; j < d; ++j) {
        a[j] = q(a[j]);
        c[j] = q(c[j]);
        drive[j] = q(q(c[j] * w[d + j]) * u[j]);
    }
}

inline ChannelStep discretize_channel(double delta_raw, double bias, double A, double B,
                                      NumericFormat fmt) {
    return with_rounder(fmt, [&](auto q) { return discretize_channel(delta_raw, bias, A, B, q); });
}

}  // namespace detail

/// delta_bar = softplus(delta_raw + delta_bias), a = exp(delta_bar A),
/// bcoef = (a - 1) / A * B_diag.
inline Discretized discretize(const MambaParams& params, std::span<const double> delta_raw,
                              std::span<const double> B_diag, NumericFormat fmt = NumericFormat::FP64) {
    require(delta_raw.size() == params.d && B_diag.size() == params.d, "discretize: length mismatch");
    Discretized out{std::vector<double>(params.d), std::vector<double>(params.d)};
    for (std::size_t j = 0; j < params.d; ++j) {
        const double A = quantize(-std::exp(params.A_log[j]), fmt);
        const auto st = detail::discretize_channel(delta_raw[j], quantize(params.delta_bias[j], fmt), A,
                                                   B_diag[j], fmt);
        out.a[j] = st.a;
        out.bcoef[j] = st.bcoef;
    }
    return out;
}

/// Forward trajectory of one sequence plus the intermediates the backward
/// pass needs. Matrices are T x d unless noted.
struct StateTrace {
    Tensor inputs;   // u as given
    Tensor states;   // x_1..x_T
    Tensor outputs;  // y_1..y_T
    std::vector<double> x0;

    Tensor gate_pre;    // G u_t (only when gated)
    Tensor scan_input;  // u'_t, the (possibly gated) input driving the scan
    Tensor rows;        // T x 3d per-timestep (delta_raw, B, C)
    Tensor delta_bar;
    Tensor decay;  // a_t
    Tensor coef;   // (a_t - 1) / A
    Tensor drive;  // bcoef_t * u'_t
    PrecisionPolicy policy;

    std::size_t length() const { return inputs.rows(); }
};

struct ForwardOptions {
    /// 0 selects the sequential scan; otherwise the chunked parallel scan.
    std::size_t chunk = 0;
    std::size_t workers = 1;
    /// Set when u, fused.W and gate_weight already lie on the activation grid.
    bool operands_on_grid = false;
};

/// Runs the block over u (T x d). Every stage output is rounded onto the
/// policy's activation format.
inline StateTrace mamba_forward(const MambaParams& params, const Tensor& u, std::span<const double> x0 = {},
                                const PrecisionPolicy& policy = {}, const ForwardOptions& opts = {}) {
    const std::size_t d = params.d;
    require(u.rank() == 2 && u.cols() == d, "input must be T x d");
    const std::size_t T = u.rows();
    if (T == 0) throw Error("empty sequence");
    if (params.fused.mode == BufferMode::TimeIndexed && T > params.T_max)
        throw Error("sequence exceeds buffer");
    std::vector<double> init(d, 0.0);
    if (!x0.empty()) {
        require(x0.size() == d, "x0 length must equal d");
        init.assign(x0.begin(), x0.end());
    }
    const NumericFormat fmt = policy.activation_format;

    StateTrace tr;
    tr.policy = policy;
    tr.inputs = u;
    tr.x0 = init;
    quantize_inplace(tr.x0, fmt);
    tr.scan_input = u;
    if (opts.operands_on_grid) tr.scan_input.mark_format(fmt);
    else tr.scan_input.quantize(fmt);

    if (params.gate_enabled) {
        Tensor G = params.gate_weight;
        if (!opts.operands_on_grid) G.quantize(fmt);
        tr.gate_pre = Tensor(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            const auto ut = tr.scan_input.row(t);
            for (std::size_t i = 0; i < d; ++i) {
                double z = 0.0;
                for (std::size_t k = 0; k < d; ++k) z += G(i, k) * ut[k];
                tr.gate_pre(t, i) = quantize(z, fmt);
            }
        }
        for (std::size_t t = 0; t < T; ++t) {
            auto ut = tr.scan_input.row(t);
            for (std::size_t i = 0; i < d; ++i) {
                const double g = quantize(silu(tr.gate_pre(t, i)), fmt);
                ut[i] = quantize(g * ut[i], fmt);
            }
        }
    }

    const Tensor& W = params.fused.W;
    Tensor Wq_owned;
    if (!opts.operands_on_grid) {
        Wq_owned = W;
        Wq_owned.quantize(fmt);
    }
    const Tensor& Wq = opts.operands_on_grid ? W : Wq_owned;
    tr.rows = Tensor(T, 3 * d);
    if (params.fused.mode == BufferMode::TimeIndexed) {
        for (std::size_t t = 0; t < T; ++t) {
            const auto src = Wq.row(t);
            std::copy(src.begin(), src.end(), tr.rows.row(t).begin());
        }
    } else {
        as_matrix(tr.rows).noalias() = as_matrix(tr.scan_input) * as_matrix(Wq);
        tr.rows.quantize(fmt);
    }
    tr.rows.mark_format(fmt);

    std::vector<double> A(d), bias(d);
    for (std::size_t j = 0; j < d; ++j) {
        A[j] = quantize(-std::exp(params.A_log[j]), fmt);
        bias[j] = quantize(params.delta_bias[j], fmt);
    }
    tr.delta_bar = Tensor(T, d);
    tr.decay = Tensor(T, d);
    tr.coef = Tensor(T, d);
    tr.drive = Tensor(T, d);
    std::vector<double> scratch(d);
    with_rounder(fmt, [&](auto q) {
        for (std::size_t t = 0; t < T; ++t)
            detail::discretize_row(d, q, tr.rows.row(t).data(), bias.data(), A.data(), tr.scan_input.row(t).data(),
                                   scratch.data(), tr.delta_bar.row(t).data(), tr.decay.row(t).data(),
                                   tr.coef.row(t).data(), tr.drive.row(t).data());
    });

    tr.states = opts.chunk == 0
                    ? scan_sequential(tr.decay, tr.drive, tr.x0, fmt)
                    : scan_parallel(tr.decay, tr.drive, tr.x0, opts.chunk, opts.workers, fmt);

    tr.outputs = Tensor(T, d);
    with_rounder(fmt, [&](auto q) {
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < d; ++j) tr.outputs(t, j) = q(tr.rows(t, 2 * d + j) * tr.states(t, j));
    });
    tr.decay.mark_format(fmt);
    tr.outputs.mark_format(fmt);
    return tr;
}

struct MambaGrads {
    Tensor A_log;
    Tensor W;      // empty when BackwardOptions::fused_weight is false
    Tensor rows;   // dL/d(delta_raw, B, C) per timestep, T x 3d
    Tensor delta_bias;
    Tensor gate_weight;  // empty when ungated
    Tensor x0;
    Tensor inputs;  // dL/du, for layers feeding the block
};

/// Exact reverse-mode gradients of a scalar loss whose output cotangent is
/// dLdy (T x d). Gradient stages are rounded onto the policy's gradient format.
struct BackwardOptions {
    /// Off skips the dense fused-weight gradient; `rows` still carries it in
    /// factored form for callers that only need a projection of it.
    bool fused_weight = true;
    bool weights_on_grid = false;
};

namespace detail {

/// One timestep of the reverse pass over all channels; gx carries dL/dx.
template <class Q>
void backward_kernel(std::size_t d, Q q, const double* __restrict w, const double* __restrict gyt,
                     const double* __restrict xt, const double* __restrict xp, const double* __restrict at,
                     const double* __restrict ct, const double* __restrict ut, const double* __restrict dbar,
                     const double* __restrict sig, const double* __restrict A, double* __restrict gw,
                     double* __restrict gscan, double* __restrict gx, double* __restrict gA,
                     double* __restrict gbias) {
    for (std::size_t j = 0; j < d; ++j) {
        const double gy = gyt[j];
        const double a = at[j];
        const double c = ct[j];
        const double Bd = w[d + j];
        const double Cd = w[2 * d + j];

        gw[2 * d + j] = q(gy * xt[j]);
        const double gb = q(gx[j] + gy * Cd);
        const double ga = q(gb * xp[j]);
        const double gbcoef = q(gb * ut[j]);
        gscan[j] = q(gb * c * Bd);
        gw[d + j] = q(gbcoef * c);
        const double gc = q(gbcoef * Bd);
        // c = (a - 1) / A
        const double ga_total = q(ga + gc / A[j]);
        const double gdbar = q(ga_total * a * A[j]);
        gA[j] += ga_total * a * dbar[j] - gc * c / A[j];
        const double gs = q(gdbar * sig[j]);
        gw[j] = gs;
        gbias[j] += gs;
        gx[j] = q(a * gb);
    }
}

}  // namespace detail

inline MambaGrads mamba_backward(const MambaParams& params, const StateTrace& tr, const Tensor& dLdy,
                                 const BackwardOptions& opts = {}) {
    const std::size_t d = params.d;
    const std::size_t T = tr.length();
    if (!(dLdy.rank() == 2 && dLdy.rows() == T && dLdy.cols() == d))
        throw Error("dLdy shape " + shape_string(dLdy.shape()) + " does not match trace " +
                    shape_string(tr.outputs.shape()));
    require(tr.states.rows() == T && tr.states.cols() == d, "trace does not match params");
    const NumericFormat gfmt = tr.policy.gradient_format;
    const NumericFormat afmt = tr.policy.activation_format;

    MambaGrads g;
    g.A_log = Tensor::vector(d);
    if (opts.fused_weight) g.W = Tensor(params.fused.W.shape());
    g.rows = Tensor(T, 3 * d);
    g.delta_bias = Tensor::vector(d);
    if (params.gate_enabled) g.gate_weight = Tensor(d, d);
    g.x0 = Tensor::vector(d);
    g.inputs = Tensor(T, d);

    std::vector<double> A(d);
    for (std::size_t j = 0; j < d; ++j) A[j] = quantize(-std::exp(params.A_log[j]), afmt);
    Tensor Wq_owned;
    if (params.fused.mode == BufferMode::InputProjected && !opts.weights_on_grid) {
        Wq_owned = params.fused.W;
        Wq_owned.quantize(afmt);
    }
    const Tensor& Wq = opts.weights_on_grid ? params.fused.W : Wq_owned;

    std::vector<double> sig(T * d);
    with_rounder(afmt, [&](auto qa) {
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < d; ++j) sig[t * d + j] = sigmoid(qa(tr.rows(t, j) + params.delta_bias[j]));
    });

    std::vector<double> gA(d, 0.0);
    std::vector<double> gx(d, 0.0);  // dL/dx_t flowing backwards
    Tensor gscan(T, d);  // dL/du'_t
    with_rounder(gfmt, [&](auto q) {
        for (std::size_t tt = T; tt-- > 0;) {
            const double* x_prev = tt == 0 ? tr.x0.data() : tr.states.row(tt - 1).data();
            detail::backward_kernel(d, q, tr.rows.row(tt).data(), dLdy.row(tt).data(), tr.states.row(tt).data(),
                                    x_prev, tr.decay.row(tt).data(), tr.coef.row(tt).data(),
                                    tr.scan_input.row(tt).data(), tr.delta_bar.row(tt).data(), sig.data() + tt * d,
                                    A.data(), g.rows.row(tt).data(), gscan.row(tt).data(), gx.data(), gA.data(),
                                    g.delta_bias.data());
        }
    });
    if (params.fused.mode == BufferMode::TimeIndexed) {
        if (opts.fused_weight)
            std::copy(g.rows.flat().begin(), g.rows.flat().end(), g.W.flat().begin());
    } else {
        as_matrix(gscan).noalias() += as_matrix(g.rows) * as_matrix(Wq).transpose();
        quantize_inplace(gscan.flat(), gfmt);
        if (opts.fused_weight) as_matrix(g.W).noalias() = as_matrix(tr.scan_input).transpose() * as_matrix(g.rows);
    }
    for (std::size_t j = 0; j < d; ++j) {
        g.x0[j] = gx[j];
        // A = -exp(A_log) so dA/dA_log = A
        g.A_log[j] = gA[j] * A[j];
    }

    if (params.gate_enabled) {
        Tensor G = params.gate_weight;
        if (!opts.weights_on_grid) G.quantize(afmt);
        for (std::size_t t = 0; t < T; ++t) {
            const auto u_in = tr.inputs.row(t);
            std::vector<double> gz(d);
            for (std::size_t i = 0; i < d; ++i) {
                const double z = tr.gate_pre(t, i);
                const double uq = quantize(u_in[i], afmt);
                const double gate = quantize(silu(z), afmt);
                g.inputs(t, i) += quantize(gscan(t, i) * gate, gfmt);
                gz[i] = quantize(gscan(t, i) * uq * silu_grad(z), gfmt);
            }
            for (std::size_t i = 0; i < d; ++i) {
                if (gz[i] == 0.0) continue;
                auto gGi = g.gate_weight.row(i);
                const auto Gi = G.row(i);
                for (std::size_t k = 0; k < d; ++k) {
                    gGi[k] += gz[i] * quantize(u_in[k], afmt);
                    g.inputs(t, k) += Gi[k] * gz[i];
                }
            }
        }
        g.inputs.quantize(gfmt);
    } else {
        g.inputs = std::move(gscan);
        g.inputs.mark_format(gfmt);
    }

    g.A_log.quantize(gfmt);
    g.W.quantize(gfmt);
    g.rows.mark_format(gfmt);
    g.delta_bias.quantize(gfmt);
    g.gate_weight.quantize(gfmt);
    g.x0.quantize(gfmt);
    return g;
}

/// Random block with A_log ~ N(0, 1), delta_bias ~ N(0, 1) and fused-buffer
/// entries ~ N(0, w_std^2). Used by the dynamics probes.
template <class Rng>
MambaParams random_params(std::size_t d, std::size_t T_max, BufferMode mode, Rng& rng, double w_std = 1.0) {
    MambaParams p = MambaParams::zeros(d, T_max, mode);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (auto& v : p.A_log.flat()) v = n01(rng);
    for (auto& v : p.delta_bias.flat()) v = n01(rng);
    const double scale = mode == BufferMode::InputProjected ? w_std / std::sqrt(static_cast<double>(d)) : w_std;
    for (auto& v : p.fused.W.flat()) v = scale * n01(rng);
    return p;
}

template <class Rng>
Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double std = 1.0) {
    Tensor t(rows, cols);
    std::normal_distribution<double> n(0.0, std);
    for (auto& v : t.flat()) v = n(rng);
    return t;
}

}  // namespace ssmdyn
