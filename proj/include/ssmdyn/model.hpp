#pragma once

// Toy language model used by the fine-tuning harness:
//
//   tokens -> embeddings (V x d) -> in_proj (d x d) -> block -> out_proj (d x d)
//          -> head (d x V) -> logits
//
// Weights named by role (embeddings, in_proj, fused_buffer, out_proj, gate) are
// LoRA-adaptable; A_log, delta_bias and the head are not.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ssmdyn/checkpoint.hpp"
#include "ssmdyn/data.hpp"
#include "ssmdyn/linalg.hpp"
#include "ssmdyn/lora.hpp"
#include "ssmdyn/precision.hpp"
#include "ssmdyn/ssm.hpp"

namespace ssmdyn {

struct ToyLmSpec {
    std::size_t vocab = 16;
    std::size_t d = 64;
    std::size_t T_max = 64;
    BufferMode mode = BufferMode::InputProjected;
    bool gate = false;
};

struct ToyLm {
    ToyLmSpec spec;
    Tensor embeddings;  // V x d
    Tensor in_proj;     // d x d
    MambaParams block;
    Tensor out_proj;  // d x d
    Tensor head;      // d x V
    AdapterSet adapters;

    static ToyLm init(const ToyLmSpec& spec, std::uint64_t seed) {
        require(spec.vocab >= 2 && spec.d >= 1 && spec.T_max >= 1, "invalid model dimensions");
        ToyLm m;
        m.spec = spec;
        const std::size_t d = spec.d;
        const double inv = 1.0 / std::sqrt(static_cast<double>(d));
        std::mt19937_64 rng(seed);
        m.embeddings = random_matrix(spec.vocab, d, rng, 1.0);
        m.in_proj = random_matrix(d, d, rng, inv);
        m.block = MambaParams::zeros(d, spec.T_max, spec.mode);
        m.block.fused.W = random_matrix(m.block.fused.W.rows(), 3 * d, rng, inv);
        // A = -linspace(0.5, 4); softplus(delta_bias) log-uniform in [1e-3, 1e-1]
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        for (std::size_t j = 0; j < d; ++j) {
            const double frac = d == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(d - 1);
            m.block.A_log[j] = std::log(0.5 + 3.5 * frac);
            const double dt = std::exp(std::log(1e-3) + unif(rng) * (std::log(1e-1) - std::log(1e-3)));
            m.block.delta_bias[j] = dt + std::log(-std::expm1(-dt));
        }
        m.block.gate_enabled = spec.gate;
        if (spec.gate) m.block.gate_weight = random_matrix(d, d, rng, inv);
        m.out_proj = random_matrix(d, d, rng, inv);
        m.head = random_matrix(d, spec.vocab, rng, inv);
        return m;
    }

    std::vector<std::string> role_names() const {
        std::vector<std::string> r = {"embeddings", "in_proj", "fused_buffer", "out_proj"};
        if (spec.gate) r.push_back("gate");
        return r;
    }

    std::vector<std::string> parameter_names() const {
        std::vector<std::string> p = {"embeddings", "in_proj", "fused_buffer", "A_log", "delta_bias"};
        if (spec.gate) p.push_back("gate");
        p.push_back("out_proj");
        p.push_back("head");
        return p;
    }

    Tensor& parameter(const std::string& name) {
        return const_cast<Tensor&>(static_cast<const ToyLm&>(*this).parameter(name));
    }
    const Tensor& parameter(const std::string& name) const {
        if (name == "embeddings") return embeddings;
        if (name == "in_proj") return in_proj;
        if (name == "fused_buffer") return block.fused.W;
        if (name == "A_log") return block.A_log;
        if (name == "delta_bias") return block.delta_bias;
        if (name == "gate" && spec.gate) return block.gate_weight;
        if (name == "out_proj") return out_proj;
        if (name == "head") return head;
        throw Error("unknown parameter '" + name + "'");
    }

    ModelLayout layout() const {
        ModelLayout l;
        for (const auto& name : role_names()) {
            const Tensor& w = parameter(name);
            l.roles.push_back({name, w.rows(), w.cols()});
        }
        for (const auto& name : parameter_names()) l.total_params += parameter(name).size();
        return l;
    }

    bool lora() const noexcept { return !adapters.empty(); }
};

/// Attaches one adapter per selected role; V seeds are derived from `seed`
/// and the role's position in the selection.
inline void attach_adapters(ToyLm& m, const TargetSelection& sel, std::size_t r, double scale, std::uint64_t seed) {
    require(m.adapters.empty(), "adapters already attached");
    for (std::size_t i = 0; i < sel.targeted.size(); ++i) {
        const auto& name = sel.targeted[i];
        m.adapters.emplace(name, attach_lora(m.parameter(name), r, scale, seed * 1000003u + i));
    }
}

inline Container to_container(const ToyLm& m) {
    Container c;
    c.meta = {{"kind", "toy_lm"},
              {"vocab", m.spec.vocab},
              {"d", m.spec.d},
              {"T_max", m.spec.T_max},
              {"mode", std::string(to_string(m.spec.mode))},
              {"gate", m.spec.gate}};
    for (const auto& name : m.parameter_names()) c.tensors.push_back({name, m.parameter(name)});
    if (m.lora()) {
        append_adapters(c, m.adapters);
        // merged W + scale * U V per target
        for (const auto& [name, a] : m.adapters) c.tensors.push_back({name + ".merged", merged_weight(m.parameter(name), a)});
    }
    return c;
}

inline ToyLm toy_lm_from_container(const Container& c) {
    if (c.meta.value("kind", "") != "toy_lm") throw CheckpointError("kind", "not a model checkpoint");
    ToyLmSpec spec;
    try {
        spec.vocab = c.meta.at("vocab").get<std::size_t>();
        spec.d = c.meta.at("d").get<std::size_t>();
        spec.T_max = c.meta.at("T_max").get<std::size_t>();
        spec.mode = parse_buffer_mode(c.meta.at("mode").get<std::string>());
        spec.gate = c.meta.at("gate").get<bool>();
    } catch (const nlohmann::json::exception&) {
        throw CheckpointError("meta", "malformed model metadata");
    }
    ToyLm m = ToyLm::init(spec, 0);
    for (const auto& name : m.parameter_names()) {
        const Tensor& src = c.at(name);
        if (src.shape() != m.parameter(name).shape()) throw CheckpointError(name, "shape does not match metadata");
        m.parameter(name) = src;
    }
    if (has_adapters(c)) {
        m.adapters = adapters_from_container(c);
        for (const auto& [name, a] : m.adapters) {
            const Tensor& base = m.parameter(name);
            if (a.rows() != base.rows() || a.cols() != base.cols())
                throw CheckpointError(name + ".lora_U", "adapter does not match base");
        }
    }
    return m;
}

/// Activations of one forward pass over the valid rows of a batch.
struct ForwardCache {
    std::size_t rows = 0;  // valid sequences
    std::size_t T = 0;
    std::map<std::string, Tensor> eff;  // merged, policy-rounded weights
    MambaParams block;                  // block with effective weights
    std::vector<Token> tokens;
    Tensor x0;      // N x d embedding rows
    Tensor u;       // N x d block input
    std::vector<StateTrace> traces;
    Tensor y;       // N x d block output
    Tensor z;       // N x d
    Tensor logits;  // N x V
};

inline ForwardCache toy_forward(const ToyLm& m, const Batch& batch, const PrecisionPolicy& policy) {
    const std::size_t d = m.spec.d, V = m.spec.vocab, T = batch.T;
    const NumericFormat fmt = policy.activation_format;
    ForwardCache c;
    c.rows = batch.valid_rows;
    c.T = T;
    const std::size_t N = c.rows * T;
    for (const auto& name : m.role_names()) {
        const auto it = m.adapters.find(name);
        Tensor w = it == m.adapters.end() ? m.parameter(name) : merged_weight(m.parameter(name), it->second);
        w.quantize(fmt);
        c.eff.emplace(name, std::move(w));
    }
    c.eff.emplace("head", m.head);
    c.eff.at("head").quantize(fmt);
    c.block.d = d;
    c.block.T_max = m.block.T_max;
    c.block.A_log = m.block.A_log;
    c.block.delta_bias = m.block.delta_bias;
    c.block.fused.mode = m.block.fused.mode;
    c.block.fused.W = c.eff.at("fused_buffer");
    c.block.gate_enabled = m.block.gate_enabled;
    if (m.spec.gate) c.block.gate_weight = c.eff.at("gate");

    c.tokens.assign(batch.inputs.begin(), batch.inputs.begin() + static_cast<std::ptrdiff_t>(N));
    const Tensor& E = c.eff.at("embeddings");
    c.x0 = Tensor(N, d);
    for (std::size_t i = 0; i < N; ++i) {
        const auto tok = static_cast<std::size_t>(c.tokens[i]);
        require(tok < V, "token out of range");
        std::copy_n(E.row(tok).begin(), d, c.x0.row(i).begin());
    }
    c.u = matmul(c.x0, c.eff.at("in_proj"));
    c.u.quantize(fmt);

    c.y = Tensor(N, d);
    c.traces.reserve(c.rows);
    Tensor seq(T, d);
    for (std::size_t b = 0; b < c.rows; ++b) {
        std::copy_n(c.u.data() + b * T * d, T * d, seq.data());
        c.traces.push_back(mamba_forward(c.block, seq, {}, policy, ForwardOptions{.operands_on_grid = true}));
        std::copy_n(c.traces.back().outputs.data(), T * d, c.y.data() + b * T * d);
    }
    c.z = matmul(c.y, c.eff.at("out_proj"));
    c.z.quantize(fmt);
    c.logits = matmul(c.z, c.eff.at("head"));
    c.logits.quantize(fmt);
    return c;
}

struct LossResult {
    double loss = 0.0;
    Tensor dlogits;  // d(loss)/d(logits), N x V
    std::size_t correct = 0;
    std::size_t answer_correct = 0;
    std::size_t answers = 0;  // non-pad targets
};

/// Mean next-token cross-entropy over the valid positions.
inline LossResult cross_entropy(const Tensor& logits, const Batch& batch, Token pad, bool want_grad) {
    const std::size_t N = logits.rows(), V = logits.cols();
    LossResult r;
    if (want_grad) r.dlogits = Tensor(N, V);
    if (N == 0) return r;
    const double inv_n = 1.0 / static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) {
        const auto row = logits.row(i);
        const auto tgt = static_cast<std::size_t>(batch.targets[i]);
        std::size_t arg = 0;
        for (std::size_t k = 1; k < V; ++k)
            if (row[k] > row[arg]) arg = k;
        const double mx = row[arg];
        double se = 0.0;
        for (std::size_t k = 0; k < V; ++k) se += std::exp(row[k] - mx);
        const double lse = mx + std::log(se);
        r.loss += lse - row[tgt];
        r.correct += arg == tgt;
        if (batch.targets[i] != pad) {
            ++r.answers;
            r.answer_correct += arg == tgt;
        }
        if (want_grad) {
            auto g = r.dlogits.row(i);
            for (std::size_t k = 0; k < V; ++k) g[k] = std::exp(row[k] - lse) * inv_n;
            g[tgt] -= inv_n;
        }
    }
    r.loss *= inv_n;
    return r;
}

/// Gradients keyed by trainable tensor name: parameter names under full
/// fine-tuning, "<role>.lora_U" / "<role>.lora_V" under LoRA.
using GradMap = std::map<std::string, Tensor>;

namespace detail {

/// Turns a dense weight gradient into the trainable gradient(s) for `name`.
inline void emit_dense(const ToyLm& m, const std::string& name, Tensor dW, GradMap& out, NumericFormat gfmt) {
    const auto it = m.adapters.find(name);
    if (it != m.adapters.end()) {
        const auto& a = it->second;
        Tensor gU(a.U.rows(), a.r), gV(a.r, a.V.cols());
        as_matrix(gU).noalias() = a.scale * (as_matrix(dW) * as_matrix(a.V).transpose());
        as_matrix(gV).noalias() = a.scale * (as_matrix(a.U).transpose() * as_matrix(dW));
        out[name + ".lora_U"] = std::move(gU.quantize(gfmt));
        out[name + ".lora_V"] = std::move(gV.quantize(gfmt));
    } else if (!m.lora()) {
        out[name] = std::move(dW.quantize(gfmt));
    }
}

/// Trainable gradient(s) for a product out = x W given dL/d(out) = gy. The
/// adapter path never forms the dense x^T gy.
inline void emit_linear(const ToyLm& m, const std::string& name, const Tensor& x, const Tensor& gy, GradMap& out,
                        NumericFormat gfmt) {
    const auto it = m.adapters.find(name);
    if (it != m.adapters.end()) {
        const auto& a = it->second;
        const RowMatrix gyV = as_matrix(gy) * as_matrix(a.V).transpose();  // N x r
        const RowMatrix xU = as_matrix(x) * as_matrix(a.U);                // N x r
        Tensor gU(a.U.rows(), a.r), gV(a.r, a.V.cols());
        as_matrix(gU).noalias() = a.scale * (as_matrix(x).transpose() * gyV);
        as_matrix(gV).noalias() = a.scale * (xU.transpose() * as_matrix(gy));
        out[name + ".lora_U"] = std::move(gU.quantize(gfmt));
        out[name + ".lora_V"] = std::move(gV.quantize(gfmt));
    } else if (!m.lora()) {
        Tensor dW = matmul_tn(x, gy);
        out[name] = std::move(dW.quantize(gfmt));
    }
}

}  // namespace detail

/// Reverse pass from d(loss)/d(logits). Frozen tensors get no gradient.
inline GradMap toy_backward(const ToyLm& m, const ForwardCache& c, const Tensor& dlogits,
                            const PrecisionPolicy& policy) {
    const std::size_t d = m.spec.d, T = c.T, N = c.rows * T;
    const NumericFormat gfmt = policy.gradient_format;
    const bool full = !m.lora();
    GradMap g;

    if (full) {
        Tensor dH = matmul_tn(c.z, dlogits);
        g["head"] = std::move(dH.quantize(gfmt));
    }
    Tensor dz = matmul_nt(dlogits, c.eff.at("head"));
    dz.quantize(gfmt);
    detail::emit_linear(m, "out_proj", c.y, dz, g, gfmt);
    Tensor dy = matmul_nt(dz, c.eff.at("out_proj"));
    dy.quantize(gfmt);

    Tensor du(N, d);
    Tensor gA = Tensor::vector(d), gbias = Tensor::vector(d), ggate(d, d);
    const bool time_indexed = m.spec.mode == BufferMode::TimeIndexed;
    Tensor rows_time, scan_in, rows_in;
    if (time_indexed) rows_time = Tensor(m.block.fused.W.shape());
    else {
        scan_in = Tensor(N, d);
        rows_in = Tensor(N, 3 * d);
    }
    Tensor dseq(T, d);
    for (std::size_t b = 0; b < c.rows; ++b) {
        std::copy_n(dy.data() + b * T * d, T * d, dseq.data());
        const auto& tr = c.traces[b];
        const auto gb =
            mamba_backward(c.block, tr, dseq, BackwardOptions{.fused_weight = false, .weights_on_grid = true});
        std::copy_n(gb.inputs.data(), T * d, du.data() + b * T * d);
        for (std::size_t j = 0; j < d; ++j) {
            gA[j] += gb.A_log[j];
            gbias[j] += gb.delta_bias[j];
        }
        if (m.spec.gate)
            for (std::size_t i = 0; i < d * d; ++i) ggate[i] += gb.gate_weight[i];
        if (time_indexed) {
            for (std::size_t i = 0; i < T * 3 * d; ++i) rows_time[i] += gb.rows[i];
        } else {
            std::copy_n(tr.scan_input.data(), T * d, scan_in.data() + b * T * d);
            std::copy_n(gb.rows.data(), T * 3 * d, rows_in.data() + b * T * 3 * d);
        }
    }
    if (full) {
        g["A_log"] = std::move(gA.quantize(gfmt));
        g["delta_bias"] = std::move(gbias.quantize(gfmt));
    }
    if (m.spec.gate) detail::emit_dense(m, "gate", std::move(ggate), g, gfmt);
    if (time_indexed) detail::emit_dense(m, "fused_buffer", std::move(rows_time), g, gfmt);
    else detail::emit_linear(m, "fused_buffer", scan_in, rows_in, g, gfmt);

    detail::emit_linear(m, "in_proj", c.x0, du, g, gfmt);
    Tensor dx0 = matmul_nt(du, c.eff.at("in_proj"));
    dx0.quantize(gfmt);
    Tensor dE(m.spec.vocab, d);
    for (std::size_t i = 0; i < N; ++i) {
        auto dst = dE.row(static_cast<std::size_t>(c.tokens[i]));
        const auto src = dx0.row(i);
        for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
    }
    detail::emit_dense(m, "embeddings", std::move(dE), g, gfmt);
    return g;
}

struct EvalResult {
    double loss = 0.0;
    double token_accuracy = 0.0;
    double answer_accuracy = 0.0;  // over positions whose target is not padding
    std::size_t tokens = 0;
    std::size_t answers = 0;
};

inline EvalResult evaluate(const ToyLm& m, const std::vector<Batch>& batches, Token pad,
                           const PrecisionPolicy& policy = {}) {
    EvalResult e;
    std::size_t correct = 0, answer_correct = 0;
    double loss_sum = 0.0;
    for (const auto& b : batches) {
        if (b.valid_rows == 0) continue;
        const auto c = toy_forward(m, b, policy);
        const auto r = cross_entropy(c.logits, b, pad, false);
        const std::size_t n = c.logits.rows();
        loss_sum += r.loss * static_cast<double>(n);
        e.tokens += n;
        correct += r.correct;
        answer_correct += r.answer_correct;
        e.answers += r.answers;
    }
    if (e.tokens) {
        e.loss = loss_sum / static_cast<double>(e.tokens);
        e.token_accuracy = static_cast<double>(correct) / static_cast<double>(e.tokens);
    }
    if (e.answers) e.answer_accuracy = static_cast<double>(answer_correct) / static_cast<double>(e.answers);
    return e;
}

}  // namespace ssmdyn
