#pragma once

// Fine-tuning harness: cosine schedule with linear warmup, AdamW with
// decoupled weight decay, global-norm clipping, full or adapter-only updates
// under a precision policy, and the ATPS / MMPT counters.

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssmdyn/data.hpp"
#include "ssmdyn/model.hpp"
#include "ssmdyn/precision.hpp"
#include "ssmdyn/tensor.hpp"

namespace ssmdyn {

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t lora_rank = 0;  // 0 = full fine-tuning
    double lora_scale = 1.0;
    TargetStrategy strategy = TargetStrategy::SLL;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 0;
    std::size_t batch_size = 16;
    std::size_t max_seq_len = 64;
    double clip_norm = 1.0;
    std::size_t epochs = 0;  // when nonzero, overrides total_steps with whole epochs
    std::uint64_t seed = 0;
    double loss_scale = 1.0;  // static loss scaling, off by default

    void validate() const {
        require(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate must be finite and >= 0");
        require(batch_size >= 1, "batch_size must be positive");
        require(max_seq_len >= 1, "max_seq_len must be positive");
        require(clip_norm > 0.0, "clip_norm must be positive");
        require(loss_scale > 0.0 && std::isfinite(loss_scale), "loss_scale must be positive");
        require(warmup_steps <= total_steps || epochs > 0, "warmup_steps exceeds total_steps");
    }

    bool full() const noexcept { return lora_rank == 0; }
};

struct Preset {
    std::string name;
    double learning_rate;
    std::size_t lora_rank;
};

/// Per-size (learning rate, r) pairs of the reference recipe, smallest first.
inline const std::vector<Preset>& presets() {
    static const std::vector<Preset> p = {
        {"table3-small", 1.0e-5, 8},  {"table3-medium", 5.0e-5, 16}, {"table3-large", 1.0e-6, 32},
        {"table3-xl", 5.0e-6, 64},    {"table3-xxl", 5.0e-7, 128},
    };
    return p;
}

inline const Preset& find_preset(const std::string& name) {
    for (const auto& p : presets())
        if (p.name == name) return p;
    throw Error("unknown preset '" + name + "'");
}

/// Linear ramp to learning_rate over warmup_steps, then cosine annealing to 0
/// at total_steps.
inline double cosine_lr(std::size_t step, const TrainConfig& cfg) {
    const double lr = cfg.learning_rate;
    if (step < cfg.warmup_steps) return lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (cfg.total_steps <= cfg.warmup_steps) return step == cfg.warmup_steps ? lr : 0.0;
    const double p = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) /
                                       static_cast<double>(cfg.total_steps - cfg.warmup_steps));
    return std::max(0.0, lr * 0.5 * (1.0 + std::cos(std::numbers::pi * p)));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;
};

struct ParamRef {
    std::string name;
    Tensor* value;
};

/// One AdamW update in `master` precision; m and v are created on first use.
inline void adamw_step(const std::vector<ParamRef>& params, const std::vector<const Tensor*>& grads, AdamState& st,
                       double lr, const AdamWConfig& cfg = {}, NumericFormat master = NumericFormat::FP64) {
    require(params.size() == grads.size(), "parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].value->same_shape(*grads[i])) throw Error("gradient shape mismatch for " + params[i].name);
        for (double g : grads[i]->flat())
            if (!std::isfinite(g)) throw Error("non-finite gradient: " + params[i].name);
    }
    if (st.m.empty()) {
        for (const auto& p : params) {
            st.m.emplace_back(p.value->shape());
            st.v.emplace_back(p.value->shape());
        }
    }
    require(st.m.size() == params.size(), "optimizer state does not match parameters");
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    const double decay = 1.0 - lr * cfg.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].value->flat();
        const auto g = grads[i]->flat();
        auto m = st.m[i].flat();
        auto v = st.v[i].flat();
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p[k] = p[k] * decay - lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        quantize_inplace(st.m[i].flat(), master);
        quantize_inplace(st.v[i].flat(), master);
        params[i].value->quantize(master);
    }
}

/// Scales all gradients by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm observed before clipping.
inline double clip_grad_norm(const std::vector<Tensor*>& grads, double max_norm = 1.0) {
    double ss = 0.0;
    for (const Tensor* g : grads)
        for (double v : g->flat()) ss += v * v;
    const double norm = std::sqrt(ss);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (Tensor* g : grads)
            for (double& v : g->flat()) v *= s;
    }
    return norm;
}

struct StepRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct TrainMetrics {
    std::vector<StepRecord> steps;
    double atps = 0.0;
    double mmpt = 0.0;
    std::size_t peak_bytes = 0;
    std::size_t total_tokens = 0;
    double wall_seconds = 0.0;
    std::size_t trainable_params = 0;
    std::size_t total_params = 0;
    std::optional<std::size_t> stopped_at;  // set when a hook ended training early

    std::vector<double> loss_trace() const {
        std::vector<double> out;
        for (const auto& s : steps) out.push_back(s.loss);
        return out;
    }
};

struct TrainHooks {
    std::size_t every = 0;
    /// Called after every `every` steps (excluded from wall time); returning
    /// true stops training.
    std::function<bool(std::size_t steps_done, const ToyLm&)> check;
};

inline std::size_t resolved_steps(const TrainConfig& cfg, const BatchStream& data) {
    return cfg.epochs > 0 ? cfg.epochs * data.batches_per_epoch() : cfg.total_steps;
}

/// Trains `model` in place. With cfg.lora_rank > 0 adapters are attached to
/// the strategy's targets (unless already present) and only they are updated.
inline TrainMetrics train_loop(ToyLm& model, const TrainConfig& cfg_in, const PrecisionPolicy& policy,
                               BatchStream& data, const TrainHooks& hooks = {}) {
    cfg_in.validate();
    policy.validate();
    require(!data.empty(), "training data is empty");
    require(data.batch_size() == cfg_in.batch_size, "batch_size does not match the data stream");
    require(data.seq_len() == cfg_in.max_seq_len, "max_seq_len does not match the data stream");
    require(data.vocab_size() <= model.spec.vocab, "data vocabulary exceeds model vocabulary");
    TrainConfig cfg = cfg_in;
    cfg.total_steps = resolved_steps(cfg_in, data);
    require(cfg.warmup_steps <= cfg.total_steps, "warmup_steps exceeds total_steps");

    MemoryMeter::reset();
    if (!cfg.full() && !model.lora())
        attach_adapters(model, select_targets(model.layout(), cfg.strategy), cfg.lora_rank, cfg.lora_scale,
                        cfg.seed);

    std::vector<ParamRef> params;
    if (model.lora()) {
        for (auto& [name, a] : model.adapters) {
            params.push_back({name + ".lora_U", &a.U});
            params.push_back({name + ".lora_V", &a.V});
        }
    } else {
        for (const auto& name : model.parameter_names()) params.push_back({name, &model.parameter(name)});
    }
    for (auto& p : params) p.value->quantize(policy.master_format);

    TrainMetrics out;
    out.total_params = model.layout().total_params;
    for (const auto& p : params) out.trainable_params += p.value->size();

    AdamState opt;
    const AdamWConfig adam;
    using Clock = std::chrono::steady_clock;
    Clock::duration busy{};
    auto t0 = Clock::now();
    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        const Batch batch = data.next();
        const double lr = cosine_lr(step, cfg);
        const auto cache = toy_forward(model, batch, policy);
        auto ce = cross_entropy(cache.logits, batch, data.pad_id(), true);
        if (!std::isfinite(ce.loss)) throw Error("non-finite loss at step " + std::to_string(step));
        if (cfg.loss_scale != 1.0)
            for (double& v : ce.dlogits.flat()) v *= cfg.loss_scale;
        ce.dlogits.quantize(policy.gradient_format);
        GradMap grads = toy_backward(model, cache, ce.dlogits, policy);

        std::vector<Tensor*> gptr;
        std::vector<const Tensor*> gconst;
        for (const auto& p : params) {
            auto it = grads.find(p.name);
            if (it == grads.end()) throw Error("missing gradient for " + p.name);
            Tensor& g = it->second;
            if (cfg.loss_scale != 1.0)
                for (double& v : g.flat()) v /= cfg.loss_scale;
            g.quantize(policy.master_format);
            gptr.push_back(&g);
            gconst.push_back(&g);
        }
        const double norm = clip_grad_norm(gptr, cfg.clip_norm);
        adamw_step(params, gconst, opt, lr, adam, policy.master_format);
        out.steps.push_back({step, lr, ce.loss, norm});
        out.total_tokens += batch.rows * batch.T;

        if (hooks.every && hooks.check && (step + 1) % hooks.every == 0) {
            busy += Clock::now() - t0;
            const bool stop = hooks.check(step + 1, model);
            t0 = Clock::now();
            if (stop) {
                out.stopped_at = step + 1;
                break;
            }
        }
    }
    busy += Clock::now() - t0;
    out.wall_seconds = std::chrono::duration<double>(busy).count();
    out.atps = out.wall_seconds > 0.0 ? static_cast<double>(out.total_tokens) / out.wall_seconds : 0.0;
    out.peak_bytes = memory_meter();
    out.mmpt = static_cast<double>(out.peak_bytes) / static_cast<double>(cfg.batch_size * cfg.max_seq_len);
    return out;
}

inline nlohmann::json config_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"lora_rank", c.lora_rank},     {"lora_scale", c.lora_scale},
            {"strategy", std::string(to_string(c.strategy))},                     {"warmup_steps", c.warmup_steps},
            {"total_steps", c.total_steps},     {"batch_size", c.batch_size},   {"max_seq_len", c.max_seq_len},
            {"clip_norm", c.clip_norm},         {"epochs", c.epochs},           {"seed", c.seed},
            {"loss_scale", c.loss_scale}};
}

inline nlohmann::json metrics_json(const TrainMetrics& m, const TrainConfig& cfg, const PrecisionPolicy& policy) {
    return {{"config", config_json(cfg)},
            {"loss_trace", m.loss_trace()},
            {"atps", m.atps},
            {"mmpt", m.mmpt},
            {"peak_bytes", m.peak_bytes},
            {"total_tokens", m.total_tokens},
            {"wall_seconds", m.wall_seconds},
            {"precision_policy", policy.name()},
            {"trainable_params", m.trainable_params},
            {"total_params", m.total_params}};
}

}  // namespace ssmdyn
