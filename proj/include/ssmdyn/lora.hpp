#pragma once

// Low-rank adapters W~ = W + scale * U V over frozen weights, the shared
// left-factor check for fused buffers, and ALL/SLL target selection.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ssmdyn/checkpoint.hpp"
#include "ssmdyn/error.hpp"
#include "ssmdyn/linalg.hpp"
#include "ssmdyn/tensor.hpp"

namespace ssmdyn {

/// Trainable factors for one frozen weight. The base itself is owned by the
/// model and passed alongside; the adapter never holds a mutable handle to it.
struct LoraAdapter {
    Tensor U;  // n_rows x r
    Tensor V;  // r x n_cols
    std::size_t r = 0;
    double scale = 1.0;

    std::size_t rows() const noexcept { return U.rows(); }
    std::size_t cols() const noexcept { return V.cols(); }
};

/// U = 0, V ~ N(0, 1/n_cols) from a generator seeded with `seed`.
inline LoraAdapter attach_lora(const Tensor& base, std::size_t r, double scale, std::uint64_t seed) {
    require(base.rank() == 2, "adapter base must be a matrix");
    require(r >= 1, "rank must be positive");
    if (r > std::min(base.rows(), base.cols())) throw Error("rank exceeds matrix");
    LoraAdapter a;
    a.r = r;
    a.scale = scale;
    a.U = Tensor(base.rows(), r);
    a.V = Tensor(r, base.cols());
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(base.cols())));
    for (double& v : a.V.flat()) v = n(rng);
    return a;
}

/// scale * U V
inline Tensor delta_weight(const LoraAdapter& a) {
    Tensor d = matmul(a.U, a.V);
    if (a.scale != 1.0)
        for (double& v : d.flat()) v *= a.scale;
    return d;
}

inline Tensor merged_weight(const Tensor& base, const LoraAdapter& a) {
    require(base.rows() == a.rows() && base.cols() == a.cols(), "adapter does not match base");
    Tensor m = base;
    if (a.scale == 0.0) return m;
    as_matrix(m).noalias() += a.scale * (as_matrix(a.U) * as_matrix(a.V));
    return m;
}

struct TyingReport {
    std::size_t rank_observed = 0;
    std::array<double, 3> segment_residuals{};  // delta, B, C column segments
    bool shared_left_factor_ok = true;
};

inline constexpr double kTyingTolerance = 1e-10;

/// Numerical rank: singular values above tol * sigma_1.
inline std::size_t numerical_rank(const Tensor& m, double tol = kTyingTolerance) {
    if (m.empty()) return 0;
    Eigen::JacobiSVD<RowMatrix> svd(as_matrix(m));
    const auto& s = svd.singularValues();
    if (s.size() == 0 || s(0) == 0.0) return 0;
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s(i) > tol * s(0)) ++k;
    return k;
}

/// Checks that one left factor U explains the update to all three column
/// segments of a fused buffer: for each segment s, min_X ||U X - delta[:, s]||
/// relative to ||delta||.
inline TyingReport verify_tying(const Tensor& U, const Tensor& delta, std::size_t d, std::size_t r) {
    require(delta.rank() == 2 && U.rows() == delta.rows(), "left factor does not match update");
    if (delta.cols() % 3 != 0 || delta.cols() != 3 * d) throw Error("not a fused buffer");
    TyingReport rep;
    rep.rank_observed = numerical_rank(delta);
    const double total = as_matrix(delta).norm();
    const auto Um = as_matrix(U);
    Eigen::CompleteOrthogonalDecomposition<RowMatrix> cod(Um);
    for (std::size_t s = 0; s < 3; ++s) {
        const RowMatrix seg = as_matrix(delta).middleCols(static_cast<Eigen::Index>(s * d), static_cast<Eigen::Index>(d));
        if (total == 0.0) {
            rep.segment_residuals[s] = 0.0;
            continue;
        }
        const RowMatrix X = cod.solve(seg);
        rep.segment_residuals[s] = (Um * X - seg).norm() / total;
    }
    rep.shared_left_factor_ok = rep.rank_observed <= r;
    for (double res : rep.segment_residuals) rep.shared_left_factor_ok = rep.shared_left_factor_ok && res < kTyingTolerance;
    return rep;
}

inline TyingReport verify_tying(const LoraAdapter& a, std::size_t d) {
    if (a.cols() % 3 != 0 || a.cols() != 3 * d) throw Error("not a fused buffer");
    return verify_tying(a.U, delta_weight(a), d, a.r);
}

enum class TargetStrategy { ALL, SLL };

inline std::string_view to_string(TargetStrategy s) { return s == TargetStrategy::ALL ? "all" : "sll"; }

inline TargetStrategy parse_strategy(std::string_view s) {
    if (s == "all" || s == "ALL") return TargetStrategy::ALL;
    if (s == "sll" || s == "SLL") return TargetStrategy::SLL;
    throw Error("unknown target strategy '" + std::string(s) + "'");
}

inline const std::vector<std::string>& known_roles() {
    static const std::vector<std::string> roles = {"embeddings", "in_proj", "fused_buffer", "out_proj", "gate"};
    return roles;
}

/// Adaptable weight matrices of a model plus its total parameter count
/// (adaptable or not).
struct ModelLayout {
    struct Role {
        std::string name;
        std::size_t rows = 0;
        std::size_t cols = 0;
    };
    std::vector<Role> roles;
    std::size_t total_params = 0;

    const Role& role(const std::string& name) const {
        for (const auto& r : roles)
            if (r.name == name) return r;
        throw Error("unknown weight role '" + name + "'");
    }
};

struct TargetSelection {
    TargetStrategy strategy = TargetStrategy::SLL;
    std::vector<std::string> targeted;

    bool contains(const std::string& name) const {
        return std::find(targeted.begin(), targeted.end(), name) != targeted.end();
    }
};

inline TargetSelection select_targets(const ModelLayout& model, TargetStrategy strategy) {
    const auto& known = known_roles();
    bool has_fused = false;
    for (const auto& r : model.roles) {
        if (std::find(known.begin(), known.end(), r.name) == known.end())
            throw Error("unknown weight role '" + r.name + "'");
        has_fused = has_fused || r.name == "fused_buffer";
    }
    TargetSelection sel;
    sel.strategy = strategy;
    if (strategy == TargetStrategy::SLL && !has_fused) throw Error("missing x_proj role");
    for (const auto& r : model.roles)
        if (strategy == TargetStrategy::ALL || r.name != "gate") sel.targeted.push_back(r.name);
    return sel;
}

struct ParamCount {
    std::size_t trainable = 0;
    std::size_t total = 0;
};

inline ParamCount trainable_param_count(const ModelLayout& model, const TargetSelection& sel, std::size_t r) {
    ParamCount pc;
    pc.total = model.total_params;
    for (const auto& name : sel.targeted) {
        const auto& role = model.role(name);
        pc.trainable += r * (role.rows + role.cols);
    }
    return pc;
}

using AdapterSet = std::map<std::string, LoraAdapter>;

/// Adapter tensors are named <target>.lora_U / <target>.lora_V.
inline void append_adapters(Container& c, const AdapterSet& adapters) {
    nlohmann::json targets = nlohmann::json::array();
    for (const auto& [name, a] : adapters) {
        targets.push_back({{"name", name}, {"r", a.r}, {"scale", a.scale}});
        c.tensors.push_back({name + ".lora_U", a.U});
        c.tensors.push_back({name + ".lora_V", a.V});
    }
    c.meta["lora"] = {{"targets", targets}};
    if (!adapters.empty()) {
        c.meta["lora"]["r"] = adapters.begin()->second.r;
        c.meta["lora"]["scale"] = adapters.begin()->second.scale;
    }
}

inline bool has_adapters(const Container& c) { return c.meta.contains("lora"); }

inline AdapterSet adapters_from_container(const Container& c) {
    if (!has_adapters(c)) throw CheckpointError("lora", "checkpoint has no adapter");
    AdapterSet out;
    try {
        for (const auto& t : c.meta.at("lora").at("targets")) {
            const auto name = t.at("name").get<std::string>();
            LoraAdapter a;
            a.r = t.at("r").get<std::size_t>();
            a.scale = t.at("scale").get<double>();
            a.U = c.at(name + ".lora_U");
            a.V = c.at(name + ".lora_V");
            if (a.U.rank() != 2 || a.V.rank() != 2 || a.U.cols() != a.r || a.V.rows() != a.r)
                throw CheckpointError(name + ".lora_U", "adapter factors do not match rank");
            out.emplace(name, std::move(a));
        }
    } catch (const nlohmann::json::exception&) {
        throw CheckpointError("lora", "malformed adapter metadata");
    }
    return out;
}

}  // namespace ssmdyn
