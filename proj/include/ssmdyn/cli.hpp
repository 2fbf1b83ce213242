#pragma once

// Experiment runner behind the `ssmdyn` tool.
//
// Config files are flat, typed key = value text with one section per
// subcommand:
//
//   # comment
//   [divergence]
//   draws = 100
//   epsilons = 1e-4, 1e-2
//   policies = fp64, bf16
//
// Lists are comma-separated. Unknown sections and keys are errors. Overrides
// given as key=value (or section.key=value) win over the file; --seed wins
// over the config, which wins over SSMDYNLAB_SEED, which defaults to 0.
//
// Every run writes manifest.json (resolved config, version, seed, workers)
// into the output directory before anything else, then report.json, which
// depends only on (config, seed, workers). Wall-clock measurements go to
// separate files (timing.json, timing.csv, metrics.json).

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssmdyn/checkpoint.hpp"
#include "ssmdyn/data.hpp"
#include "ssmdyn/dynamics.hpp"
#include "ssmdyn/error.hpp"
#include "ssmdyn/lora.hpp"
#include "ssmdyn/model.hpp"
#include "ssmdyn/scan.hpp"
#include "ssmdyn/train.hpp"

namespace ssmdyn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kSeedEnv = "SSMDYNLAB_SEED";

enum class KeyType { Int, Real, Bool, String, IntList, RealList, StringList };

struct KeySpec {
    std::string name;
    KeyType type;
    std::string fallback;
};

inline const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> s = {"lyapunov", "divergence", "scan-bench", "train", "lora-verify", "report"};
    return s;
}

inline const std::vector<KeySpec>& schema(const std::string& section) {
    using K = KeyType;
    static const std::map<std::string, std::vector<KeySpec>> all = {
        {"lyapunov",
         {{"seed", K::Int, "0"},
          {"workers", K::Int, "1"},
          {"draws", K::Int, "1000"},
          {"d", K::IntList, "1, 4, 16"},
          {"T", K::IntList, "64, 512"},
          {"mode", K::String, "time_indexed"},
          {"w_std", K::Real, "1.0"},
          {"input_std", K::Real, "1.0"}}},
        {"divergence",
         {{"seed", K::Int, "0"},
          {"workers", K::Int, "1"},
          {"draws", K::Int, "100"},
          {"d", K::Int, "4"},
          {"T", K::Int, "256"},
          {"mode", K::String, "time_indexed"},
          {"epsilons", K::RealList, "1e-4, 1e-2"},
          {"policies", K::StringList, "fp64, fp32, fp16, bf16"},
          {"perturb", K::String, "both"},
          {"w_std", K::Real, "1.0"},
          {"input_std", K::Real, "1.0"}}},
        {"scan-bench",
         {{"seed", K::Int, "0"},
          {"workers", K::IntList, "1, 2, 4"},
          {"T", K::IntList, "1, 2, 3, 17, 1024, 4096"},
          {"d", K::Int, "16"},
          {"chunk", K::Int, "0"},
          {"instances", K::Int, "5"},
          {"repeats", K::Int, "3"},
          {"format", K::String, "fp64"}}},
        {"train",
         {{"seed", K::Int, "0"},
          {"workers", K::Int, "1"},
          {"preset", K::String, ""},
          {"task", K::String, "selective_copy"},
          {"corpus", K::String, ""},
          {"init_checkpoint", K::String, ""},
          {"vocab", K::Int, "16"},
          {"k", K::Int, "1"},
          {"n_train", K::Int, "8192"},
          {"n_eval", K::Int, "256"},
          {"d", K::Int, "64"},
          {"mode", K::String, "input_projected"},
          {"gate", K::Bool, "false"},
          {"policy", K::String, "fp32"},
          {"learning_rate", K::Real, "1e-3"},
          {"lora_rank", K::Int, "0"},
          {"lora_scale", K::Real, "1.0"},
          {"strategy", K::String, "sll"},
          {"warmup_steps", K::Int, "0"},
          {"total_steps", K::Int, "200"},
          {"epochs", K::Int, "0"},
          {"batch_size", K::Int, "16"},
          {"max_seq_len", K::Int, "64"},
          {"clip_norm", K::Real, "1.0"},
          {"loss_scale", K::Real, "1.0"},
          {"eval_every", K::Int, "0"},
          {"target_accuracy", K::Real, "0"},
          {"compare", K::Bool, "false"},
          {"compare_rank", K::Int, "2"},
          {"compare_policy", K::String, "bf16"},
          {"compare_learning_rate", K::Real, "3e-3"},
          {"require_faster", K::Bool, "false"}}},
        {"lora-verify",
         {{"seed", K::Int, "0"},
          {"workers", K::Int, "1"},
          {"checkpoint", K::String, ""},
          {"target", K::String, "fused_buffer"}}},
        {"report", {{"seed", K::Int, "0"}, {"workers", K::Int, "1"}, {"runs", K::String, ""}}},
    };
    auto it = all.find(section);
    if (it == all.end()) throw ConfigError(section, "unknown config section");
    return it->second;
}

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    if (trim(text).empty()) return out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) out.push_back(trim(item));
    return out;
}

inline std::int64_t parse_int(const std::string& key, const std::string& s) {
    std::int64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) throw ConfigError(key, "expected an integer");
    return v;
}

inline double parse_real(const std::string& key, const std::string& s) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) throw ConfigError(key, "expected a number");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(key, "expected true or false");
}

/// Shortest round-trip text for a double.
inline std::string num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace detail

/// Resolved, typed settings for one subcommand.
class Config {
public:
    explicit Config(std::string section) : section_(std::move(section)), schema_(&schema(section_)) {
        for (const auto& k : *schema_) raw_[k.name] = k.fallback;
    }

    const std::string& section() const noexcept { return section_; }

    void set(const std::string& key, const std::string& value) {
        const KeySpec& k = spec(key);
        check(k, value);
        raw_[key] = value;
        given_.insert(key);
    }

    bool given(const std::string& key) const {
        spec(key);
        return given_.count(key) > 0;
    }

    std::int64_t integer(const std::string& key) const { return detail::parse_int(key, raw(key, KeyType::Int)); }

    std::size_t count(const std::string& key) const {
        const auto v = integer(key);
        if (v < 0) throw ConfigError(key, "expected a non-negative integer");
        return static_cast<std::size_t>(v);
    }

    double real(const std::string& key) const { return detail::parse_real(key, raw(key, KeyType::Real)); }
    bool flag(const std::string& key) const { return detail::parse_bool(key, raw(key, KeyType::Bool)); }
    std::string text(const std::string& key) const { return detail::trim(raw(key, KeyType::String)); }

    std::vector<std::size_t> counts(const std::string& key) const {
        std::vector<std::size_t> out;
        for (const auto& s : detail::split_list(raw(key, KeyType::IntList))) {
            const auto v = detail::parse_int(key, s);
            if (v < 0) throw ConfigError(key, "expected non-negative integers");
            out.push_back(static_cast<std::size_t>(v));
        }
        return out;
    }

    std::vector<double> reals(const std::string& key) const {
        std::vector<double> out;
        for (const auto& s : detail::split_list(raw(key, KeyType::RealList))) out.push_back(detail::parse_real(key, s));
        return out;
    }

    std::vector<std::string> texts(const std::string& key) const {
        return detail::split_list(raw(key, KeyType::StringList));
    }

    json to_json() const {
        json j = json::object();
        for (const auto& k : *schema_) {
            switch (k.type) {
                case KeyType::Int: j[k.name] = integer(k.name); break;
                case KeyType::Real: j[k.name] = real(k.name); break;
                case KeyType::Bool: j[k.name] = flag(k.name); break;
                case KeyType::String: j[k.name] = text(k.name); break;
                case KeyType::IntList: j[k.name] = counts(k.name); break;
                case KeyType::RealList: j[k.name] = reals(k.name); break;
                case KeyType::StringList: j[k.name] = texts(k.name); break;
            }
        }
        return j;
    }

private:
    const KeySpec& spec(const std::string& key) const {
        for (const auto& k : *schema_)
            if (k.name == key) return k;
        throw ConfigError(key, "unknown config key");
    }

    const std::string& raw(const std::string& key, KeyType want) const {
        const KeySpec& k = spec(key);
        require(k.type == want, "config key read with the wrong type");
        return raw_.at(key);
    }

    static void check(const KeySpec& k, const std::string& v) {
        const std::string t = detail::trim(v);
        switch (k.type) {
            case KeyType::Int: detail::parse_int(k.name, t); break;
            case KeyType::Real: detail::parse_real(k.name, t); break;
            case KeyType::Bool: detail::parse_bool(k.name, t); break;
            case KeyType::IntList:
                for (const auto& s : detail::split_list(t)) detail::parse_int(k.name, s);
                break;
            case KeyType::RealList:
                for (const auto& s : detail::split_list(t)) detail::parse_real(k.name, s);
                break;
            case KeyType::String:
            case KeyType::StringList: break;
        }
    }

    std::string section_;
    const std::vector<KeySpec>* schema_ = nullptr;
    std::map<std::string, std::string> raw_;
    std::set<std::string> given_;
};

struct ConfigEntry {
    std::string section;
    std::string key;
    std::string value;
};

/// Parses config text into (section, key, value) entries, validating section
/// names but not keys.
inline std::vector<ConfigEntry> parse_config_text(const std::string& text) {
    std::vector<ConfigEntry> out;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        for (std::size_t i = 0; i < line.size(); ++i)
            if (line[i] == '#' && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
                line.resize(i);
                break;
            }
        const std::string s = detail::trim(line);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError("line " + std::to_string(lineno), "malformed section header");
            section = detail::trim(std::string_view(s).substr(1, s.size() - 2));
            schema(section);
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
        const std::string key = detail::trim(std::string_view(s).substr(0, eq));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
        if (section.empty()) throw ConfigError(key, "key outside a section");
        out.push_back({section, key, detail::trim(std::string_view(s).substr(eq + 1))});
    }
    return out;
}

struct RunSpec {
    std::string subcommand;
    fs::path config_path;  // empty: defaults only
    fs::path output_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    std::vector<std::string> overrides;  // key=value or section.key=value
};

/// Applies, in increasing precedence: schema defaults, SSMDYNLAB_SEED (seed
/// only), the config file, overrides, and the seed/workers flags.
inline Config resolve_config(const RunSpec& spec) {
    Config cfg(spec.subcommand);
    if (const char* env = std::getenv(kSeedEnv); env && *env) {
        try {
            cfg.set("seed", env);
        } catch (const ConfigError&) {
            throw ConfigError(kSeedEnv, "expected an integer");
        }
    }
    if (!spec.config_path.empty()) {
        std::ifstream in(spec.config_path, std::ios::binary);
        if (!in || fs::is_directory(spec.config_path)) throw Error("cannot read config " + spec.config_path.string());
        const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const auto entries = parse_config_text(text);
        for (const auto& e : entries) {
            if (e.section == spec.subcommand) cfg.set(e.key, e.value);
            else Config(e.section).set(e.key, e.value);  // other sections are still validated
        }
    }
    for (const auto& o : spec.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError(o, "override must be key=value");
        std::string key = detail::trim(std::string_view(o).substr(0, eq));
        const auto dot = key.find('.');
        if (dot != std::string::npos) {
            const std::string section = key.substr(0, dot);
            if (section != spec.subcommand) throw ConfigError(key, "override targets another subcommand");
            key = key.substr(dot + 1);
        }
        cfg.set(key, detail::trim(std::string_view(o).substr(eq + 1)));
    }
    if (spec.seed) cfg.set("seed", std::to_string(*spec.seed));
    if (spec.workers) cfg.set("workers", std::to_string(*spec.workers));
    return cfg;
}

/// Output directory held for the lifetime of a run. A `.lock` file created
/// exclusively keeps a second run from writing into the same directory.
class OutputDir {
public:
    explicit OutputDir(fs::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec || !fs::is_directory(dir_)) throw Error("cannot create output directory " + dir_.string());
        lock_ = dir_ / ".lock";
        const int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) {
            if (errno == EEXIST) throw Error("output directory is locked by another run: " + dir_.string());
            throw Error("cannot lock output directory " + dir_.string());
        }
        ::close(fd);
    }
    OutputDir(const OutputDir&) = delete;
    OutputDir& operator=(const OutputDir&) = delete;
    ~OutputDir() {
        std::error_code ec;
        fs::remove(lock_, ec);
    }

    const fs::path& path() const noexcept { return dir_; }
    fs::path operator/(const std::string& name) const { return dir_ / name; }

    void write_text(const std::string& name, const std::string& text) const {
        const auto p = dir_ / name;
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out << text;
        out.close();
        if (!out) throw Error("cannot write " + p.string());
    }

    void write_json(const std::string& name, const json& j) const { write_text(name, j.dump(2) + "\n"); }

private:
    fs::path dir_;
    fs::path lock_;
};

inline json manifest_json(const std::string& subcommand, const Config& cfg) {
    return {{"schema_version", kSchemaVersion},
            {"subcommand", subcommand},
            {"version", kVersion},
            {"seed", cfg.count("seed")},
            {"workers", cfg.section() == "scan-bench" ? json(cfg.counts("workers")) : json(cfg.count("workers"))},
            {"config", cfg.to_json()}};
}

inline json report_header(const std::string& subcommand) {
    return {{"schema_version", kSchemaVersion}, {"subcommand", subcommand}};
}

/// CSV writer with a fixed header; doubles use shortest round-trip text.
class Csv {
public:
    explicit Csv(const std::vector<std::string>& header) {
        out_ << "# schema_version=" << kSchemaVersion << "\n";
        row_strings(header);
    }
    template <class... Ts>
    Csv& row(const Ts&... cells) {
        std::vector<std::string> s;
        (s.push_back(cell(cells)), ...);
        row_strings(s);
        return *this;
    }
    std::string str() const { return out_.str(); }

private:
    static std::string cell(double v) { return detail::num(v); }
    static std::string cell(const std::string& v) { return v; }
    static std::string cell(const char* v) { return v; }
    template <class I>
        requires std::is_integral_v<I>
    static std::string cell(I v) { return std::to_string(v); }

    void row_strings(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << "\n";
    }
    std::ostringstream out_;
};

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline json nullable(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// ---------------------------------------------------------------- lyapunov

inline int run_lyapunov(const Config& cfg, const OutputDir& out) {
    const auto t0 = Clock::now();
    const std::size_t draws = cfg.count("draws");
    if (draws == 0) throw Error("no draws requested");
    const auto ds = cfg.counts("d");
    const auto Ts = cfg.counts("T");
    if (ds.empty()) throw ConfigError("d", "empty list");
    if (Ts.empty()) throw ConfigError("T", "empty list");
    const BufferMode mode = parse_buffer_mode(cfg.text("mode"));

    std::mt19937_64 rng(cfg.count("seed"));
    json records = json::array();
    Csv csv({"draw", "d", "T", "lambda_max", "closed_form_lambda_max", "max_abs_difference"});
    std::size_t positive = 0;
    double max_lambda = -std::numeric_limits<double>::infinity(), max_diff = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
        const std::size_t d = ds[i % ds.size()];
        const std::size_t T = Ts[(i / ds.size()) % Ts.size()];
        const auto block = draw_block(
            RandomBlockSpec{.d = d, .T = T, .mode = mode, .w_std = cfg.real("w_std"), .input_std = cfg.real("input_std")},
            rng);
        const auto numeric = lyapunov_numeric(block.params, block.u);
        const auto tr = mamba_forward(block.params, block.u);
        const auto closed = lyapunov_closed_form(block.params.A_log.flat(), tr.delta_bar);
        double diff = 0.0;
        for (std::size_t j = 0; j < d; ++j) diff = std::max(diff, std::fabs(numeric.per_dim[j] - closed.per_dim[j]));
        if (numeric.lambda_max > 0.0) ++positive;
        max_lambda = std::max(max_lambda, numeric.lambda_max);
        max_diff = std::max(max_diff, diff);
        records.push_back({{"draw", i},
                           {"d", d},
                           {"T", T},
                           {"lambda_max", numeric.lambda_max},
                           {"per_dim", numeric.per_dim},
                           {"closed_form_per_dim", closed.per_dim},
                           {"max_abs_difference", diff}});
        csv.row(i, d, T, numeric.lambda_max, closed.lambda_max, diff);
    }
    json report = report_header("lyapunov");
    report["summary"] = {{"draws", draws},
                         {"positive_count", positive},
                         {"max_lambda", max_lambda},
                         {"max_closed_form_difference", max_diff}};
    report["records"] = std::move(records);
    out.write_json("report.json", report);
    out.write_text("lyapunov.csv", csv.str());
    out.write_json("timing.json", {{"schema_version", kSchemaVersion}, {"wall_seconds", seconds_since(t0)}});
    return 0;
}

// -------------------------------------------------------------- divergence

inline std::optional<double> try_fit(const DivergenceTrace& tr) {
    try {
        return fit_deviation_rate(tr);
    } catch (const Error&) {
        return std::nullopt;  // too few nonzero deviations
    }
}

inline int run_divergence(const Config& cfg, const OutputDir& out) {
    const auto t0 = Clock::now();
    const std::size_t draws = cfg.count("draws");
    if (draws == 0) throw Error("no draws requested");
    const std::size_t d = cfg.count("d"), T = cfg.count("T");
    const auto epsilons = cfg.reals("epsilons");
    const auto policy_names = cfg.texts("policies");
    if (epsilons.empty()) throw ConfigError("epsilons", "empty list");
    if (policy_names.empty()) throw ConfigError("policies", "empty list");
    const Perturb perturb = parse_perturb(cfg.text("perturb"));
    const BufferMode mode = parse_buffer_mode(cfg.text("mode"));
    std::vector<PrecisionPolicy> policies;
    for (const auto& p : policy_names) policies.push_back(PrecisionPolicy::named(p));

    std::mt19937_64 rng(cfg.count("seed"));
    std::vector<RandomBlock> blocks;
    for (std::size_t i = 0; i < draws; ++i)
        blocks.push_back(draw_block(
            RandomBlockSpec{.d = d, .T = T, .mode = mode, .w_std = cfg.real("w_std"), .input_std = cfg.real("input_std")},
            rng));

    json traces = json::array(), summary = json::array();
    std::map<std::string, double> mean_div;
    std::optional<double> worst_zeta;
    for (std::size_t pi = 0; pi < policies.size(); ++pi) {
        const auto& policy = policies[pi];
        const std::string pname = std::string(to_string(policy.activation_format));
        for (double eps : epsilons) {
            std::vector<double> mean(T, 0.0);
            std::optional<double> zeta_max;
            std::size_t fitted = 0, overflowed = 0;
            for (const auto& b : blocks) {
                const auto tr = divergence_probe(b.params, b.u, eps, perturb, policy);
                if (tr.overflowed) ++overflowed;
                for (std::size_t t = 0; t < T; ++t) mean[t] += tr.deviations[t] / static_cast<double>(draws);
                if (const auto z = try_fit(tr)) {
                    ++fitted;
                    zeta_max = zeta_max ? std::max(*zeta_max, *z) : *z;
                }
            }
            DivergenceTrace mean_trace;
            mean_trace.epsilon = eps;
            mean_trace.deviations = mean;
            const auto zeta = try_fit(mean_trace);
            if (zeta) worst_zeta = worst_zeta ? std::max(*worst_zeta, *zeta) : *zeta;
            const std::string file = "divergence_" + pname + "_eps" + detail::num(eps) + ".csv";
            Csv csv({"step", "deviation"});
            for (std::size_t t = 0; t < T; ++t) csv.row(t + 1, mean[t]);
            out.write_text(file, csv.str());
            traces.push_back({{"policy", pname},
                              {"epsilon", eps},
                              {"zeta", nullable(zeta)},
                              {"zeta_max", nullable(zeta_max)},
                              {"fitted_draws", fitted},
                              {"overflowed_draws", overflowed},
                              {"first_deviation", mean.front()},
                              {"last_deviation", mean.back()},
                              {"csv", file}});
        }
        // rounding-only divergence from the FP64 trajectory
        double total = 0.0;
        std::vector<double> pooled(T, 0.0);
        for (const auto& b : blocks) {
            const auto ref = mamba_forward(b.params, b.u, {}, PrecisionPolicy::fp64());
            const auto test = mamba_forward(b.params, b.u, {}, policy);
            total += mean_abs_difference(ref.states, test.states);
            const auto tr = precision_probe(b.params, b.u, policy);
            for (std::size_t t = 0; t < T; ++t) pooled[t] += tr.deviations[t];
        }
        const double md = total / static_cast<double>(draws);
        mean_div[pname] = md;
        summary.push_back({{"policy", pname},
                           {"mean_divergence", md},
                           {"second_half_over_first_half", T >= 2 ? json(half_ratio(pooled)) : json(nullptr)}});
    }
    json report = report_header("divergence");
    json s = {{"policies", summary}, {"max_zeta", nullable(worst_zeta)}};
    if (mean_div.count("bf16") && mean_div.count("fp16")) s["bf16_exceeds_fp16"] = mean_div["bf16"] > mean_div["fp16"];
    report["summary"] = std::move(s);
    report["traces"] = std::move(traces);
    out.write_json("report.json", report);
    out.write_json("timing.json", {{"schema_version", kSchemaVersion}, {"wall_seconds", seconds_since(t0)}});
    return 0;
}

// -------------------------------------------------------------- scan-bench

inline std::size_t default_chunk(std::size_t T) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(T)))));
}

inline double relative_deviation(const Tensor& test, const Tensor& ref) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        num = std::max(num, std::fabs(test[i] - ref[i]));
        den = std::max(den, std::fabs(ref[i]));
    }
    return den > 0.0 ? num / den : num;
}

inline int run_scan_bench(const Config& cfg, const OutputDir& out) {
    const auto Ts = cfg.counts("T");
    const auto workers = cfg.counts("workers");
    const std::size_t d = cfg.count("d"), instances = cfg.count("instances");
    const std::size_t repeats = std::max<std::size_t>(1, cfg.count("repeats"));
    const NumericFormat fmt = parse_format(cfg.text("format"));
    if (Ts.empty()) throw ConfigError("T", "empty list");
    if (workers.empty()) throw ConfigError("workers", "empty list");
    if (instances == 0) throw ConfigError("instances", "must be positive");
    for (auto w : workers)
        if (w == 0) throw ConfigError("workers", "must be positive");
    if (d == 0) throw ConfigError("d", "must be positive");

    std::mt19937_64 rng(cfg.count("seed"));
    std::uniform_real_distribution<double> ua(0.05, 1.0);
    std::normal_distribution<double> nb(0.0, 1.0);
    json rows = json::array();
    Csv timing({"T", "workers", "chunk", "sequential_seconds", "parallel_seconds"});
    double worst = 0.0;
    bool all_identical = true;
    for (std::size_t T : Ts) {
        if (T == 0) throw ConfigError("T", "must be positive");
        const std::size_t chunk = cfg.count("chunk") ? cfg.count("chunk") : default_chunk(T);
        std::vector<double> max_dev(workers.size(), 0.0);
        bool identical = true;
        std::vector<double> seq_time(workers.size(), 0.0), par_time(workers.size(), 0.0);
        for (std::size_t inst = 0; inst < instances; ++inst) {
            Tensor a(T, d), b(T, d);
            for (auto& v : a.flat()) v = quantize(ua(rng), fmt);
            for (auto& v : b.flat()) v = quantize(nb(rng), fmt);
            std::vector<double> x0(d);
            for (auto& v : x0) v = quantize(nb(rng), fmt);
            const Tensor seq = scan_sequential(a, b, x0, fmt);
            std::optional<Tensor> first;
            for (std::size_t wi = 0; wi < workers.size(); ++wi) {
                const Tensor par = scan_parallel(a, b, x0, chunk, workers[wi], fmt);
                max_dev[wi] = std::max(max_dev[wi], relative_deviation(par, seq));
                if (!first) first = par;
                else if (par.flat().size() != first->flat().size() ||
                         !std::equal(par.flat().begin(), par.flat().end(), first->flat().begin()))
                    identical = false;
                if (inst == 0) {
                    double best_s = std::numeric_limits<double>::infinity(), best_p = best_s;
                    for (std::size_t r = 0; r < repeats; ++r) {
                        auto ts = Clock::now();
                        const Tensor s2 = scan_sequential(a, b, x0, fmt);
                        best_s = std::min(best_s, seconds_since(ts));
                        auto tp = Clock::now();
                        const Tensor p2 = scan_parallel(a, b, x0, chunk, workers[wi], fmt);
                        best_p = std::min(best_p, seconds_since(tp));
                    }
                    seq_time[wi] = best_s;
                    par_time[wi] = best_p;
                }
            }
        }
        for (std::size_t wi = 0; wi < workers.size(); ++wi) {
            rows.push_back({{"T", T}, {"workers", workers[wi]}, {"chunk", chunk}, {"max_deviation", max_dev[wi]}});
            timing.row(T, workers[wi], chunk, seq_time[wi], par_time[wi]);
            worst = std::max(worst, max_dev[wi]);
        }
        all_identical = all_identical && identical;
    }
    json report = report_header("scan-bench");
    report["summary"] = {{"format", std::string(to_string(fmt))},
                         {"max_deviation", worst},
                         {"identical_across_workers", all_identical}};
    report["rows"] = std::move(rows);
    out.write_json("report.json", report);
    out.write_text("timing.csv", timing.str());
    return 0;
}

// ------------------------------------------------------------------- train

struct TrainSetup {
    ToyLmSpec spec;
    BatchStream train;
    std::vector<Batch> eval;
    Token pad = 0;
};

inline TokenSet slice(const TokenSet& s, std::size_t begin, std::size_t end) {
    TokenSet out;
    out.T = s.T;
    out.n = end - begin;
    out.inputs.assign(s.inputs.begin() + begin * s.T, s.inputs.begin() + end * s.T);
    out.targets.assign(s.targets.begin() + begin * s.T, s.targets.begin() + end * s.T);
    return out;
}

inline TrainSetup make_train_setup(const Config& cfg) {
    TrainSetup s;
    const std::uint64_t seed = cfg.count("seed");
    const std::size_t T = cfg.count("max_seq_len"), batch = cfg.count("batch_size");
    const std::size_t n_eval = cfg.count("n_eval");
    if (batch == 0) throw ConfigError("batch_size", "must be positive");
    const std::string task = cfg.text("task");
    if (task == "selective_copy") {
        const std::size_t vocab = cfg.count("vocab"), k = cfg.count("k");
        s.spec.vocab = vocab;
        s.pad = SelectiveCopyVocab::kPad;
        s.train = gen_selective_copy(seed + 1, T, vocab, cfg.count("n_train"), k, batch);
        if (n_eval)
            s.eval = BatchStream(gen_selective_copy_set(seed + 2, T, vocab, n_eval, k), vocab, s.pad, batch, seed + 2)
                         .all_batches();
    } else if (task == "text") {
        const std::string corpus = cfg.text("corpus");
        if (corpus.empty()) throw ConfigError("corpus", "text task needs a corpus");
        const auto all = load_text_corpus(corpus, T, batch, seed + 1);
        const TokenSet& data = all.data();
        if (n_eval >= data.n) throw ConfigError("n_eval", "corpus too small for the held-out split");
        s.spec.vocab = kByteVocab;
        s.pad = kBytePad;
        s.train = BatchStream(slice(data, 0, data.n - n_eval), kByteVocab, kBytePad, batch, seed + 1);
        if (n_eval)
            s.eval = BatchStream(slice(data, data.n - n_eval, data.n), kByteVocab, kBytePad, batch, seed + 2).all_batches();
    } else {
        throw ConfigError("task", "expected selective_copy or text");
    }
    s.spec.d = cfg.count("d");
    s.spec.T_max = T;
    s.spec.mode = parse_buffer_mode(cfg.text("mode"));
    s.spec.gate = cfg.flag("gate");
    return s;
}

inline TrainConfig make_train_config(const Config& cfg) {
    TrainConfig tc;
    const std::string preset = cfg.text("preset");
    if (!preset.empty()) {
        const Preset& p = find_preset(preset);
        tc.learning_rate = p.learning_rate;
        tc.lora_rank = p.lora_rank;
    }
    if (preset.empty() || cfg.given("learning_rate")) tc.learning_rate = cfg.real("learning_rate");
    if (preset.empty() || cfg.given("lora_rank")) tc.lora_rank = cfg.count("lora_rank");
    tc.lora_scale = cfg.real("lora_scale");
    tc.strategy = parse_strategy(cfg.text("strategy"));
    tc.warmup_steps = cfg.count("warmup_steps");
    tc.total_steps = cfg.count("total_steps");
    tc.epochs = cfg.count("epochs");
    tc.batch_size = cfg.count("batch_size");
    tc.max_seq_len = cfg.count("max_seq_len");
    tc.clip_norm = cfg.real("clip_norm");
    tc.loss_scale = cfg.real("loss_scale");
    tc.seed = cfg.count("seed");
    tc.validate();
    return tc;
}

inline ToyLm initial_model(const Config& cfg, const ToyLmSpec& spec) {
    const std::string init = cfg.text("init_checkpoint");
    if (init.empty()) return ToyLm::init(spec, cfg.count("seed"));
    ToyLm m = toy_lm_from_container(read_container(init));
    if (m.spec.vocab != spec.vocab || m.spec.d != spec.d || m.spec.T_max != spec.T_max || m.spec.mode != spec.mode ||
        m.spec.gate != spec.gate)
        throw ConfigError("init_checkpoint", "checkpoint does not match the configured model");
    return m;
}

struct EvalRecord {
    std::size_t step;
    EvalResult result;
};

struct VariantResult {
    std::string name;
    TrainConfig config;
    PrecisionPolicy policy;
    TrainMetrics metrics;
    std::vector<EvalRecord> evals;
    std::optional<EvalResult> final_eval;
    ToyLm model;
};

inline json eval_json(const EvalResult& e) {
    return {{"loss", e.loss}, {"token_accuracy", e.token_accuracy}, {"answer_accuracy", e.answer_accuracy}};
}

inline VariantResult train_variant(const std::string& name, ToyLm model, const TrainConfig& tc,
                                   const PrecisionPolicy& policy, TrainSetup setup, std::size_t eval_every,
                                   double target_accuracy) {
    VariantResult v{name, tc, policy, {}, {}, {}, std::move(model)};
    TrainHooks hooks;
    if (eval_every && !setup.eval.empty()) {
        hooks.every = eval_every;
        hooks.check = [&](std::size_t step, const ToyLm& m) {
            const auto e = evaluate(m, setup.eval, setup.pad, policy);
            v.evals.push_back({step, e});
            return target_accuracy > 0.0 && e.answer_accuracy >= target_accuracy;
        };
    }
    v.metrics = train_loop(v.model, tc, policy, setup.train, hooks);
    if (!setup.eval.empty()) v.final_eval = evaluate(v.model, setup.eval, setup.pad, policy);
    return v;
}

/// Writes steps/eval CSVs, metrics (with timings) and the checkpoint; returns
/// the timing-free part for report.json.
inline json write_variant(const VariantResult& v, const OutputDir& out, const std::string& prefix) {
    Csv steps({"step", "lr", "loss", "grad_norm"});
    for (const auto& s : v.metrics.steps) steps.row(s.step, s.lr, s.loss, s.grad_norm);
    out.write_text(prefix + "steps.csv", steps.str());
    if (!v.evals.empty()) {
        Csv ev({"step", "loss", "token_accuracy", "answer_accuracy"});
        for (const auto& e : v.evals) ev.row(e.step, e.result.loss, e.result.token_accuracy, e.result.answer_accuracy);
        out.write_text(prefix + "eval.csv", ev.str());
    }
    json metrics = metrics_json(v.metrics, v.config, v.policy);
    metrics["schema_version"] = kSchemaVersion;
    metrics["variant"] = v.name;
    out.write_json(prefix + "metrics.json", metrics);

    json r = {{"variant", v.name},
              {"precision_policy", v.policy.name()},
              {"config", config_json(v.config)},
              {"steps_run", v.metrics.steps.size()},
              {"total_tokens", v.metrics.total_tokens},
              {"trainable_params", v.metrics.trainable_params},
              {"total_params", v.metrics.total_params},
              {"final_loss", v.metrics.steps.empty() ? json(nullptr) : json(v.metrics.steps.back().loss)},
              {"loss_trace", v.metrics.loss_trace()},
              {"stopped_at", v.metrics.stopped_at ? json(*v.metrics.stopped_at) : json(nullptr)}};
    json evals = json::array();
    for (const auto& e : v.evals) {
        json j = eval_json(e.result);
        j["step"] = e.step;
        evals.push_back(std::move(j));
    }
    r["evals"] = std::move(evals);
    r["final_eval"] = v.final_eval ? eval_json(*v.final_eval) : json(nullptr);
    if (!v.metrics.steps.empty()) {
        const std::string ck = prefix + "checkpoint.ssmd";
        write_container(out / ck, to_container(v.model));
        r["checkpoint"] = ck;
    } else {
        r["checkpoint"] = nullptr;
    }
    return r;
}

inline int run_train(const Config& cfg, const OutputDir& out) {
    const TrainSetup setup = make_train_setup(cfg);
    const TrainConfig tc = make_train_config(cfg);
    const std::size_t eval_every = cfg.count("eval_every");
    const double target = cfg.real("target_accuracy");
    const ToyLm init = initial_model(cfg, setup.spec);
    json report = report_header("train");

    if (!cfg.flag("compare")) {
        const auto v = train_variant("train", init, tc, PrecisionPolicy::named(cfg.text("policy")), setup, eval_every,
                                     target);
        json r = write_variant(v, out, "");
        report["summary"] = {{"steps_run", r["steps_run"]},
                             {"final_loss", r["final_loss"]},
                             {"final_eval", r["final_eval"]},
                             {"trainable_params", r["trainable_params"]},
                             {"total_params", r["total_params"]}};
        report["run"] = std::move(r);
        out.write_json("report.json", report);
        return 0;
    }

    TrainConfig full_cfg = tc;
    full_cfg.lora_rank = 0;
    TrainConfig lora_cfg = tc;
    lora_cfg.lora_rank = cfg.count("compare_rank");
    lora_cfg.learning_rate = cfg.real("compare_learning_rate");
    if (lora_cfg.lora_rank == 0) throw ConfigError("compare_rank", "must be positive");
    const auto full = train_variant("full", init, full_cfg, PrecisionPolicy::fp32(), setup, eval_every, target);
    const auto lora = train_variant("lora", init, lora_cfg, PrecisionPolicy::named(cfg.text("compare_policy")), setup,
                                    eval_every, target);
    json rf = write_variant(full, out, "full_");
    json rl = write_variant(lora, out, "lora_");

    const auto ratio = [](double a, double b) { return b > 0.0 ? json(a / b) : json(nullptr); };
    Csv table({"variant", "policy", "lora_rank", "trainable_params", "total_params", "atps", "mmpt", "peak_bytes",
               "wall_seconds"});
    for (const auto* v : {&full, &lora})
        table.row(v->name, v->policy.name(), v->config.lora_rank, v->metrics.trainable_params,
                  v->metrics.total_params, v->metrics.atps, v->metrics.mmpt, v->metrics.peak_bytes,
                  v->metrics.wall_seconds);
    out.write_text("compare.csv", table.str());
    const bool faster = lora.metrics.atps >= full.metrics.atps;
    out.write_json("compare.json", {{"schema_version", kSchemaVersion},
                                    {"atps_ratio", ratio(lora.metrics.atps, full.metrics.atps)},
                                    {"mmpt_ratio", ratio(lora.metrics.mmpt, full.metrics.mmpt)},
                                    {"peak_bytes_ratio", ratio(static_cast<double>(lora.metrics.peak_bytes),
                                                               static_cast<double>(full.metrics.peak_bytes))},
                                    {"lora_atps_at_least_full", faster},
                                    {"lora_peak_below_full", lora.metrics.peak_bytes < full.metrics.peak_bytes}});
    report["summary"] = {{"full_final_eval", rf["final_eval"]},
                         {"lora_final_eval", rl["final_eval"]},
                         {"full_trainable_params", rf["trainable_params"]},
                         {"lora_trainable_params", rl["trainable_params"]},
                         {"total_params", rf["total_params"]}};
    report["runs"] = {rf, rl};
    out.write_json("report.json", report);
    if (cfg.flag("require_faster") && !faster)
        throw Error("lora run slower than full fine-tuning (atps " + detail::num(lora.metrics.atps) + " < " +
                    detail::num(full.metrics.atps) + ")");
    return 0;
}

// ------------------------------------------------------------- lora-verify

inline constexpr int kTyingFailedExit = 2;

inline int run_lora_verify(const Config& cfg, const OutputDir& out) {
    const std::string path = cfg.text("checkpoint");
    if (path.empty()) throw ConfigError("checkpoint", "missing required key");
    const Container c = read_container(path);
    if (!has_adapters(c)) throw Error("checkpoint has no adapter");
    const ToyLm m = toy_lm_from_container(c);
    const std::string target = cfg.text("target");
    const auto it = m.adapters.find(target);
    if (it == m.adapters.end()) throw Error("checkpoint has no adapter on " + target);
    const LoraAdapter& a = it->second;

    Tensor delta;
    std::string source;
    if (c.has(target + ".merged")) {
        const Tensor& merged = c.at(target + ".merged");
        const Tensor& base = m.parameter(target);
        if (!merged.same_shape(base)) throw CheckpointError(target + ".merged", "shape does not match base");
        delta = merged;
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= base[i];
        source = "merged";
    } else {
        delta = delta_weight(a);
        source = "factors";
    }
    const auto rep = verify_tying(a.U, delta, m.spec.d, a.r);
    double worst = 0.0;
    for (double r : rep.segment_residuals) worst = std::max(worst, r);

    json report = report_header("lora-verify");
    report["summary"] = {{"shared_left_factor_ok", rep.shared_left_factor_ok},
                         {"rank_observed", rep.rank_observed},
                         {"r", a.r},
                         {"max_residual", worst}};
    report["tying"] = {{"target", target},
                       {"mode", std::string(to_string(m.spec.mode))},
                       {"update_source", source},
                       {"tolerance", kTyingTolerance},
                       {"segment_residuals",
                        {{"delta", rep.segment_residuals[0]},
                         {"B", rep.segment_residuals[1]},
                         {"C", rep.segment_residuals[2]}}}};
    out.write_json("report.json", report);
    return rep.shared_left_factor_ok ? 0 : kTyingFailedExit;
}

// ------------------------------------------------------------------ report

/// Collects report.json files from the immediate subdirectories of `runs`
/// into summary.json and a long-format summary.csv, sorted by directory name.
inline int run_report(const Config& cfg, const OutputDir& out) {
    const std::string runs = cfg.text("runs");
    if (runs.empty()) throw ConfigError("runs", "missing required key");
    if (!fs::is_directory(runs)) throw Error("not a directory: " + runs);
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(runs))
        if (e.is_directory() && fs::exists(e.path() / "report.json") &&
            !fs::equivalent(e.path(), out.path()))
            dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw Error("no runs found under " + runs);

    json entries = json::array();
    Csv csv({"run", "subcommand", "field", "value"});
    for (const auto& dir : dirs) {
        json rep;
        try {
            std::ifstream in(dir / "report.json");
            rep = json::parse(in);
        } catch (const json::exception&) {
            throw Error("malformed report " + (dir / "report.json").string());
        }
        const std::string run = dir.filename().string();
        const std::string sub = rep.value("subcommand", "");
        json summary = rep.value("summary", json::object());
        json entry = {{"run", run}, {"subcommand", sub}, {"summary", summary}};
        if (fs::exists(dir / "manifest.json")) {
            std::ifstream in(dir / "manifest.json");
            const json man = json::parse(in, nullptr, false);
            if (!man.is_discarded() && man.contains("seed")) entry["seed"] = man["seed"];
        }
        const json flat = summary.empty() ? json::object() : summary.flatten();
        for (const auto& [field, value] : flat.items())
            csv.row(run, sub, field, value.is_string() ? value.get<std::string>() : value.dump());
        entries.push_back(std::move(entry));
    }
    json report = report_header("report");
    report["summary"] = {{"runs", dirs.size()}};
    report["entries"] = entries;
    out.write_json("summary.json", report);
    out.write_text("summary.csv", csv.str());
    out.write_json("report.json", report);
    return 0;
}

// ------------------------------------------------------------------- entry

/// Runs one subcommand; returns the process exit code. Errors propagate as
/// exceptions.
inline int run(const RunSpec& spec) {
    if (std::find(subcommands().begin(), subcommands().end(), spec.subcommand) == subcommands().end())
        throw Error("unknown subcommand '" + spec.subcommand + "'");
    if (spec.output_dir.empty()) throw Error("no output directory given");
    const Config cfg = resolve_config(spec);
    const OutputDir out(spec.output_dir);
    out.write_json("manifest.json", manifest_json(spec.subcommand, cfg));
    if (spec.subcommand == "lyapunov") return run_lyapunov(cfg, out);
    if (spec.subcommand == "divergence") return run_divergence(cfg, out);
    if (spec.subcommand == "scan-bench") return run_scan_bench(cfg, out);
    if (spec.subcommand == "train") return run_train(cfg, out);
    if (spec.subcommand == "lora-verify") return run_lora_verify(cfg, out);
    return run_report(cfg, out);
}

}  // namespace ssmdyn::cli
