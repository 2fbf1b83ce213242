#pragma once

// Token datasets and deterministic batch streams.
//
// Selective copy (vocab V, length T, k marks):
//   ids 0 = PAD, 1 = END, [2, D) noise, [D, V) data with D = max(3, V / 2).
//   Positions [0, T - k) hold uniform noise tokens; k distinct positions among
//   them, chosen uniformly and kept in order, are overwritten with uniform data
//   tokens. Positions [T - k, T) hold END. The target is PAD everywhere except
//   target[T - k + i] = i-th marked token, so the model must emit the marked
//   tokens in order once it reaches the end markers.
//
// Text corpus: byte-level ids 0..255 plus PAD = 256. A file of N bytes yields
// floor((N - 1) / L) windows of length L with next-byte targets.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ssmdyn/error.hpp"

namespace ssmdyn {

using Token = std::int32_t;

/// n sequences of length T, row-major.
struct TokenSet {
    std::size_t n = 0;
    std::size_t T = 0;
    std::vector<Token> inputs;
    std::vector<Token> targets;

    Token input(std::size_t i, std::size_t t) const { return inputs[i * T + t]; }
    Token target(std::size_t i, std::size_t t) const { return targets[i * T + t]; }
};

struct Batch {
    std::size_t rows = 0;        // B, including padding rows
    std::size_t valid_rows = 0;  // rows that carry real sequences
    std::size_t T = 0;
    std::vector<Token> inputs;   // B x T
    std::vector<Token> targets;  // B x T
};

/// Shuffled epochs over a TokenSet. Each epoch is a fresh permutation drawn
/// from the stream's generator; a short final batch is padded with PAD rows.
class BatchStream {
public:
    BatchStream() = default;
    BatchStream(TokenSet data, std::size_t vocab_size, Token pad_id, std::size_t batch_size, std::uint64_t seed)
        : data_(std::move(data)), vocab_(vocab_size), pad_(pad_id), batch_(batch_size), seed_(seed), rng_(seed) {
        require(batch_ >= 1, "batch size must be positive");
        for (Token t : data_.inputs) require(t >= 0 && static_cast<std::size_t>(t) < vocab_, "token out of range");
        for (Token t : data_.targets) require(t >= 0 && static_cast<std::size_t>(t) < vocab_, "token out of range");
    }

    bool empty() const noexcept { return data_.n == 0; }
    std::size_t size() const noexcept { return data_.n; }
    std::size_t seq_len() const noexcept { return data_.T; }
    std::size_t vocab_size() const noexcept { return vocab_; }
    Token pad_id() const noexcept { return pad_; }
    std::size_t batch_size() const noexcept { return batch_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t batches_per_epoch() const noexcept { return (data_.n + batch_ - 1) / batch_; }
    const TokenSet& data() const noexcept { return data_; }

    Batch next() {
        if (empty()) throw Error("batch stream is empty");
        if (cursor_ >= order_.size()) start_epoch();
        Batch b;
        b.rows = batch_;
        b.T = data_.T;
        b.inputs.assign(batch_ * data_.T, pad_);
        b.targets.assign(batch_ * data_.T, pad_);
        for (; b.valid_rows < batch_ && cursor_ < order_.size(); ++b.valid_rows, ++cursor_) {
            const std::size_t src = order_[cursor_] * data_.T;
            std::copy_n(data_.inputs.begin() + src, data_.T, b.inputs.begin() + b.valid_rows * data_.T);
            std::copy_n(data_.targets.begin() + src, data_.T, b.targets.begin() + b.valid_rows * data_.T);
        }
        return b;
    }

    /// Every sequence once, in stored order, as padded batches.
    std::vector<Batch> all_batches() const {
        std::vector<Batch> out;
        for (std::size_t start = 0; start < data_.n; start += batch_) {
            Batch b;
            b.rows = batch_;
            b.T = data_.T;
            b.valid_rows = std::min(batch_, data_.n - start);
            b.inputs.assign(batch_ * data_.T, pad_);
            b.targets.assign(batch_ * data_.T, pad_);
            std::copy_n(data_.inputs.begin() + start * data_.T, b.valid_rows * data_.T, b.inputs.begin());
            std::copy_n(data_.targets.begin() + start * data_.T, b.valid_rows * data_.T, b.targets.begin());
            out.push_back(std::move(b));
        }
        return out;
    }

private:
    void start_epoch() {
        if (!order_.empty()) ++epoch_;
        order_.resize(data_.n);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }

    TokenSet data_;
    std::size_t vocab_ = 0;
    Token pad_ = 0;
    std::size_t batch_ = 1;
    std::uint64_t seed_ = 0;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
};

struct SelectiveCopyVocab {
    static constexpr Token kPad = 0;
    static constexpr Token kEnd = 1;
    Token noise_begin = 2;
    Token data_begin = 0;  // noise is [noise_begin, data_begin), data is [data_begin, vocab)
    Token vocab = 0;

    explicit SelectiveCopyVocab(std::size_t v)
        : data_begin(static_cast<Token>(std::max<std::size_t>(3, v / 2))), vocab(static_cast<Token>(v)) {}
    bool is_data(Token t) const { return t >= data_begin && t < vocab; }
};

inline TokenSet gen_selective_copy_set(std::uint64_t seed, std::size_t T, std::size_t vocab,
                                       std::size_t n_sequences, std::size_t k) {
    if (T < 8) throw Error("selective copy needs T >= 8");
    if (vocab < 4) throw Error("selective copy needs vocab >= 4");
    if (2 * k > T) throw Error("too many marked tokens for sequence length");
    const SelectiveCopyVocab v(vocab);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Token> noise(v.noise_begin, v.data_begin - 1);
    std::uniform_int_distribution<Token> data(v.data_begin, v.vocab - 1);

    TokenSet s;
    s.n = n_sequences;
    s.T = T;
    s.inputs.assign(n_sequences * T, SelectiveCopyVocab::kPad);
    s.targets.assign(n_sequences * T, SelectiveCopyVocab::kPad);
    std::vector<std::size_t> slots(T - k);
    for (std::size_t i = 0; i < n_sequences; ++i) {
        Token* in = s.inputs.data() + i * T;
        Token* tg = s.targets.data() + i * T;
        for (std::size_t t = 0; t < T - k; ++t) in[t] = noise(rng);
        std::iota(slots.begin(), slots.end(), std::size_t{0});
        // partial Fisher-Yates: the first k slots are a uniform k-subset
        for (std::size_t j = 0; j < k; ++j) {
            std::uniform_int_distribution<std::size_t> pick(j, slots.size() - 1);
            std::swap(slots[j], slots[pick(rng)]);
        }
        std::sort(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(k));
        for (std::size_t j = 0; j < k; ++j) {
            const Token tok = data(rng);
            in[slots[j]] = tok;
            tg[T - k + j] = tok;
        }
        for (std::size_t t = T - k; t < T; ++t) in[t] = SelectiveCopyVocab::kEnd;
    }
    return s;
}

inline BatchStream gen_selective_copy(std::uint64_t seed, std::size_t T, std::size_t vocab, std::size_t n_sequences,
                                      std::size_t k = 1, std::size_t batch_size = 16) {
    return BatchStream(gen_selective_copy_set(seed, T, vocab, n_sequences, k), vocab, SelectiveCopyVocab::kPad,
                       batch_size, seed);
}

inline constexpr Token kBytePad = 256;
inline constexpr std::size_t kByteVocab = 257;

inline BatchStream load_text_corpus(const std::filesystem::path& path, std::size_t max_seq_len,
                                    std::size_t batch_size = 8, std::uint64_t seed = 0) {
    require(max_seq_len >= 1, "max_seq_len must be positive");
    std::ifstream in(path, std::ios::binary);
    if (!in || std::filesystem::is_directory(path)) throw Error("cannot read corpus " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw Error("cannot read corpus " + path.string());
    TokenSet s;
    s.T = max_seq_len;
    s.n = bytes.empty() ? 0 : (bytes.size() - 1) / max_seq_len;
    s.inputs.resize(s.n * s.T);
    s.targets.resize(s.n * s.T);
    for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t t = 0; t < s.T; ++t) {
            const std::size_t at = i * s.T + t;
            s.inputs[at] = static_cast<unsigned char>(bytes[at]);
            s.targets[at] = static_cast<unsigned char>(bytes[at + 1]);
        }
    return BatchStream(std::move(s), kByteVocab, kBytePad, batch_size, seed);
}

}  // namespace ssmdyn
