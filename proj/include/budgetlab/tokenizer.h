// SPDX-License-Identifier: Apache-2.0
//
// Byte-pair-encoding tokenizer with byte fallback and character coverage.
//
// Id layout: <unk> <s> </s> <pad>, then the 256 byte tokens (when byte
// fallback is on), then the character alphabet (most frequent first), then
// one id per distinct merge output.
//
// Pre-tokenization splits on Unicode whitespace. A plain space in front of a
// word becomes the word-boundary marker U+2581 glued to that word; any other
// whitespace character is a pre-token of its own. A literal U+2581 in the
// input is always spelled with byte tokens, so decoding stays unambiguous.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace budgetlab {

inline constexpr std::string_view kWordMarker = "\xE2\x96\x81";  // U+2581

struct TrainerConfig {
    /// Total vocabulary size including specials and byte tokens.
    std::size_t vocab_size = 32768;
    double character_coverage = 0.9995;
    bool byte_fallback = true;
    /// Kept for interface stability; training is fully deterministic.
    std::uint64_t seed = 0;

    void validate() const;
};

class Tokenizer {
public:
    static constexpr std::int32_t kUnk = 0;
    static constexpr std::int32_t kBos = 1;
    static constexpr std::int32_t kEos = 2;
    static constexpr std::int32_t kPad = 3;
    static constexpr std::int32_t kNumSpecials = 4;

    Tokenizer() = default;

    std::size_t size() const { return pieces_.size(); }
    bool byte_fallback() const { return byte_fallback_; }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
    /// Number of alphabet (single-character) pieces.
    std::size_t alphabet_size() const { return alphabet_size_; }

    /// Printable form of a token: "<s>", "<0x41>", "▁word", ...
    const std::string& token_string(std::int32_t id) const;
    /// Id of a character/merged piece, or -1.
    std::int32_t piece_id(std::string_view piece) const;
    bool is_byte_token(std::int32_t id) const;
    bool is_special(std::int32_t id) const { return id >= 0 && id < kNumSpecials; }

    std::vector<std::int32_t> encode(std::string_view text) const;
    std::string decode(const std::vector<std::int32_t>& ids) const;

    std::string to_json() const;
    static Tokenizer from_json(std::string_view json);
    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);

    friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
        return a.pieces_ == b.pieces_ && a.merges_ == b.merges_ && a.byte_fallback_ == b.byte_fallback_;
    }

private:
    friend Tokenizer train_bpe(const std::vector<std::string>& corpus, const TrainerConfig& cfg);
    void rebuild_index();
    std::vector<std::int32_t> encode_pretoken(std::string_view unit_string, bool bytes_only) const;

    std::vector<std::string> pieces_;
    std::vector<std::pair<std::string, std::string>> merges_;
    bool byte_fallback_ = true;
    std::size_t alphabet_size_ = 0;
    std::int32_t first_piece_ = kNumSpecials;
    std::unordered_map<std::string, std::int32_t> piece_index_;
    /// (left id, right id) -> (rank, output id)
    std::unordered_map<std::uint64_t, std::pair<std::int32_t, std::int32_t>> merge_rank_;
};

/// Greedy BPE: at each step merge the most frequent adjacent pair, ties
/// broken by the lexicographically smallest (left, right) strings.
Tokenizer train_bpe(const std::vector<std::string>& corpus, const TrainerConfig& cfg);

/// Tokens per whitespace-separated word. Throws on text without words.
double fertility(const Tokenizer& tok, std::string_view text);
double fertility(const Tokenizer& tok, const std::vector<std::string>& docs);

/// Pre-tokens of text as (string, bytes_only) pairs; exposed for tests.
std::vector<std::pair<std::string, bool>> pretokenize(std::string_view text);

}  // namespace budgetlab
