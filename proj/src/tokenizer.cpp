// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/tokenizer.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <queue>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "budgetlab/text.h"

namespace budgetlab {

namespace {

constexpr char32_t kMarkerCodepoint = 0x2581;
constexpr int kFormatVersion = 1;
const char* const kSpecialNames[] = {"<unk>", "<s>", "</s>", "<pad>"};

bool is_word_char(const Utf8Char& c) {
    return c.valid && c.codepoint != kMarkerCodepoint && !is_unicode_space(c.codepoint);
}

std::string byte_token_name(unsigned b) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "<0x%02X>", b);
    return buf;
}

std::uint64_t pair_key(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

}  // namespace

void TrainerConfig::validate() const {
    if (!(character_coverage > 0.0 && character_coverage <= 1.0)) {
        throw std::invalid_argument("TrainerConfig: character_coverage must lie in (0, 1]");
    }
    const std::size_t floor = Tokenizer::kNumSpecials + (byte_fallback ? 256 : 0);
    if (vocab_size < floor) {
        throw std::invalid_argument("TrainerConfig: vocab_size " + std::to_string(vocab_size) +
                                    " is below the " + std::to_string(floor) + " reserved ids");
    }
}

std::vector<std::pair<std::string, bool>> pretokenize(std::string_view text) {
    const auto chars = utf8_chars(text);
    std::vector<std::pair<std::string, bool>> out;
    std::size_t i = 0;
    while (i < chars.size()) {
        const Utf8Char& c = chars[i];
        if (!c.valid || c.codepoint == kMarkerCodepoint) {
            out.emplace_back(std::string(c.bytes), true);
            ++i;
        } else if (is_unicode_space(c.codepoint)) {
            if (c.codepoint == U' ') {
                std::string s(kWordMarker);
                ++i;
                while (i < chars.size() && is_word_char(chars[i])) s += chars[i++].bytes;
                out.emplace_back(std::move(s), false);
            } else {
                out.emplace_back(std::string(c.bytes), false);
                ++i;
            }
        } else {
            std::string s;
            while (i < chars.size() && is_word_char(chars[i])) s += chars[i++].bytes;
            out.emplace_back(std::move(s), false);
        }
    }
    return out;
}

const std::string& Tokenizer::token_string(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(pieces_.size()));
    }
    return pieces_[static_cast<std::size_t>(id)];
}

std::int32_t Tokenizer::piece_id(std::string_view piece) const {
    auto it = piece_index_.find(std::string(piece));
    return it == piece_index_.end() ? -1 : it->second;
}

bool Tokenizer::is_byte_token(std::int32_t id) const {
    return byte_fallback_ && id >= kNumSpecials && id < kNumSpecials + 256;
}

void Tokenizer::rebuild_index() {
    first_piece_ = kNumSpecials + (byte_fallback_ ? 256 : 0);
    piece_index_.clear();
    for (std::size_t i = static_cast<std::size_t>(first_piece_); i < pieces_.size(); ++i) {
        piece_index_.emplace(pieces_[i], static_cast<std::int32_t>(i));
    }
    merge_rank_.clear();
    for (std::size_t r = 0; r < merges_.size(); ++r) {
        const auto a = piece_id(merges_[r].first);
        const auto b = piece_id(merges_[r].second);
        const auto c = piece_id(merges_[r].first + merges_[r].second);
        if (a < 0 || b < 0 || c < 0) throw std::runtime_error("tokenizer: merge refers to a missing piece");
        merge_rank_.emplace(pair_key(a, b), std::make_pair(static_cast<std::int32_t>(r), c));
    }
    alphabet_size_ = 0;
    for (std::size_t i = static_cast<std::size_t>(first_piece_); i < pieces_.size(); ++i) {
        if (utf8_chars(pieces_[i]).size() == 1) ++alphabet_size_;
    }
}

// Initial symbols of one pre-token: alphabet characters, else byte tokens
// (or <unk> without byte fallback).
static void initial_symbols(const Tokenizer& tok, std::string_view s, bool bytes_only,
                            std::vector<std::int32_t>& out) {
    out.clear();
    auto spell_bytes = [&](std::string_view bytes) {
        if (!tok.byte_fallback()) {
            out.push_back(Tokenizer::kUnk);
            return;
        }
        for (unsigned char b : bytes) out.push_back(Tokenizer::kNumSpecials + static_cast<std::int32_t>(b));
    };
    if (bytes_only) {
        spell_bytes(s);
        return;
    }
    for (const Utf8Char& c : utf8_chars(s)) {
        const std::int32_t id = c.valid ? tok.piece_id(c.bytes) : -1;
        if (id >= 0) {
            out.push_back(id);
        } else {
            spell_bytes(c.bytes);
        }
    }
}

std::vector<std::int32_t> Tokenizer::encode_pretoken(std::string_view s, bool bytes_only) const {
    std::vector<std::int32_t> sym;
    initial_symbols(*this, s, bytes_only, sym);
    if (bytes_only) return sym;
    while (sym.size() > 1) {
        std::int32_t best_rank = -1;
        std::int32_t best_out = -1;
        std::int32_t left = -1, right = -1;
        for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
            auto it = merge_rank_.find(pair_key(sym[i], sym[i + 1]));
            if (it == merge_rank_.end()) continue;
            if (best_rank < 0 || it->second.first < best_rank) {
                best_rank = it->second.first;
                best_out = it->second.second;
                left = sym[i];
                right = sym[i + 1];
            }
        }
        if (best_rank < 0) break;
        std::size_t w = 0;
        for (std::size_t i = 0; i < sym.size();) {
            if (i + 1 < sym.size() && sym[i] == left && sym[i + 1] == right) {
                sym[w++] = best_out;
                i += 2;
            } else {
                sym[w++] = sym[i++];
            }
        }
        sym.resize(w);
    }
    return sym;
}

std::vector<std::int32_t> Tokenizer::encode(std::string_view text) const {
    std::vector<std::int32_t> ids;
    std::unordered_map<std::string, std::vector<std::int32_t>> cache;
    for (const auto& [s, bytes_only] : pretokenize(text)) {
        if (bytes_only) {
            const auto part = encode_pretoken(s, true);
            ids.insert(ids.end(), part.begin(), part.end());
            continue;
        }
        auto it = cache.find(s);
        if (it == cache.end()) it = cache.emplace(s, encode_pretoken(s, false)).first;
        ids.insert(ids.end(), it->second.begin(), it->second.end());
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<std::int32_t>& ids) const {
    std::string out;
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
            throw std::out_of_range("decode: token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(pieces_.size()));
        }
        if (is_special(id)) continue;
        if (is_byte_token(id)) {
            out += static_cast<char>(id - kNumSpecials);
            continue;
        }
        const std::string& p = pieces_[static_cast<std::size_t>(id)];
        std::size_t pos = 0;
        while (pos < p.size()) {
            const std::size_t hit = p.find(kWordMarker, pos);
            if (hit == std::string::npos) {
                out.append(p, pos, std::string::npos);
                break;
            }
            out.append(p, pos, hit - pos);
            out += ' ';
            pos = hit + kWordMarker.size();
        }
    }
    return out;
}

Tokenizer train_bpe(const std::vector<std::string>& corpus, const TrainerConfig& cfg) {
    cfg.validate();
    bool any = false;
    for (const auto& d : corpus) any |= !d.empty();
    if (!any) throw std::invalid_argument("train_bpe: corpus is empty");

    // Distinct mergeable pre-tokens with their counts.
    std::map<std::string, std::int64_t> word_counts;
    for (const auto& doc : corpus) {
        for (auto& [s, bytes_only] : pretokenize(doc)) {
            if (!bytes_only) ++word_counts[s];
        }
    }

    // Character alphabet by coverage of cumulative frequency.
    std::map<char32_t, std::int64_t> char_freq;
    std::int64_t total_chars = 0;
    for (const auto& [w, n] : word_counts) {
        for (const Utf8Char& c : utf8_chars(w)) {
            char_freq[c.codepoint] += n;
            total_chars += n;
        }
    }
    std::vector<std::pair<char32_t, std::int64_t>> ranked(char_freq.begin(), char_freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<char32_t> alphabet;
    const double budget = cfg.character_coverage * static_cast<double>(total_chars);
    std::int64_t cumulative = 0;
    bool has_marker = false;
    for (const auto& [cp, n] : ranked) {
        if (static_cast<double>(cumulative) >= budget && cfg.character_coverage < 1.0) break;
        alphabet.push_back(cp);
        has_marker |= cp == kMarkerCodepoint;
        cumulative += n;
    }
    if (!has_marker) alphabet.push_back(kMarkerCodepoint);

    Tokenizer tok;
    tok.byte_fallback_ = cfg.byte_fallback;
    for (const char* s : kSpecialNames) tok.pieces_.emplace_back(s);
    if (cfg.byte_fallback) {
        for (unsigned b = 0; b < 256; ++b) tok.pieces_.push_back(byte_token_name(b));
    }
    for (char32_t cp : alphabet) tok.pieces_.push_back(utf8_encode(cp));
    if (tok.pieces_.size() > cfg.vocab_size) {
        throw std::invalid_argument("train_bpe: vocab_size " + std::to_string(cfg.vocab_size) +
                                    " cannot hold the specials plus an alphabet of " +
                                    std::to_string(alphabet.size()) + " characters");
    }
    tok.rebuild_index();
    const std::int32_t first_piece = tok.first_piece_;

    struct Word {
        std::vector<std::int32_t> sym;
        std::int64_t count;
    };
    std::vector<Word> words;
    words.reserve(word_counts.size());
    for (const auto& [w, n] : word_counts) {
        Word word{{}, n};
        initial_symbols(tok, w, false, word.sym);
        words.push_back(std::move(word));
    }

    std::unordered_map<std::uint64_t, std::int64_t> pair_count;
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;
    auto mergeable = [&](std::int32_t id) { return id >= first_piece; };
    auto add_pairs = [&](std::uint32_t wi, std::int64_t sign, bool record) {
        const auto& s = words[wi].sym;
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            if (!mergeable(s[i]) || !mergeable(s[i + 1])) continue;
            const auto key = pair_key(s[i], s[i + 1]);
            pair_count[key] += sign * words[wi].count;
            if (record) where[key].push_back(wi);
        }
    };
    for (std::uint32_t wi = 0; wi < words.size(); ++wi) add_pairs(wi, +1, true);

    struct Candidate {
        std::int64_t count;
        std::int32_t a, b;
    };
    const auto& pieces = tok.pieces_;
    auto worse = [&pieces](const Candidate& x, const Candidate& y) {
        if (x.count != y.count) return x.count < y.count;
        const auto& xa = pieces[static_cast<std::size_t>(x.a)];
        const auto& ya = pieces[static_cast<std::size_t>(y.a)];
        if (xa != ya) return xa > ya;
        return pieces[static_cast<std::size_t>(x.b)] > pieces[static_cast<std::size_t>(y.b)];
    };
    std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse);
    for (const auto& [key, n] : pair_count) {
        if (n > 0) heap.push({n, static_cast<std::int32_t>(key >> 32), static_cast<std::int32_t>(key & 0xFFFFFFFFu)});
    }

    std::vector<std::uint32_t> stamp(words.size(), 0);
    std::uint32_t merge_no = 0;
    while (tok.pieces_.size() < cfg.vocab_size && !heap.empty()) {
        const Candidate top = heap.top();
        heap.pop();
        const auto key = pair_key(top.a, top.b);
        const auto it = pair_count.find(key);
        if (it == pair_count.end() || it->second != top.count || top.count <= 0) continue;  // stale

        const std::string merged = pieces[static_cast<std::size_t>(top.a)] + pieces[static_cast<std::size_t>(top.b)];
        std::int32_t out = tok.piece_id(merged);
        if (out < 0) {
            out = static_cast<std::int32_t>(tok.pieces_.size());
            tok.pieces_.push_back(merged);
            tok.piece_index_.emplace(merged, out);
        }
        tok.merges_.emplace_back(pieces[static_cast<std::size_t>(top.a)], pieces[static_cast<std::size_t>(top.b)]);
        ++merge_no;

        std::unordered_map<std::uint64_t, std::int64_t> touched;
        const std::vector<std::uint32_t> occurrences = std::move(where[key]);
        where.erase(key);
        for (std::uint32_t wi : occurrences) {
            if (stamp[wi] == merge_no) continue;
            stamp[wi] = merge_no;
            auto& s = words[wi].sym;
            bool found = false;
            for (std::size_t i = 0; i + 1 < s.size(); ++i) found |= s[i] == top.a && s[i + 1] == top.b;
            if (!found) continue;
            // Remove old pair counts, rewrite, add new ones.
            for (std::size_t i = 0; i + 1 < s.size(); ++i) {
                if (mergeable(s[i]) && mergeable(s[i + 1])) touched[pair_key(s[i], s[i + 1])] -= words[wi].count;
            }
            std::size_t w = 0;
            for (std::size_t i = 0; i < s.size();) {
                if (i + 1 < s.size() && s[i] == top.a && s[i + 1] == top.b) {
                    s[w++] = out;
                    i += 2;
                } else {
                    s[w++] = s[i++];
                }
            }
            s.resize(w);
            for (std::size_t i = 0; i + 1 < s.size(); ++i) {
                if (!mergeable(s[i]) || !mergeable(s[i + 1])) continue;
                const auto k = pair_key(s[i], s[i + 1]);
                touched[k] += words[wi].count;
                if (s[i] == out || s[i + 1] == out) where[k].push_back(wi);
            }
        }
        for (const auto& [k, delta] : touched) {
            if (delta == 0) continue;
            auto& n = pair_count[k];
            n += delta;
            if (n > 0) heap.push({n, static_cast<std::int32_t>(k >> 32), static_cast<std::int32_t>(k & 0xFFFFFFFFu)});
        }
        pair_count.erase(key);
    }
    tok.rebuild_index();
    return tok;
}

std::string Tokenizer::to_json() const {
    nlohmann::json j;
    j["version"] = kFormatVersion;
    j["specials"] = {{"unk", kUnk}, {"bos", kBos}, {"eos", kEos}, {"pad", kPad}};
    j["byte_fallback"] = byte_fallback_;
    j["marker"] = std::string(kWordMarker);
    j["vocab"] = pieces_;
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) merges.push_back({a, b});
    j["merges"] = std::move(merges);
    return j.dump(1);
}

Tokenizer Tokenizer::from_json(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("tokenizer file is not valid JSON: ") + e.what());
    }
    if (j.value("version", 0) != kFormatVersion) throw std::runtime_error("tokenizer file: unsupported version");
    Tokenizer tok;
    try {
        tok.byte_fallback_ = j.at("byte_fallback").get<bool>();
        tok.pieces_ = j.at("vocab").get<std::vector<std::string>>();
        for (const auto& m : j.at("merges")) tok.merges_.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("tokenizer file: malformed field: ") + e.what());
    }
    const std::size_t reserved = kNumSpecials + (tok.byte_fallback_ ? 256 : 0);
    if (tok.pieces_.size() < reserved) throw std::runtime_error("tokenizer file: vocabulary too small");
    tok.rebuild_index();
    return tok;
}

void Tokenizer::save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write tokenizer file " + path.string());
    f << to_json();
    if (!f) throw std::runtime_error("failed writing tokenizer file " + path.string());
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open tokenizer file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return from_json(ss.str());
}

double fertility(const Tokenizer& tok, std::string_view text) {
    const std::size_t words = count_words(text);
    if (words == 0) throw std::invalid_argument("fertility: text contains no words");
    return static_cast<double>(tok.encode(text).size()) / static_cast<double>(words);
}

double fertility(const Tokenizer& tok, const std::vector<std::string>& docs) {
    std::size_t words = 0;
    std::size_t tokens = 0;
    for (const auto& d : docs) {
        words += count_words(d);
        tokens += tok.encode(d).size();
    }
    if (words == 0) throw std::invalid_argument("fertility: documents contain no words");
    return static_cast<double>(tokens) / static_cast<double>(words);
}

}  // namespace budgetlab
