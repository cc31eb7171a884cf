// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/synthetic.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "budgetlab/rng.h"

namespace budgetlab {

namespace {

const std::vector<std::string> kConsonants = {"b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r",
                                              "s", "t", "v", "w", "z", "ç", "ş", "ł", "ñ", "ř", "ž", "ß", "x"};
const std::vector<std::string> kVowels = {"a", "e", "i", "o", "u", "y", "ä", "ö", "ü", "é", "å", "ø"};

std::size_t sample_cumulative(const std::vector<double>& cdf, Rng& rng) {
    const double u = std::uniform_real_distribution<double>(0.0, cdf.back())(rng);
    return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
}

}  // namespace

SyntheticLanguage SyntheticLanguage::make(std::uint64_t seed, std::size_t n_classes, std::size_t lexicon_size) {
    if (n_classes < 2) throw std::invalid_argument("SyntheticLanguage: need at least 2 word classes");
    if (lexicon_size < 10 * n_classes) throw std::invalid_argument("SyntheticLanguage: lexicon too small");
    SyntheticLanguage lang;
    lang.seed_ = seed;
    Rng rng(derive_seed(seed, "synthetic-language"));

    auto consonants = kConsonants;
    auto vowels = kVowels;
    std::shuffle(consonants.begin(), consonants.end(), rng);
    std::shuffle(vowels.begin(), vowels.end(), rng);
    consonants.resize(14);
    vowels.resize(6);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto pick = [&](const std::vector<std::string>& v) { return v[rng() % v.size()]; };
    auto syllable = [&] {
        std::string s = pick(consonants);
        if (unit(rng) < 0.2) s += pick(consonants);
        s += pick(vowels);
        if (unit(rng) < 0.15) s += pick(vowels);
        if (unit(rng) < 0.4) s += pick(consonants);
        return s;
    };

    std::set<std::string> used;
    const std::size_t function_words = std::max<std::size_t>(20, lexicon_size / 20);
    const std::size_t per_class = (lexicon_size - function_words) / (n_classes - 1);
    lang.words_.resize(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        const std::size_t want = c == 0 ? function_words : per_class;
        std::size_t guard = 0;
        while (lang.words_[c].size() < want && ++guard < want * 100) {
            const std::size_t syllables = c == 0 ? 1 : 1 + rng() % 3;
            std::string w;
            for (std::size_t k = 0; k < syllables; ++k) w += syllable();
            if (used.insert(w).second) lang.words_[c].push_back(w);
        }
        std::vector<double> cdf;
        double acc = 0.0;
        for (std::size_t r = 0; r < lang.words_[c].size(); ++r) {
            acc += 1.0 / std::pow(static_cast<double>(r + 1), 1.1);
            cdf.push_back(acc);
        }
        lang.zipf_.push_back(std::move(cdf));
    }

    for (std::size_t c = 0; c < n_classes; ++c) {
        std::vector<double> cdf;
        double acc = 0.0;
        for (std::size_t d = 0; d < n_classes; ++d) {
            // Alternate between function words and content words.
            const double base = (c == 0) == (d == 0) ? 0.3 : 2.0;
            acc += base * (0.5 + unit(rng));
            cdf.push_back(acc);
        }
        lang.transition_.push_back(std::move(cdf));
    }

    lang.next_.resize(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        lang.next_[c].resize(lang.words_[c].size());
        for (auto& succ : lang.next_[c]) {
            for (int k = 0; k < 3; ++k) {
                const std::size_t d = sample_cumulative(lang.transition_[c], rng);
                succ.emplace_back(d, sample_cumulative(lang.zipf_[d], rng));
            }
        }
    }
    return lang;
}

std::size_t SyntheticLanguage::lexicon_size() const {
    std::size_t n = 0;
    for (const auto& w : words_) n += w.size();
    return n;
}

std::vector<std::string> SyntheticLanguage::sample_documents(std::size_t n_docs, std::size_t words_per_doc,
                                                             std::uint64_t seed) const {
    Rng rng(mix_seed(derive_seed(seed_, "synthetic-documents"), seed));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<std::string> docs;
    docs.reserve(n_docs);
    for (std::size_t d = 0; d < n_docs; ++d) {
        const double jitter = 0.7 + 0.6 * unit(rng);
        const auto n_words = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(words_per_doc * jitter)));
        std::string doc;
        std::size_t c = rng() % words_.size();
        std::size_t w = sample_cumulative(zipf_[c], rng);
        std::size_t sentence = 0;
        const std::size_t sentence_len = 6 + rng() % 8;
        for (std::size_t i = 0; i < n_words; ++i) {
            if (i > 0) doc += ' ';
            doc += words_[c][w];
            if (++sentence == sentence_len || i + 1 == n_words) {
                doc += '.';
                sentence = 0;
            }
            if (unit(rng) < 0.6) {
                const auto& succ = next_[c][w][rng() % next_[c][w].size()];
                c = succ.first;
                w = succ.second;
            } else {
                c = sample_cumulative(transition_[c], rng);
                w = sample_cumulative(zipf_[c], rng);
            }
        }
        docs.push_back(std::move(doc));
    }
    return docs;
}

}  // namespace budgetlab
