// SPDX-License-Identifier: Apache-2.0
//
// Seeded toy languages for desk-scale experiments: a syllable inventory, a
// Zipf-weighted lexicon split into word classes, a class-level Markov chain
// and per-word collocations. Two languages built from different seeds share
// part of their letter inventory, which gives a realistic partial overlap
// between tokenizers trained on them.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace budgetlab {

class SyntheticLanguage {
public:
    /// n_classes word classes; class 0 is a small set of short function words.
    static SyntheticLanguage make(std::uint64_t seed, std::size_t n_classes = 3, std::size_t lexicon_size = 900);

    /// Documents of roughly words_per_doc words (+-30%), sentences end in ". ".
    std::vector<std::string> sample_documents(std::size_t n_docs, std::size_t words_per_doc, std::uint64_t seed) const;

    std::size_t lexicon_size() const;
    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_ = 0;
    std::vector<std::vector<std::string>> words_;             // per class
    std::vector<std::vector<double>> zipf_;                   // per class, cumulative
    std::vector<std::vector<double>> transition_;             // class x class, cumulative
    /// Per class and word: preferred (class, word) successors.
    std::vector<std::vector<std::vector<std::pair<std::size_t, std::size_t>>>> next_;
};

}  // namespace budgetlab
