// SPDX-License-Identifier: Apache-2.0
//
// UTF-8 helpers and the single definition of a "word" shared by tokenizer
// fertility and word-normalized loss: a maximal run of non-whitespace
// codepoints, splitting on Unicode White_Space.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace budgetlab {

/// One decoded unit of a UTF-8 string. Bytes that do not form a valid
/// sequence come back one at a time with `valid == false`.
struct Utf8Char {
    char32_t codepoint = 0;
    std::string_view bytes;
    bool valid = true;
};

std::vector<Utf8Char> utf8_chars(std::string_view text);

std::string utf8_encode(char32_t codepoint);

bool is_unicode_space(char32_t codepoint);

std::vector<std::string_view> split_words(std::string_view text);

std::size_t count_words(std::string_view text);

}  // namespace budgetlab
