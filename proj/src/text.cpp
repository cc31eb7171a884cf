// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/text.h"

namespace budgetlab {

std::vector<Utf8Char> utf8_chars(std::string_view text) {
    std::vector<Utf8Char> out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        const auto lead = static_cast<unsigned char>(text[i]);
        std::size_t len = 0;
        char32_t cp = 0;
        if (lead < 0x80) {
            len = 1;
            cp = lead;
        } else if ((lead & 0xE0) == 0xC0) {
            len = 2;
            cp = lead & 0x1F;
        } else if ((lead & 0xF0) == 0xE0) {
            len = 3;
            cp = lead & 0x0F;
        } else if ((lead & 0xF8) == 0xF0) {
            len = 4;
            cp = lead & 0x07;
        }
        bool ok = len > 0 && i + len <= text.size();
        for (std::size_t k = 1; ok && k < len; ++k) {
            const auto c = static_cast<unsigned char>(text[i + k]);
            if ((c & 0xC0) != 0x80) {
                ok = false;
            } else {
                cp = (cp << 6) | (c & 0x3F);
            }
        }
        // Reject overlong forms, surrogates and out-of-range values.
        if (ok) {
            static constexpr char32_t kMinForLength[5] = {0, 0, 0x80, 0x800, 0x10000};
            if (cp < kMinForLength[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) ok = false;
        }
        if (ok) {
            out.push_back({cp, text.substr(i, len), true});
            i += len;
        } else {
            out.push_back({lead, text.substr(i, 1), false});
            i += 1;
        }
    }
    return out;
}

std::string utf8_encode(char32_t cp) {
    std::string s;
    if (cp < 0x80) {
        s += static_cast<char>(cp);
    } else if (cp < 0x800) {
        s += static_cast<char>(0xC0 | (cp >> 6));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        s += static_cast<char>(0xE0 | (cp >> 12));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        s += static_cast<char>(0xF0 | (cp >> 18));
        s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return s;
}

bool is_unicode_space(char32_t cp) {
    switch (cp) {
        case 0x0009: case 0x000A: case 0x000B: case 0x000C: case 0x000D:
        case 0x0020: case 0x0085: case 0x00A0: case 0x1680:
        case 0x2028: case 0x2029: case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return cp >= 0x2000 && cp <= 0x200A;
    }
}

std::vector<std::string_view> split_words(std::string_view text) {
    std::vector<std::string_view> words;
    std::size_t start = std::string_view::npos;
    std::size_t pos = 0;
    for (const Utf8Char& ch : utf8_chars(text)) {
        const bool space = ch.valid && is_unicode_space(ch.codepoint);
        if (space) {
            if (start != std::string_view::npos) {
                words.push_back(text.substr(start, pos - start));
                start = std::string_view::npos;
            }
        } else if (start == std::string_view::npos) {
            start = pos;
        }
        pos += ch.bytes.size();
    }
    if (start != std::string_view::npos) words.push_back(text.substr(start));
    return words;
}

std::size_t count_words(std::string_view text) { return split_words(text).size(); }

}  // namespace budgetlab
