// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>

#include "budgetlab/model.h"

namespace budgetlab {

std::string to_string(PackingMode mode) {
    return mode == PackingMode::EosConcat ? "eos_concat" : "bos_masked";
}

PackingMode packing_mode_from_string(const std::string& s) {
    if (s == "eos_concat" || s == "EosConcat") return PackingMode::EosConcat;
    if (s == "bos_masked" || s == "BosMasked") return PackingMode::BosMasked;
    throw std::invalid_argument("unknown packing mode '" + s + "' (expected eos_concat or bos_masked)");
}

std::vector<std::size_t> PackedBlock::span_index() const {
    std::vector<std::size_t> idx(size(), 0);
    for (std::size_t s = 0; s < document_spans.size(); ++s) {
        for (std::size_t t = document_spans[s].first; t < document_spans[s].second && t < size(); ++t) idx[t] = s;
    }
    return idx;
}

std::vector<PackedBlock> pack_documents(const std::vector<std::vector<std::int32_t>>& docs, PackingMode mode,
                                        std::size_t context_length, const SpecialIds& ids) {
    if (context_length < 2) throw std::invalid_argument("pack_documents: context_length must be >= 2");

    // Flatten into one labelled stream; label = document index.
    std::vector<std::int32_t> stream;
    std::vector<std::int64_t> label;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        if (mode == PackingMode::BosMasked) {
            stream.push_back(ids.bos);
            label.push_back(static_cast<std::int64_t>(d));
        } else if (d > 0) {
            // The separator closes the previous document.
            stream.push_back(ids.eos);
            label.push_back(static_cast<std::int64_t>(d - 1));
        }
        for (std::int32_t tok : docs[d]) {
            stream.push_back(tok);
            label.push_back(static_cast<std::int64_t>(d));
        }
    }

    std::vector<PackedBlock> blocks;
    for (std::size_t start = 0; start < stream.size(); start += context_length) {
        const std::size_t end = std::min(stream.size(), start + context_length);
        PackedBlock b;
        b.packing_mode = mode;
        b.valid_length = end - start;
        b.token_ids.assign(stream.begin() + static_cast<std::ptrdiff_t>(start),
                           stream.begin() + static_cast<std::ptrdiff_t>(end));
        std::size_t span_start = 0;
        for (std::size_t t = 1; t <= b.valid_length; ++t) {
            if (t == b.valid_length || label[start + t] != label[start + t - 1]) {
                b.document_spans.emplace_back(span_start, t);
                span_start = t;
            }
        }
        if (b.valid_length < context_length) {
            b.token_ids.resize(context_length, ids.pad);
            b.document_spans.emplace_back(b.valid_length, context_length);
        }
        blocks.push_back(std::move(b));
    }
    return blocks;
}

AttentionMask build_attention_mask(const PackedBlock& block) {
    AttentionMask m;
    m.n = block.size();
    m.allowed.assign(m.n * m.n, 0);
    const bool masked = block.packing_mode == PackingMode::BosMasked;
    const std::vector<std::size_t> span = block.span_index();
    for (std::size_t i = 0; i < m.n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            if (masked && span[i] != span[j]) continue;
            m.allowed[i * m.n + j] = 1;
        }
    }
    return m;
}

std::vector<char> target_positions(const PackedBlock& block) {
    std::vector<char> out(block.size(), 0);
    const std::vector<std::size_t> span = block.span_index();
    for (std::size_t t = 0; t + 1 < block.valid_length; ++t) {
        if (block.packing_mode == PackingMode::BosMasked && span[t] != span[t + 1]) continue;
        out[t] = 1;
    }
    return out;
}

}  // namespace budgetlab
