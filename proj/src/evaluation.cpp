// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/evaluation.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "budgetlab/text.h"

namespace budgetlab {

nlohmann::json EvalReport::to_json() const {
    return {{"nll_sum", nll_sum},         {"token_count", token_count},     {"word_count", word_count},
            {"nll_per_token", nll_per_token}, {"nll_per_word", nll_per_word}, {"chunk_ids", chunk_ids}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    r.nll_sum = j.at("nll_sum").get<double>();
    r.token_count = j.at("token_count").get<std::size_t>();
    r.word_count = j.at("word_count").get<std::size_t>();
    r.nll_per_token = j.at("nll_per_token").get<double>();
    r.nll_per_word = j.at("nll_per_word").get<double>();
    r.chunk_ids = j.at("chunk_ids").get<std::vector<std::string>>();
    return r;
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "chunks,nll_sum,token_count,word_count,nll_per_token,nll_per_word\n";
    os << chunk_ids.size() << ',' << nll_sum << ',' << token_count << ',' << word_count << ',' << nll_per_token
       << ',' << nll_per_word << '\n';
    return os.str();
}

double chunk_nll(const ParameterSet& model, const std::vector<std::int32_t>& ids, const PrecisionPolicy& policy,
                 std::int32_t bos_id) {
    if (ids.empty()) throw std::invalid_argument("chunk_nll: chunk has no tokens");
    const std::size_t ctx = model.config().context_length;
    if (ctx < 2) throw std::invalid_argument("chunk_nll: context_length must be >= 2");

    std::vector<std::int32_t> seq;
    seq.reserve(ids.size() + 1);
    seq.push_back(bos_id);
    seq.insert(seq.end(), ids.begin(), ids.end());

    double total = 0.0;
    for (std::size_t start = 0; start + 1 < seq.size(); start += ctx - 1) {
        const std::size_t end = std::min(seq.size(), start + ctx);
        PackedBlock block;
        block.token_ids.assign(seq.begin() + static_cast<std::ptrdiff_t>(start),
                               seq.begin() + static_cast<std::ptrdiff_t>(end));
        block.valid_length = block.token_ids.size();
        block.document_spans = {{0, block.valid_length}};
        block.packing_mode = PackingMode::EosConcat;
        total += forward_loss(model, block, policy).nll_sum;
    }
    return total;
}

EvalReport word_normalized_nll(const ParameterSet& model, const std::vector<std::vector<std::int32_t>>& ids,
                               const std::vector<EvalChunk>& chunks, const PrecisionPolicy& policy) {
    if (chunks.empty()) throw std::invalid_argument("word_normalized_nll: no chunks");
    if (ids.size() != chunks.size()) throw std::invalid_argument("word_normalized_nll: ids and chunks differ in length");
    EvalReport r;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        const std::size_t words = count_words(chunks[i].text);
        if (words == 0 || ids[i].empty()) {
            throw std::invalid_argument("word_normalized_nll: chunk '" + chunks[i].id + "' is empty");
        }
        r.nll_sum += chunk_nll(model, ids[i], policy);
        r.token_count += ids[i].size();
        r.word_count += words;
        r.chunk_ids.push_back(chunks[i].id);
    }
    r.nll_per_token = r.nll_sum / static_cast<double>(r.token_count);
    r.nll_per_word = r.nll_sum / static_cast<double>(r.word_count);
    return r;
}

EvalReport word_normalized_nll(const ParameterSet& model, const Tokenizer& tok, const std::vector<EvalChunk>& chunks,
                               const PrecisionPolicy& policy) {
    if (tok.size() != model.config().vocab_size) {
        throw std::invalid_argument("word_normalized_nll: tokenizer has " + std::to_string(tok.size()) +
                                    " tokens but the model expects " +
                                    std::to_string(model.config().vocab_size));
    }
    std::vector<std::vector<std::int32_t>> ids;
    ids.reserve(chunks.size());
    for (const auto& c : chunks) ids.push_back(tok.encode(c.text));
    return word_normalized_nll(model, ids, chunks, policy);
}

// ---------------------------------------------------------------------------

void HistogramSpec::validate() const {
    if (bins == 0) throw std::invalid_argument("HistogramSpec: need at least one bin");
    if (!(lo > 0.0) || !(hi > lo) || !std::isfinite(hi)) {
        throw std::invalid_argument("HistogramSpec: need 0 < lo < hi < inf");
    }
}

std::vector<double> HistogramSpec::edges() const {
    validate();
    std::vector<double> e(bins + 1);
    const double a = std::log10(lo);
    const double b = std::log10(hi);
    for (std::size_t i = 0; i <= bins; ++i) {
        e[i] = std::pow(10.0, a + (b - a) * static_cast<double>(i) / static_cast<double>(bins));
    }
    e.front() = lo;
    e.back() = hi;
    return e;
}

long HistogramSpec::bin_of(double abs_w) const {
    if (!(abs_w >= lo)) return -1;
    if (abs_w >= hi) return static_cast<long>(bins);
    const double pos = (std::log10(abs_w) - std::log10(lo)) / (std::log10(hi) - std::log10(lo));
    auto k = static_cast<long>(pos * static_cast<double>(bins));
    return std::clamp<long>(k, 0, static_cast<long>(bins) - 1);
}

std::size_t weight_group(LayerKind kind) { return kind == LayerKind::RMSNorm ? 0 : 1; }

namespace {

const std::vector<double>& values_for(const ParameterSet& params, const std::vector<std::vector<double>>& values,
                                      std::size_t i) {
    if (values.empty()) return params[i].values;
    if (values.size() != params.size() || values[i].size() != params[i].size()) {
        throw std::invalid_argument("weight report: value override does not match parameter shapes");
    }
    return values[i];
}

}  // namespace

WeightReport weight_histogram(const ParameterSet& params, const HistogramSpec& spec,
                              const std::vector<std::vector<double>>& values) {
    spec.validate();
    WeightReport r;
    r.spec = spec;
    std::array<double, 2> sums{0.0, 0.0};
    for (auto& g : r.groups) g.histogram.assign(spec.bins, 0);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::size_t gi = weight_group(params[i].kind);
        WeightGroupStats& g = r.groups[gi];
        for (double w : values_for(params, values, i)) {
            const double a = std::fabs(w);
            sums[gi] += a;
            ++g.count;
            const long k = spec.bin_of(a);
            if (k < 0) {
                ++g.underflow;
            } else if (k >= static_cast<long>(spec.bins)) {
                ++g.overflow;
            } else {
                ++g.histogram[static_cast<std::size_t>(k)];
            }
        }
    }
    for (std::size_t gi = 0; gi < 2; ++gi) {
        if (r.groups[gi].count) r.groups[gi].mean_abs = sums[gi] / static_cast<double>(r.groups[gi].count);
    }
    return r;
}

WeightReport param_change(const ParameterSet& params, const std::vector<std::vector<double>>& values,
                          const HistogramSpec& spec) {
    WeightReport r = weight_histogram(params, spec, values);
    std::array<double, 2> sums{0.0, 0.0};
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params[i];
        if (!p.init_snapshot) throw std::invalid_argument("param_change: '" + p.name + "' has no init snapshot");
        const std::vector<double>& now = values_for(params, values, i);
        if (p.init_snapshot->size() != now.size()) {
            throw std::invalid_argument("param_change: snapshot of '" + p.name + "' has the wrong size");
        }
        double& s = sums[weight_group(p.kind)];
        for (std::size_t k = 0; k < now.size(); ++k) s += std::fabs(now[k] - (*p.init_snapshot)[k]);
    }
    for (std::size_t gi = 0; gi < 2; ++gi) {
        r.groups[gi].has_change = true;
        if (r.groups[gi].count) r.groups[gi].mean_abs_change = sums[gi] / static_cast<double>(r.groups[gi].count);
    }
    return r;
}

nlohmann::json WeightReport::to_json() const {
    nlohmann::json j;
    j["bins"] = spec.bins;
    j["lo"] = spec.lo;
    j["hi"] = spec.hi;
    j["edges"] = spec.edges();
    for (std::size_t gi = 0; gi < 2; ++gi) {
        const WeightGroupStats& g = groups[gi];
        nlohmann::json gj{{"count", g.count},         {"mean_abs", g.mean_abs}, {"underflow", g.underflow},
                          {"histogram", g.histogram}, {"overflow", g.overflow}};
        if (g.has_change) gj["mean_abs_change"] = g.mean_abs_change;
        j["groups"][kGroupNames[gi]] = gj;
    }
    return j;
}

std::string WeightReport::histogram_csv() const {
    const std::vector<double> e = spec.edges();
    std::ostringstream os;
    os.precision(17);
    os << "group,bin,lo,hi,count\n";
    for (std::size_t gi = 0; gi < 2; ++gi) {
        const WeightGroupStats& g = groups[gi];
        os << kGroupNames[gi] << ",underflow,0," << spec.lo << ',' << g.underflow << '\n';
        for (std::size_t k = 0; k < spec.bins; ++k) {
            os << kGroupNames[gi] << ',' << k << ',' << e[k] << ',' << e[k + 1] << ',' << g.histogram[k] << '\n';
        }
        os << kGroupNames[gi] << ",overflow," << spec.hi << ",inf," << g.overflow << '\n';
    }
    return os.str();
}

std::string WeightReport::summary_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "group,count,mean_abs,mean_abs_change\n";
    for (std::size_t gi = 0; gi < 2; ++gi) {
        const WeightGroupStats& g = groups[gi];
        os << kGroupNames[gi] << ',' << g.count << ',' << g.mean_abs << ',';
        if (g.has_change) os << g.mean_abs_change;
        os << '\n';
    }
    return os.str();
}

}  // namespace budgetlab
