// SPDX-License-Identifier: Apache-2.0

#include "budgetlab/checkpoint.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace budgetlab {

namespace fs = std::filesystem;

namespace {

constexpr int kVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

template <typename T>
T get_le(const unsigned char* p) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<U>(p[b]) << (8 * b);
    return std::bit_cast<T>(bits);
}

bool fits_f32(const std::vector<double>& v) {
    for (double x : v) {
        if (static_cast<double>(static_cast<float>(x)) != x && !std::isnan(x)) return false;
    }
    return true;
}

class Writer {
public:
    nlohmann::json add(const std::string& name, const std::string& role, const Parameter& p,
                       const std::vector<double>& values, const FloatFormat& fmt) {
        const bool f32 = fits_f32(values);
        nlohmann::json e{{"name", name},
                         {"role", role},
                         {"layer_kind", to_string(p.kind)},
                         {"shape", {p.rows, p.cols}},
                         {"format", fmt.tag()},
                         {"dtype", f32 ? "f32" : "f64"},
                         {"offset", blob_.size()},
                         {"count", values.size()}};
        for (double x : values) {
            if (f32) {
                put_le(blob_, static_cast<float>(x));
            } else {
                put_le(blob_, x);
            }
        }
        return e;
    }
    const std::string& blob() const { return blob_; }

private:
    std::string blob_;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size},   {"d_model", c.d_model},
            {"n_layers", c.n_layers},       {"d_ff", c.d_ff},
            {"n_heads", c.n_heads},         {"context_length", c.context_length},
            {"rmsnorm_eps", c.rmsnorm_eps}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.context_length = j.value("context_length", c.context_length);
    c.rmsnorm_eps = j.value("rmsnorm_eps", c.rmsnorm_eps);
    c.validate();
    return c;
}

nlohmann::json to_json(const PrecisionPolicy& p) {
    return {{"weights_fmt", p.weights_fmt.tag()},
            {"grads_fmt", p.grads_fmt.tag()},
            {"optimizer_state_fmt", p.optimizer_state_fmt.tag()},
            {"master_weights", p.master_weights},
            {"forward_fmt", p.forward_fmt.tag()},
            {"high_precision_islands", p.high_precision_islands}};
}

PrecisionPolicy precision_policy_from_json(const nlohmann::json& j) {
    if (j.is_string()) return PrecisionPolicy::from_name(j.get<std::string>());
    PrecisionPolicy p;
    p.weights_fmt = FloatFormat::from_tag(j.at("weights_fmt").get<std::string>());
    p.grads_fmt = FloatFormat::from_tag(j.at("grads_fmt").get<std::string>());
    p.optimizer_state_fmt = FloatFormat::from_tag(j.at("optimizer_state_fmt").get<std::string>());
    p.master_weights = j.at("master_weights").get<bool>();
    p.forward_fmt = FloatFormat::from_tag(j.at("forward_fmt").get<std::string>());
    p.high_precision_islands = j.at("high_precision_islands").get<bool>();
    p.validate();
    return p;
}

void save_checkpoint(const std::string& dir, const ParameterSet& params, const PrecisionPolicy& policy,
                     const OptimizerState* optimizer, const nlohmann::json& metadata) {
    Writer w;
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params[i];
        tensors.push_back(w.add(p.name, "weight", p, p.values, policy.weights_fmt));
        if (p.init_snapshot) tensors.push_back(w.add(p.name, "init", p, *p.init_snapshot, policy.weights_fmt));
        if (optimizer) {
            if (optimizer->m.size() != params.size() || optimizer->v.size() != params.size()) {
                throw std::invalid_argument("save_checkpoint: optimizer state does not match the parameters");
            }
            tensors.push_back(w.add(p.name, "m", p, optimizer->m[i], policy.optimizer_state_fmt));
            tensors.push_back(w.add(p.name, "v", p, optimizer->v[i], policy.optimizer_state_fmt));
            if (optimizer->master) {
                tensors.push_back(w.add(p.name, "master", p, (*optimizer->master)[i], policy.optimizer_state_fmt));
            }
        }
    }
    nlohmann::json manifest{{"version", kVersion},
                            {"model_config", to_json(params.config())},
                            {"policy", to_json(policy)},
                            {"payload", "tensors.bin"},
                            {"payload_bytes", w.blob().size()},
                            {"tensors", tensors},
                            {"metadata", metadata}};
    if (optimizer) {
        manifest["optimizer"] = {{"step", optimizer->step}, {"has_master", optimizer->master.has_value()}};
    }
    fs::create_directories(dir);
    write_file(fs::path(dir) / "tensors.bin", w.blob());
    write_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(fs::path(dir) / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint manifest in " + dir + " is not valid JSON: " + e.what());
    }
    try {
        if (manifest.at("version").get<int>() != kVersion) {
            throw std::runtime_error("unsupported checkpoint version " + manifest.at("version").dump());
        }
        const std::string blob = read_file(fs::path(dir) / manifest.at("payload").get<std::string>());
        if (blob.size() != manifest.at("payload_bytes").get<std::size_t>()) {
            throw std::runtime_error("checkpoint payload in " + dir + " has the wrong size");
        }
        const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());

        Checkpoint ck;
        ck.params = ParameterSet(model_config_from_json(manifest.at("model_config")));
        ck.policy = precision_policy_from_json(manifest.at("policy"));
        ck.metadata = manifest.value("metadata", nlohmann::json::object());
        const bool has_opt = manifest.contains("optimizer");
        if (has_opt) {
            OptimizerState st;
            st.step = manifest["optimizer"].at("step").get<std::uint64_t>();
            st.m.resize(ck.params.size());
            st.v.resize(ck.params.size());
            if (manifest["optimizer"].at("has_master").get<bool>()) st.master.emplace(ck.params.size());
            ck.optimizer = std::move(st);
        }

        std::vector<char> loaded(ck.params.size(), 0);
        for (const auto& e : manifest.at("tensors")) {
            const std::string name = e.at("name").get<std::string>();
            const std::size_t idx = ck.params.index_of(name);
            Parameter& p = ck.params[idx];
            const auto shape = e.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2 || shape[0] != p.rows || shape[1] != p.cols) {
                throw std::runtime_error("tensor '" + name + "' has a shape that does not match the config");
            }
            const std::size_t count = e.at("count").get<std::size_t>();
            const std::size_t offset = e.at("offset").get<std::size_t>();
            const std::string dtype = e.at("dtype").get<std::string>();
            const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
            if (width == 0) throw std::runtime_error("tensor '" + name + "' has unknown dtype " + dtype);
            if (count != p.size() || offset + count * width > blob.size()) {
                throw std::runtime_error("tensor '" + name + "' is out of bounds");
            }
            std::vector<double> values(count);
            for (std::size_t k = 0; k < count; ++k) {
                const unsigned char* at = bytes + offset + k * width;
                values[k] = width == 4 ? static_cast<double>(get_le<float>(at)) : get_le<double>(at);
            }
            const FloatFormat fmt = FloatFormat::from_tag(e.at("format").get<std::string>());
            for (double x : values) {
                if (std::isfinite(x) && !is_representable(x, fmt)) {
                    throw std::runtime_error("tensor '" + name + "' holds a value outside its format " + fmt.tag());
                }
            }
            const std::string role = e.at("role").get<std::string>();
            if (role == "weight") {
                p.values = std::move(values);
                loaded[idx] = 1;
            } else if (role == "init") {
                p.init_snapshot = std::move(values);
            } else if (has_opt && role == "m") {
                ck.optimizer->m[idx] = std::move(values);
            } else if (has_opt && role == "v") {
                ck.optimizer->v[idx] = std::move(values);
            } else if (has_opt && role == "master" && ck.optimizer->master) {
                (*ck.optimizer->master)[idx] = std::move(values);
            } else {
                throw std::runtime_error("tensor '" + name + "' has unexpected role " + role);
            }
        }
        for (std::size_t i = 0; i < ck.params.size(); ++i) {
            if (!loaded[i]) throw std::runtime_error("checkpoint has no weights for '" + ck.params[i].name + "'");
        }
        if (ck.optimizer) {
            for (std::size_t i = 0; i < ck.params.size(); ++i) {
                const bool ok = ck.optimizer->m[i].size() == ck.params[i].size() &&
                                ck.optimizer->v[i].size() == ck.params[i].size() &&
                                (!ck.optimizer->master || (*ck.optimizer->master)[i].size() == ck.params[i].size());
                if (!ok) throw std::runtime_error("optimizer state for '" + ck.params[i].name + "' is missing");
            }
        }
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed checkpoint manifest in " + dir + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error("invalid checkpoint in " + dir + ": " + e.what());
    } catch (const std::out_of_range& e) {
        throw std::runtime_error("invalid checkpoint in " + dir + ": " + e.what());
    }
}

}  // namespace budgetlab
