#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/search.hpp"
#include "slimrec/supernet.hpp"

namespace slimrec {

// One flat key = value namespace covers the model, the search loop, the data
// paths and the sweep shapes. Files hold `key = value` lines with `#`
// comments; command-line flags override file values; unknown keys are
// rejected against this schema.
enum class KeyKind { Int, Uint, Real, Bool, String, RealList, IntList };

struct KeySpec {
    std::string name;
    KeyKind kind;
    std::string default_value;
    std::string help;
};

inline const std::vector<KeySpec>& config_schema() {
    static const std::vector<KeySpec> schema = {
        {"dataset", KeyKind::String, "", "path to the interactions file (user, item, timestamp)"},
        {"out_dir", KeyKind::String, "", "directory for all run artifacts"},
        {"seed", KeyKind::Uint, "1", "master seed; every RNG stream derives from it"},
        {"d", KeyKind::Int, "64", "hidden size of the supernet"},
        {"inner_size", KeyKind::Int, "256", "inner (feed-forward) size of the supernet"},
        {"seq_len", KeyKind::Int, "50", "input window length N"},
        {"layers", KeyKind::Int, "4", "transformer layer count L"},
        {"heads", KeyKind::Int, "4", "attention head count"},
        {"gammas", KeyKind::RealList, "0,0.25,0.5", "hidden pruning intensities, one per candidate"},
        {"gamma_primes", KeyKind::RealList, "0,0.25,0.5", "inner pruning intensities, one per candidate"},
        {"lambda", KeyKind::Real, "0.1", "resource penalty tradeoff"},
        {"gate_depth", KeyKind::Int, "2", "data-aware gate layer count L_d (0 disables gates)"},
        {"dropout", KeyKind::Real, "0.2", "dropout rate"},
        {"top_k", KeyKind::Int, "10", "ranking cutoff for evaluation"},
        {"lr", KeyKind::Real, "0.001", "Adam learning rate"},
        {"batch_search", KeyKind::Int, "1024", "batch size during search"},
        {"batch_retrain", KeyKind::Int, "2048", "batch size during retraining"},
        {"max_epochs_search", KeyKind::Int, "50", "search epoch cap"},
        {"max_epochs_retrain", KeyKind::Int, "200", "retraining epoch cap"},
        {"patience", KeyKind::Int, "10", "early-stopping patience in epochs"},
        {"refresh_every", KeyKind::Int, "100", "iterations between dynamic-depth refreshes (f)"},
        {"sliding_windows", KeyKind::Bool, "false", "train on every in-prefix next-item window"},
        {"window_stride", KeyKind::Int, "1", "stride between sliding windows"},
        {"verify_isolation", KeyKind::Bool, "false", "bit-check weight/arch step isolation while searching"},
        {"exclude_seen", KeyKind::Bool, "false", "drop items already in a user's history from rankings"},
        {"lambdas", KeyKind::RealList, "0.01,0.1,1", "lambda grid for sweep-lambda"},
        {"gate_depths", KeyKind::IntList, "0,1,2", "L_d grid for sweep-gate-depth"},
        {"sweep_seeds", KeyKind::IntList, "", "seeds for sweeps (default: seed, seed+1, seed+2)"},
        {"sweep_retrain", KeyKind::Bool, "false", "also retrain and evaluate inside sweep-lambda"},
        {"run_tag", KeyKind::String, "", "optional label recorded in the results ledger"},
    };
    return schema;
}

struct RunConfig {
    std::map<std::string, std::string> values;  // resolved, every schema key present

    const std::string& raw(const std::string& key) const {
        auto it = values.find(key);
        if (it == values.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    std::string str(const std::string& key) const { return raw(key); }

    int64_t integer(const std::string& key) const {
        try {
            return std::stoll(raw(key));
        } catch (...) {
            throw ConfigError("key '" + key + "' wants an integer, got '" + raw(key) + "'");
        }
    }

    uint64_t uinteger(const std::string& key) const {
        try {
            return std::stoull(raw(key));
        } catch (...) {
            throw ConfigError("key '" + key + "' wants a non-negative integer, got '" + raw(key) + "'");
        }
    }

    double number(const std::string& key) const {
        try {
            size_t used = 0;
            double v = std::stod(raw(key), &used);
            if (used != raw(key).size()) throw ConfigError("");
            return v;
        } catch (...) {
            throw ConfigError("key '" + key + "' wants a number, got '" + raw(key) + "'");
        }
    }

    bool flag(const std::string& key) const {
        const std::string& v = raw(key);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw ConfigError("key '" + key + "' wants a boolean, got '" + v + "'");
    }

    std::vector<double> numbers(const std::string& key) const {
        std::vector<double> out;
        std::stringstream ss(raw(key));
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            try {
                out.push_back(std::stod(tok));
            } catch (...) {
                throw ConfigError("key '" + key + "': bad number '" + tok + "'");
            }
        }
        return out;
    }

    std::vector<int64_t> integers(const std::string& key) const {
        std::vector<int64_t> out;
        for (double v : numbers(key)) out.push_back(static_cast<int64_t>(v));
        return out;
    }

    SupernetConfig supernet_config() const {
        SupernetConfig cfg;
        cfg.d = static_cast<int>(integer("d"));
        cfg.D = static_cast<int>(integer("inner_size"));
        cfg.N = static_cast<int>(integer("seq_len"));
        cfg.L = static_cast<int>(integer("layers"));
        cfg.heads = static_cast<int>(integer("heads"));
        cfg.gammas = numbers("gammas");
        cfg.gamma_primes = numbers("gamma_primes");
        cfg.lambda = number("lambda");
        cfg.gate_depth = static_cast<int>(integer("gate_depth"));
        cfg.dropout = number("dropout");
        cfg.batch_search = static_cast<int>(integer("batch_search"));
        cfg.batch_retrain = static_cast<int>(integer("batch_retrain"));
        cfg.top_k = static_cast<int>(integer("top_k"));
        cfg.validate();
        return cfg;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.lr = static_cast<real>(number("lr"));
        tc.lambda = number("lambda");
        tc.batch_search = static_cast<int>(integer("batch_search"));
        tc.batch_retrain = static_cast<int>(integer("batch_retrain"));
        tc.max_epochs_search = static_cast<int>(integer("max_epochs_search"));
        tc.max_epochs_retrain = static_cast<int>(integer("max_epochs_retrain"));
        tc.patience = static_cast<int>(integer("patience"));
        tc.seed = uinteger("seed");
        tc.refresh_every = static_cast<int>(integer("refresh_every"));
        tc.sliding_windows = flag("sliding_windows");
        tc.window_stride = static_cast<int>(integer("window_stride"));
        tc.verify_isolation = flag("verify_isolation");
        tc.validate();
        return tc;
    }

    // Deterministic echo of the resolved configuration.
    std::string render() const {
        std::string out;
        for (const auto& [k, v] : values) out += k + " = " + v + "\n";
        return out;
    }
};

namespace detail {

inline const KeySpec* find_key(const std::string& name) {
    for (const auto& k : config_schema())
        if (k.name == name) return &k;
    return nullptr;
}

inline void validate_value(const KeySpec& spec, const std::string& value) {
    RunConfig probe;
    probe.values[spec.name] = value;
    switch (spec.kind) {
        case KeyKind::Int: probe.integer(spec.name); break;
        case KeyKind::Uint: probe.uinteger(spec.name); break;
        case KeyKind::Real: probe.number(spec.name); break;
        case KeyKind::Bool: probe.flag(spec.name); break;
        case KeyKind::RealList: probe.numbers(spec.name); break;
        case KeyKind::IntList: probe.integers(spec.name); break;
        case KeyKind::String: break;
    }
}

}  // namespace detail

inline RunConfig default_config() {
    RunConfig cfg;
    for (const auto& k : config_schema()) cfg.values[k.name] = k.default_value;
    return cfg;
}

inline void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value,
                              const std::string& where) {
    const KeySpec* spec = detail::find_key(key);
    if (!spec) throw ConfigError(where + ": unknown key '" + key + "'");
    detail::validate_value(*spec, value);
    cfg.values[key] = value;
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        size_t eq = line.find('=');
        std::string where = path + ":" + std::to_string(lineno);
        std::string trimmed = detail::trim(line);
        if (trimmed.empty()) continue;
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(where + ": empty key");
        apply_config_line(cfg, key, value, where);
    }
}

}  // namespace slimrec
