#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "qrnn/cells.hpp"
#include "qrnn/quantize.hpp"
#include "qrnn/train.hpp"

namespace qrnn {

using json = nlohmann::json;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SynthSpec {
    std::size_t classes = 10;
    std::size_t per_class = 100;
    std::size_t frames = 40;
    std::size_t dim = 16;
    double noise = kSynthNoiseDefault;
    bool length_jitter = true;
    std::uint64_t seed = 7;
};

// Everything one reproducible run needs; serialized verbatim into the output
// directory.
struct RunConfig {
    std::string task = "char_lm"; // char_lm | seq_classify
    std::uint64_t seed = 1;
    std::string precision = "f32"; // f32 | f64
    std::string out_dir = "run";

    CellKind cell_kind = CellKind::vanilla;
    std::size_t hidden_size = 64;
    Activation activation = Activation::relu;
    std::map<Role, QuantizerSpec> scope;

    TrainConfig train;

    std::string data_path; // text corpus (char_lm) or QSEQ file (seq_classify)
    double train_fraction = 0.9;
    std::size_t seq_len = 50;
    bool masking = true;
    bool standardize = true;
    std::optional<SynthSpec> synth;
};

namespace detail {

inline void require_keys(const json& obj, const std::string& where,
                         const std::set<std::string>& allowed) {
    for (const auto& [key, _] : obj.items())
        if (!allowed.count(key))
            throw ConfigError("config: unknown key '" + key + "' in " + where);
}

template <typename V>
V get_or(const json& obj, const char* key, V fallback) {
    if (!obj.contains(key) || obj[key].is_null()) return fallback;
    try {
        return obj[key].get<V>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config: bad value for '") + key + "'");
    }
}

} // namespace detail

inline QuantizerSpec parse_quantizer_json(const json& q, const std::string& where) {
    if (!q.is_object()) throw ConfigError("config: " + where + " must be an object or null");
    detail::require_keys(q, where, {"method", "variant", "int_bits", "frac_bits", "exp_min",
                                    "exp_max", "ternary_clamp"});
    QuantizerSpec spec;
    if (!q.contains("method")) throw ConfigError("config: " + where + " needs a 'method'");
    try {
        spec.method = parse_quant_method(q["method"].get<std::string>());
        if (q.contains("variant"))
            spec.variant = parse_quant_variant(q["variant"].get<std::string>());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + where + ": " + e.what());
    }
    spec.int_bits = detail::get_or(q, "int_bits", spec.int_bits);
    spec.frac_bits = detail::get_or(q, "frac_bits", spec.frac_bits);
    spec.exp_min = detail::get_or(q, "exp_min", spec.exp_min);
    spec.exp_max = detail::get_or(q, "exp_max", spec.exp_max);
    spec.ternary_clamp = detail::get_or(q, "ternary_clamp", spec.ternary_clamp);
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + where + ": " + e.what());
    }
    return spec;
}

inline json quantizer_to_json(const QuantizerSpec& q) {
    json j;
    j["method"] = to_string(q.method);
    j["variant"] = to_string(q.variant);
    if (q.method == QuantMethod::pow2_ternary) {
        j["int_bits"] = q.int_bits;
        j["frac_bits"] = q.frac_bits;
        j["ternary_clamp"] = q.ternary_clamp;
    }
    if (q.method == QuantMethod::exp_quant) {
        j["exp_min"] = q.exp_min;
        j["exp_max"] = q.exp_max;
    }
    return j;
}

inline RunConfig parse_run_config(const json& j) {
    if (!j.is_object()) throw ConfigError("config: root must be an object");
    detail::require_keys(j, "the config root",
                         {"task", "seed", "precision", "out_dir", "cell", "quantizers", "train",
                          "data"});
    RunConfig rc;
    rc.task = detail::get_or<std::string>(j, "task", rc.task);
    if (rc.task != "char_lm" && rc.task != "seq_classify")
        throw ConfigError("config: task must be 'char_lm' or 'seq_classify'");
    rc.seed = detail::get_or<std::uint64_t>(j, "seed", rc.seed);
    rc.precision = detail::get_or<std::string>(j, "precision", rc.precision);
    if (rc.precision != "f32" && rc.precision != "f64")
        throw ConfigError("config: precision must be 'f32' or 'f64'");
    rc.out_dir = detail::get_or<std::string>(j, "out_dir", rc.out_dir);

    if (j.contains("cell")) {
        const json& c = j["cell"];
        detail::require_keys(c, "'cell'", {"kind", "hidden_size", "activation"});
        try {
            if (c.contains("kind")) rc.cell_kind = parse_cell_kind(c["kind"].get<std::string>());
            if (c.contains("activation"))
                rc.activation = parse_activation(c["activation"].get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: 'cell': ") + e.what());
        }
        rc.hidden_size = detail::get_or<std::size_t>(c, "hidden_size", rc.hidden_size);
        if (rc.hidden_size == 0) throw ConfigError("config: 'cell.hidden_size' must be > 0");
    }

    if (j.contains("quantizers")) {
        const json& q = j["quantizers"];
        detail::require_keys(q, "'quantizers'", {"input", "recurrent", "bias", "output"});
        for (const auto& [key, value] : q.items()) {
            if (value.is_null()) continue;
            rc.scope.emplace(parse_role(key), parse_quantizer_json(value, "'quantizers." + key + "'"));
        }
    }

    if (j.contains("train")) {
        const json& t = j["train"];
        detail::require_keys(t, "'train'",
                             {"learning_rate", "beta1", "beta2", "epsilon", "batch_size",
                              "max_epochs", "patience", "master_clip", "grad_clip", "shuffle",
                              "eval_mode", "wallclock"});
        auto& tc = rc.train;
        tc.learning_rate = detail::get_or(t, "learning_rate", tc.learning_rate);
        if (tc.learning_rate <= 0) throw ConfigError("config: 'train.learning_rate' must be > 0");
        tc.beta1 = detail::get_or(t, "beta1", tc.beta1);
        tc.beta2 = detail::get_or(t, "beta2", tc.beta2);
        tc.epsilon = detail::get_or(t, "epsilon", tc.epsilon);
        tc.batch_size = detail::get_or(t, "batch_size", tc.batch_size);
        if (tc.batch_size == 0) throw ConfigError("config: 'train.batch_size' must be >= 1");
        tc.max_epochs = detail::get_or(t, "max_epochs", tc.max_epochs);
        tc.patience = detail::get_or(t, "patience", tc.patience);
        if (tc.patience > tc.max_epochs)
            throw ConfigError("config: 'train.patience' must be <= 'train.max_epochs'");
        tc.master_clip = detail::get_or(t, "master_clip", tc.master_clip);
        if (t.contains("grad_clip") && !t["grad_clip"].is_null()) {
            tc.grad_clip_enabled = true;
            tc.grad_clip_norm = t["grad_clip"].get<double>();
        }
        tc.shuffle = detail::get_or(t, "shuffle", tc.shuffle);
        if (t.contains("eval_mode")) {
            try {
                tc.eval_mode = parse_eval_mode(t["eval_mode"].get<std::string>());
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("config: 'train.eval_mode': ") + e.what());
            }
        }
        tc.record_wallclock = detail::get_or(t, "wallclock", tc.record_wallclock);
    }
    rc.train.seed = rc.seed;

    if (j.contains("data")) {
        const json& d = j["data"];
        detail::require_keys(d, "'data'", {"path", "train_fraction", "seq_len", "masking",
                                           "standardize", "synth"});
        rc.data_path = detail::get_or<std::string>(d, "path", rc.data_path);
        rc.train_fraction = detail::get_or(d, "train_fraction", rc.train_fraction);
        rc.seq_len = detail::get_or<std::size_t>(d, "seq_len", rc.seq_len);
        rc.masking = detail::get_or(d, "masking", rc.masking);
        rc.standardize = detail::get_or(d, "standardize", rc.standardize);
        if (d.contains("synth") && !d["synth"].is_null()) {
            const json& s = d["synth"];
            detail::require_keys(s, "'data.synth'", {"classes", "per_class", "frames", "dim",
                                                     "noise", "length_jitter", "seed"});
            SynthSpec sp;
            sp.classes = detail::get_or<std::size_t>(s, "classes", sp.classes);
            sp.per_class = detail::get_or<std::size_t>(s, "per_class", sp.per_class);
            sp.frames = detail::get_or<std::size_t>(s, "frames", sp.frames);
            sp.dim = detail::get_or<std::size_t>(s, "dim", sp.dim);
            sp.noise = detail::get_or(s, "noise", sp.noise);
            sp.length_jitter = detail::get_or(s, "length_jitter", sp.length_jitter);
            sp.seed = detail::get_or<std::uint64_t>(s, "seed", sp.seed);
            rc.synth = sp;
        }
    }

    if (rc.task == "char_lm" && rc.data_path.empty())
        throw ConfigError("config: 'data.path' is required for char_lm");
    if (rc.task == "seq_classify" && rc.data_path.empty() && !rc.synth)
        throw ConfigError("config: seq_classify needs 'data.path' or 'data.synth'");
    return rc;
}

inline RunConfig parse_run_config_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
    return parse_run_config(j);
}

// The fully resolved form written into every run directory.
inline json run_config_to_json(const RunConfig& rc) {
    json j;
    j["task"] = rc.task;
    j["seed"] = rc.seed;
    j["precision"] = rc.precision;
    j["out_dir"] = rc.out_dir;
    j["cell"] = {{"kind", to_string(rc.cell_kind)},
                 {"hidden_size", rc.hidden_size},
                 {"activation", to_string(rc.activation)}};
    json q = json::object();
    for (const char* role : {"input", "recurrent", "bias", "output"}) {
        auto it = rc.scope.find(parse_role(role));
        q[role] = it == rc.scope.end() ? json(nullptr) : quantizer_to_json(it->second);
    }
    j["quantizers"] = q;
    j["train"] = {{"learning_rate", rc.train.learning_rate},
                  {"beta1", rc.train.beta1},
                  {"beta2", rc.train.beta2},
                  {"epsilon", rc.train.epsilon},
                  {"batch_size", rc.train.batch_size},
                  {"max_epochs", rc.train.max_epochs},
                  {"patience", rc.train.patience},
                  {"master_clip", rc.train.master_clip},
                  {"grad_clip", rc.train.grad_clip_enabled ? json(rc.train.grad_clip_norm)
                                                           : json(nullptr)},
                  {"shuffle", rc.train.shuffle},
                  {"eval_mode", to_string(rc.train.eval_mode)},
                  {"wallclock", rc.train.record_wallclock}};
    json d;
    d["path"] = rc.data_path;
    d["train_fraction"] = rc.train_fraction;
    d["seq_len"] = rc.seq_len;
    d["masking"] = rc.masking;
    d["standardize"] = rc.standardize;
    if (rc.synth) {
        d["synth"] = {{"classes", rc.synth->classes},   {"per_class", rc.synth->per_class},
                      {"frames", rc.synth->frames},     {"dim", rc.synth->dim},
                      {"noise", rc.synth->noise},       {"length_jitter", rc.synth->length_jitter},
                      {"seed", rc.synth->seed}};
    } else {
        d["synth"] = nullptr;
    }
    j["data"] = d;
    return j;
}

// Stability-sweep driver configuration.
struct DiagnoseConfig {
    std::size_t hidden_size = 64;
    std::size_t steps = 50;
    std::uint64_t seed = 1;
    CellKind cell_kind = CellKind::vanilla;
    Activation activation = Activation::relu;
    bool resample_per_step = true;
    std::vector<std::string> quantizers = {"none", "binary_stoch", "ternary_stoch",
                                           "expquant_stoch"};
    std::string out_dir = "run";
};

// Labels: none | binary_stoch | binary_det | ternary_stoch | ternary_det |
// pow2ternary | expquant_stoch | expquant_det
inline std::optional<QuantizerSpec> quantizer_from_label(const std::string& label) {
    if (label == "none") return std::nullopt;
    QuantizerSpec q;
    const auto us = label.rfind('_');
    std::string method = label, variant;
    if (us != std::string::npos && (label.substr(us + 1) == "stoch" ||
                                    label.substr(us + 1) == "det")) {
        method = label.substr(0, us);
        variant = label.substr(us + 1);
    }
    q.method = parse_quant_method(method);
    if (q.method == QuantMethod::pow2_ternary) {
        q.variant = QuantVariant::deterministic;
    } else if (variant == "stoch") {
        q.variant = QuantVariant::stochastic;
    } else if (variant == "det") {
        q.variant = QuantVariant::deterministic;
    } else {
        throw ConfigError("config: quantizer label '" + label +
                          "' needs a _stoch or _det suffix");
    }
    q.validate();
    return q;
}

inline DiagnoseConfig parse_diagnose_config(const json& j) {
    if (!j.is_object()) throw ConfigError("config: root must be an object");
    detail::require_keys(j, "the diagnose config root",
                         {"hidden_size", "steps", "seed", "cell", "activation",
                          "resample_per_step", "quantizers", "out_dir"});
    DiagnoseConfig dc;
    dc.hidden_size = detail::get_or<std::size_t>(j, "hidden_size", dc.hidden_size);
    dc.steps = detail::get_or<std::size_t>(j, "steps", dc.steps);
    dc.seed = detail::get_or<std::uint64_t>(j, "seed", dc.seed);
    try {
        if (j.contains("cell")) dc.cell_kind = parse_cell_kind(j["cell"].get<std::string>());
        if (j.contains("activation"))
            dc.activation = parse_activation(j["activation"].get<std::string>());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    dc.resample_per_step = detail::get_or(j, "resample_per_step", dc.resample_per_step);
    dc.quantizers = detail::get_or(j, "quantizers", dc.quantizers);
    dc.out_dir = detail::get_or<std::string>(j, "out_dir", dc.out_dir);
    for (const auto& label : dc.quantizers) quantizer_from_label(label); // validate now
    return dc;
}

} // namespace qrnn
