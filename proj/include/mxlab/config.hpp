// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration files (JSON).
//
//   {
//     "model": {"depth": 4, "d_model": 512, "activation": "gelu", "layernorm": true, "seed": 1},
//     "train": {"lr": 6e-4, "steps": 8000},
//     "quant": "mxfp8-e4m3",
//     "plan":  [{"step": 4500, "action": "to_fp32"}],
//     "output_dir": "runs"
//   }
//
// "quant" is a preset name or an object:
//   {"preset": "mxfp8-e4m3", "block_size": 32, "forward_only": false,
//    "bf16_vector_ops": true, "rounding": "nearest-even", "flush_subnormals": false,
//    "exponent_offset": 0, "conditional_bump": false,
//    "points": {"grad_output": "e5m2", "ln_affine": "none", ...}}
// Every key is optional; "points" overrides individual roles after the preset.
//
// Canonical form: every field resolved (hidden_mult included, quant always
// as an object with all six points), keys sorted, compact. The fingerprint is
// FNV-1a 64 of the canonical text without output_dir, as 16 hex digits.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "mxlab/errors.hpp"
#include "mxlab/interventions.hpp"
#include "mxlab/model.hpp"
#include "mxlab/quant_config.hpp"
#include "mxlab/run_log.hpp"
#include "mxlab/training.hpp"

namespace mxlab {

struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    std::vector<InterventionPlan> plan;
    std::string output_dir = "runs";

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline std::string fnv1a64_hex(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace detail {

using SortedJson = nlohmann::json;  // std::map-backed: keys come out sorted

/// Walks one JSON object, tracking which keys were consumed.
class ObjectReader {
public:
    ObjectReader(const SortedJson& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const SortedJson* get(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    const SortedJson& require(const std::string& key) {
        const auto* v = get(key);
        if (!v) throw ConfigError(at(key), "required field is missing");
        return *v;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError(at(k), "unknown key");
    }

    double number(const std::string& key, double fallback) {
        const auto* v = get(key);
        return v ? as_number(*v, at(key)) : fallback;
    }
    std::uint64_t uint(const std::string& key, std::uint64_t fallback) {
        const auto* v = get(key);
        return v ? as_uint(*v, at(key)) : fallback;
    }
    bool boolean(const std::string& key, bool fallback) {
        const auto* v = get(key);
        if (!v) return fallback;
        if (!v->is_boolean()) throw ConfigError(at(key), "expected true or false");
        return v->get<bool>();
    }
    template <typename E>
    E choice(const std::string& key, E fallback, const std::function<std::optional<E>(std::string_view)>& parse) {
        const auto* v = get(key);
        if (!v) return fallback;
        if (!v->is_string()) throw ConfigError(at(key), "expected a string");
        const auto e = parse(v->get<std::string>());
        if (!e) throw ConfigError(at(key), "invalid value '" + v->get<std::string>() + "'");
        return *e;
    }

    static double as_number(const SortedJson& v, const std::string& path) {
        if (!v.is_number()) throw ConfigError(path, "expected a number");
        return v.get<double>();
    }
    static std::uint64_t as_uint(const SortedJson& v, const std::string& path) {
        if (v.is_number_unsigned()) return v.get<std::uint64_t>();
        if (v.is_number_integer()) throw ConfigError(path, "must be >= 0");
        if (v.is_number_float()) {
            const double d = v.get<double>();
            if (d >= 0 && d == std::floor(d) && d < 0x1p64) return static_cast<std::uint64_t>(d);
        }
        throw ConfigError(path, "expected a non-negative integer");
    }

private:
    const SortedJson& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline int as_int(std::uint64_t v, const std::string& path) {
    if (v > static_cast<std::uint64_t>(std::numeric_limits<int>::max())) throw ConfigError(path, "value too large");
    return static_cast<int>(v);
}

inline ModelConfig parse_model(const SortedJson& j) {
    ObjectReader r(j, "model");
    ModelConfig m;
    m.depth = as_int(ObjectReader::as_uint(r.require("depth"), "model.depth"), "model.depth");
    m.d_model = as_int(ObjectReader::as_uint(r.require("d_model"), "model.d_model"), "model.d_model");
    m.activation = r.choice<Activation>("activation", m.activation, parse_activation);
    m.layernorm = r.boolean("layernorm", m.layernorm);
    m.init = r.choice<InitScheme>("init", m.init, parse_init);
    m.seed = r.uint("seed", m.seed);
    m.hidden_mult = r.number("hidden_mult", m.effective_hidden_mult());
    r.finish();
    if (m.depth < 1) throw ConfigError("model.depth", "must be >= 1");
    if (m.d_model < 1) throw ConfigError("model.d_model", "must be >= 1");
    if (!(*m.hidden_mult > 0.0) || m.hidden() < 1) throw ConfigError("model.hidden_mult", "hidden width must be >= 1");
    return m;
}

inline QuantConfig parse_quant(const SortedJson* j) {
    if (!j) return quant_preset("fp32");
    auto preset = [](const std::string& name, const std::string& path) {
        try {
            return quant_preset(name);
        } catch (const InvalidInput&) {
            throw ConfigError(path, "unknown preset '" + name + "'");
        }
    };
    if (j->is_string()) return preset(j->get<std::string>(), "quant");
    ObjectReader r(*j, "quant");
    QuantConfig q = quant_preset("fp32");
    if (const auto* p = r.get("preset")) {
        if (!p->is_string()) throw ConfigError("quant.preset", "expected a string");
        q = preset(p->get<std::string>(), "quant.preset");
    }
    const auto block = r.uint("block_size", 32);
    if (block < 1 || block > 65535) throw ConfigError("quant.block_size", "must be in [1, 65535]");
    MXSpec shared;
    shared.block_size = static_cast<int>(block);
    shared.rounding = r.choice<RoundingMode>("rounding", shared.rounding, parse_rounding);
    shared.flush_subnormals = r.boolean("flush_subnormals", false);
    const auto offset = r.uint("exponent_offset", 0);
    if (offset > 1) throw ConfigError("quant.exponent_offset", "must be 0 or 1");
    shared.exponent_offset = static_cast<int>(offset);
    shared.conditional_bump = r.boolean("conditional_bump", false);
    q.forward_only = r.boolean("forward_only", q.forward_only);
    q.bf16_vector_ops = r.boolean("bf16_vector_ops", q.bf16_vector_ops);
    if (const auto* pts = r.get("points")) {
        ObjectReader pr(*pts, "quant.points");
        for (QuantRole role : kAllRoles) {
            const std::string name(to_string(role));
            const auto* v = pr.get(name);
            if (!v) continue;
            if (!v->is_string()) throw ConfigError(pr.at(name), "expected a format name");
            const auto f = parse_quant_format(v->get<std::string>());
            if (!f) throw ConfigError(pr.at(name), "invalid format '" + v->get<std::string>() + "'");
            q[role] = *f;
        }
        pr.finish();
    }
    r.finish();
    q.for_each_mx([&](MXSpec& s) {
        const FormatId e = s.element;
        s = shared;
        s.element = e;
    });
    return q;
}

inline TrainConfig parse_train(const SortedJson& j, QuantConfig quant) {
    ObjectReader r(j, "train");
    TrainConfig t;
    t.lr = ObjectReader::as_number(r.require("lr"), "train.lr");
    t.steps = ObjectReader::as_uint(r.require("steps"), "train.steps");
    t.schedule = r.choice<Schedule>("schedule", t.schedule, parse_schedule);
    t.lr_end = r.number("lr_end", t.lr_end);
    t.optimizer = r.choice<OptimizerKind>("optimizer", t.optimizer, parse_optimizer);
    t.batch = r.uint("batch", t.batch);
    t.label_noise = r.number("label_noise", t.label_noise);
    t.data_seed = r.uint("data_seed", t.data_seed);
    t.teacher_seed = r.uint("teacher_seed", t.teacher_seed);
    t.precision = r.choice<Precision>("precision", t.precision, parse_precision);
    t.eps_mode = r.choice<EpsMode>("eps_mode", t.eps_mode, parse_eps_mode);
    r.finish();
    t.quant = quant;
    t.validate();
    return t;
}

inline std::vector<InterventionPlan> parse_plan(const SortedJson* j, std::uint64_t steps, const std::string& path) {
    std::vector<InterventionPlan> out;
    if (!j) return out;
    if (!j->is_array()) throw ConfigError(path, "expected a list");
    for (std::size_t i = 0; i < j->size(); ++i) {
        const std::string p = path + "[" + std::to_string(i) + "]";
        ObjectReader r((*j)[i], p);
        InterventionPlan plan;
        plan.trigger_step = ObjectReader::as_uint(r.require("step"), r.at("step"));
        const auto& a = r.require("action");
        if (!a.is_string()) throw ConfigError(r.at("action"), "expected a string");
        const auto kind = parse_intervention(a.get<std::string>());
        if (!kind) throw ConfigError(r.at("action"), "invalid action '" + a.get<std::string>() + "'");
        plan.action.kind = *kind;
        plan.action.conditional = r.boolean("conditional", false);
        r.finish();
        if (plan.action.conditional && plan.action.kind != InterventionKind::bump_exponent)
            throw ConfigError(r.at("conditional"), "only bump_exponent takes a condition");
        if (plan.trigger_step >= steps) throw ConfigError(r.at("step"), "trigger step beyond train.steps");
        out.push_back(plan);
    }
    return out;
}

inline SortedJson quant_to_json(const QuantConfig& q) {
    SortedJson j;
    MXSpec shared;
    for (QuantRole role : kAllRoles)
        if (q.formats[static_cast<std::size_t>(role)].is_mx()) {
            shared = q.formats[static_cast<std::size_t>(role)].mx;
            break;
        }
    SortedJson pts;
    for (QuantRole role : kAllRoles) pts[std::string(to_string(role))] = q.formats[static_cast<std::size_t>(role)].name();
    j["points"] = pts;
    j["block_size"] = shared.block_size;
    j["rounding"] = std::string(to_string(shared.rounding));
    j["flush_subnormals"] = shared.flush_subnormals;
    j["exponent_offset"] = shared.exponent_offset;
    j["conditional_bump"] = shared.conditional_bump;
    j["forward_only"] = q.forward_only;
    j["bf16_vector_ops"] = q.bf16_vector_ops;
    return j;
}

}  // namespace detail

/// Parses a JSON document. Error paths: "<root>", "model.depth",
/// "quant.points.grad_output", "plan[1].action", ...
inline ExperimentConfig parse_config_json(const nlohmann::json& j) {
    detail::ObjectReader r(j, "");
    ExperimentConfig c;
    c.model = detail::parse_model(r.require("model"));
    const auto quant = detail::parse_quant(r.get("quant"));
    c.train = detail::parse_train(r.require("train"), quant);
    c.plan = detail::parse_plan(r.get("plan"), c.train.steps, "plan");
    if (const auto* o = r.get("output_dir")) {
        if (!o->is_string() || o->get<std::string>().empty()) throw ConfigError("output_dir", "expected a non-empty path");
        c.output_dir = o->get<std::string>();
    }
    r.finish();
    return c;
}

inline ExperimentConfig parse_config(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text.begin(), text.end(), nullptr, true, /*ignore_comments=*/true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
    }
    return parse_config_json(j);
}

inline nlohmann::json config_to_json(const ExperimentConfig& c, bool with_output_dir = true) {
    nlohmann::json j;
    auto& m = j["model"];
    m["depth"] = c.model.depth;
    m["d_model"] = c.model.d_model;
    m["hidden_mult"] = c.model.effective_hidden_mult();
    m["activation"] = std::string(to_string(c.model.activation));
    m["layernorm"] = c.model.layernorm;
    m["init"] = std::string(to_string(c.model.init));
    m["seed"] = c.model.seed;
    auto& t = j["train"];
    t["lr"] = c.train.lr;
    t["schedule"] = std::string(to_string(c.train.schedule));
    t["lr_end"] = c.train.lr_end;
    t["optimizer"] = std::string(to_string(c.train.optimizer));
    t["batch"] = c.train.batch;
    t["steps"] = c.train.steps;
    t["label_noise"] = c.train.label_noise;
    t["data_seed"] = c.train.data_seed;
    t["teacher_seed"] = c.train.teacher_seed;
    t["precision"] = std::string(to_string(c.train.precision));
    t["eps_mode"] = std::string(to_string(c.train.eps_mode));
    j["quant"] = detail::quant_to_json(c.train.quant);
    j["plan"] = nlohmann::json::array();
    for (const auto& p : c.plan) {
        nlohmann::json e;
        e["step"] = p.trigger_step;
        e["action"] = std::string(to_string(p.action.kind));
        e["conditional"] = p.action.conditional;
        j["plan"].push_back(e);
    }
    if (with_output_dir) j["output_dir"] = c.output_dir;
    return j;
}

inline std::string emit_config(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

inline std::string config_fingerprint(const ExperimentConfig& c) { return fnv1a64_hex(config_to_json(c, false).dump()); }

}  // namespace mxlab
