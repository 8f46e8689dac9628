// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-step telemetry records and their JSON-lines encoding.
//
// RunLog line:
//   {"fingerprint": "...", "version": "...", "step": 0, "loss": 1.2,
//    "grad_norm": 3.4, "lr": 0.0006, "last_bin_fraction": {"layer0.ln_gamma": 0.0, ...}}
//   plus "wall_time" (seconds since run start) only when timing is enabled.
// PairedLog line:
//   {"fingerprint": ..., "version": ..., "step", "eps_norm", "g_norm",
//    "zeta_lower", "cosine", "loss_hp", "loss_lp"}
// Non-finite numbers are written as null and read back as NaN.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#if __has_include(<nlohmann/json.hpp>)
#include <nlohmann/json.hpp>
#else
#include <json.hpp>
#endif

#include "mxlab/errors.hpp"

#ifndef MXLAB_VERSION
#define MXLAB_VERSION "0.1.0"
#endif

namespace mxlab {

inline constexpr const char* kVersion = MXLAB_VERSION;

using Json = nlohmann::ordered_json;

struct RunRecord {
    std::uint64_t step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    std::vector<std::pair<std::string, double>> last_bin_fraction;
    std::optional<double> wall_time;

    std::optional<double> fraction(const std::string& name) const {
        for (const auto& [n, v] : last_bin_fraction)
            if (n == name) return v;
        return std::nullopt;
    }
};

struct PairedRecord {
    std::uint64_t step = 0;
    double eps_norm = 0.0;
    double g_norm = 0.0;
    double zeta_lower = 0.0;  // NaN when g_norm == 0
    double cosine = 0.0;      // NaN when either gradient is zero
    double loss_hp = 0.0;
    double loss_lp = 0.0;
};

namespace detail {

inline Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline double num_of(const Json& j, const char* key) {
    const auto it = j.find(key);
    if (it == j.end()) throw IoError(std::string("log record lacks field '") + key + "'");
    if (it->is_null()) return std::numeric_limits<double>::quiet_NaN();
    if (!it->is_number()) throw IoError(std::string("log field '") + key + "' is not a number");
    return it->get<double>();
}

}  // namespace detail

inline Json to_json(const RunRecord& r, const std::string& fingerprint) {
    Json j;
    j["fingerprint"] = fingerprint;
    j["version"] = kVersion;
    j["step"] = r.step;
    j["loss"] = detail::num(r.loss);
    j["grad_norm"] = detail::num(r.grad_norm);
    j["lr"] = r.lr;
    Json f = Json::object();
    for (const auto& [n, v] : r.last_bin_fraction) f[n] = detail::num(v);
    j["last_bin_fraction"] = std::move(f);
    if (r.wall_time) j["wall_time"] = *r.wall_time;
    return j;
}

inline Json to_json(const PairedRecord& r, const std::string& fingerprint) {
    Json j;
    j["fingerprint"] = fingerprint;
    j["version"] = kVersion;
    j["step"] = r.step;
    j["eps_norm"] = detail::num(r.eps_norm);
    j["g_norm"] = detail::num(r.g_norm);
    j["zeta_lower"] = detail::num(r.zeta_lower);
    j["cosine"] = detail::num(r.cosine);
    j["loss_hp"] = detail::num(r.loss_hp);
    j["loss_lp"] = detail::num(r.loss_lp);
    return j;
}

inline RunRecord run_record_from_json(const Json& j) {
    RunRecord r;
    r.step = j.at("step").get<std::uint64_t>();
    r.loss = detail::num_of(j, "loss");
    r.grad_norm = detail::num_of(j, "grad_norm");
    r.lr = detail::num_of(j, "lr");
    if (const auto it = j.find("last_bin_fraction"); it != j.end())
        for (const auto& [k, v] : it->items())
            r.last_bin_fraction.emplace_back(k, v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
    if (const auto it = j.find("wall_time"); it != j.end()) r.wall_time = it->get<double>();
    return r;
}

inline PairedRecord paired_record_from_json(const Json& j) {
    PairedRecord r;
    r.step = j.at("step").get<std::uint64_t>();
    r.eps_norm = detail::num_of(j, "eps_norm");
    r.g_norm = detail::num_of(j, "g_norm");
    r.zeta_lower = detail::num_of(j, "zeta_lower");
    r.cosine = detail::num_of(j, "cosine");
    r.loss_hp = detail::num_of(j, "loss_hp");
    r.loss_lp = detail::num_of(j, "loss_lp");
    return r;
}

/// Append-only JSON-lines writer; every line is flushed so a crashed or
/// diverged run leaves a readable prefix.
class JsonlWriter {
public:
    JsonlWriter() = default;
    JsonlWriter(const std::filesystem::path& path, bool append) : path_(path) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        os_.open(path, append ? std::ios::app : std::ios::trunc);
        if (!os_) throw IoError("cannot open " + path.string() + " for writing");
    }
    bool is_open() const { return os_.is_open(); }
    void write(const Json& j) {
        os_ << j.dump() << '\n';
        os_.flush();
        if (!os_) throw IoError("write failed on " + path_.string());
    }

private:
    std::filesystem::path path_;
    std::ofstream os_;
};

inline std::vector<Json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::vector<Json> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(Json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<RunRecord> read_run_log(const std::filesystem::path& path) {
    std::vector<RunRecord> out;
    for (const auto& j : read_jsonl(path)) out.push_back(run_record_from_json(j));
    return out;
}

inline std::vector<PairedRecord> read_paired_log(const std::filesystem::path& path) {
    std::vector<PairedRecord> out;
    for (const auto& j : read_jsonl(path)) out.push_back(paired_record_from_json(j));
    return out;
}

}  // namespace mxlab
