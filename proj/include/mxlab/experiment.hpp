// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// File-level orchestration: runs, dual runs, sweeps and log analysis.
//
// Artifacts (all under the config's output_dir, <fp> = config fingerprint):
//   run-<fp>.jsonl                one RunRecord per step
//   run-<fp>.summary.json         written when the run ends
//   run-<fp>.ckpt                 periodic checkpoint, removed at the end
//   dual-<fp>.{hp,lp}.jsonl       twin logs; dual-<fp>.paired.jsonl, dual-<fp>.summary.json
//   sweep-<fp>.json / .csv        sweep table, one row per grid point
//   <log stem>.analysis.csv       metric rows written by analyze

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "mxlab/config.hpp"
#include "mxlab/diagnostics.hpp"
#include "mxlab/interventions.hpp"
#include "mxlab/run_log.hpp"
#include "mxlab/training.hpp"

namespace mxlab {

namespace fs = std::filesystem;

struct RunOptions {
    bool timing = false;                // adds wall_time to records (logs stop being reproducible)
    std::uint64_t checkpoint_every = 0;  // 0: no checkpoints
    bool resume = false;                 // continue from run-<fp>.ckpt when present
    std::uint64_t progress_every = 0;    // 0: silent
    std::ostream* progress = &std::cerr;
};

struct RunSummary {
    std::string fingerprint;
    RunStatus status = RunStatus::running;
    std::uint64_t steps = 0;  // records written
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    std::optional<std::uint64_t> divergence_step;
    std::vector<std::uint64_t> spike_steps;

    bool diverged() const { return status == RunStatus::diverged || status == RunStatus::diverged_nan; }
};

inline Json summary_to_json(const RunSummary& s) {
    Json j;
    j["fingerprint"] = s.fingerprint;
    j["version"] = kVersion;
    j["status"] = std::string(to_string(s.status));
    j["steps"] = s.steps;
    j["final_loss"] = detail::num(s.final_loss);
    j["divergence_step"] = s.divergence_step ? Json(*s.divergence_step) : Json(nullptr);
    j["spike_steps"] = s.spike_steps;
    return j;
}

inline RunSummary summary_from_json(const Json& j) {
    RunSummary s;
    s.fingerprint = j.at("fingerprint").get<std::string>();
    const auto st = parse_run_status(j.at("status").get<std::string>());
    if (!st) throw IoError("bad status in run summary");
    s.status = *st;
    s.steps = j.at("steps").get<std::uint64_t>();
    s.final_loss = detail::num_of(j, "final_loss");
    if (!j.at("divergence_step").is_null()) s.divergence_step = j.at("divergence_step").get<std::uint64_t>();
    s.spike_steps = j.at("spike_steps").get<std::vector<std::uint64_t>>();
    return s;
}

/// Spike steps (record step fields) over the finite, positive prefix.
inline std::vector<std::uint64_t> spike_steps_of(const std::vector<RunRecord>& log) {
    std::vector<double> losses;
    for (const auto& r : log) {
        if (!std::isfinite(r.loss) || !(r.loss > 0.0)) break;
        losses.push_back(r.loss);
    }
    std::vector<std::uint64_t> out;
    if (losses.empty()) return out;
    for (std::size_t i : detect_spikes(losses).spike_steps) out.push_back(log[i].step);
    return out;
}

inline RunSummary summarize(const std::string& fp, RunStatus status, const std::vector<RunRecord>& log) {
    RunSummary s;
    s.fingerprint = fp;
    s.status = status;
    s.steps = log.size();
    if (!log.empty()) s.final_loss = log.back().loss;
    s.divergence_step = divergence_step(log);
    s.spike_steps = spike_steps_of(log);
    return s;
}

inline void write_json_file(const fs::path& path, const Json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        os << j.dump(2) << '\n';
        if (!os) throw IoError("write failed on " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline Json read_json_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    try {
        return Json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

inline fs::path run_path(const ExperimentConfig& c, const std::string& suffix) {
    return fs::path(c.output_dir) / ("run-" + config_fingerprint(c) + suffix);
}

namespace detail {

/// Keeps the lines of a JSONL file whose "step" is below `step`.
inline void truncate_log(const fs::path& path, std::uint64_t step) {
    std::vector<std::string> keep;
    {
        std::ifstream is(path);
        if (!is) return;
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            try {
                if (Json::parse(line).at("step").get<std::uint64_t>() < step) keep.push_back(line);
            } catch (const std::exception&) {
                break;  // torn last line of a killed run
            }
        }
    }
    std::ofstream os(path, std::ios::trunc);
    for (const auto& l : keep) os << l << '\n';
    if (!os) throw IoError("cannot rewrite " + path.string());
}

template <typename T>
RunSummary run_typed(const ExperimentConfig& c, const RunOptions& opt) {
    const std::string fp = config_fingerprint(c);
    const fs::path log_path = run_path(c, ".jsonl"), ckpt = run_path(c, ".ckpt");
    fs::create_directories(c.output_dir);
    validate_plans(c.plan, c.train.steps);

    Trainer<T> tr(c.model, c.train);
    tr.set_before_step(intervention_hook(c.plan));
    tr.set_timing(opt.timing);
    std::vector<RunRecord> records;
    bool append = false;
    if (opt.resume && fs::exists(ckpt)) {
        std::ifstream is(ckpt, std::ios::binary);
        tr.load_checkpoint(is, fp);
        truncate_log(log_path, tr.step());
        records = read_run_log(log_path);
        if (records.size() != tr.step()) throw IoError(log_path.string() + " does not cover the checkpoint step");
        append = true;
    }
    JsonlWriter out(log_path, append);
    while (!tr.finished()) {
        records.push_back(tr.advance());
        out.write(to_json(records.back(), fp));
        const auto& r = records.back();
        if (opt.progress && opt.progress_every && (r.step % opt.progress_every == 0 || tr.finished()))
            *opt.progress << "[" << fp << "] step " << r.step << " loss " << r.loss << " grad_norm " << r.grad_norm
                          << '\n';
        if (opt.checkpoint_every && !tr.finished() && tr.step() % opt.checkpoint_every == 0) {
            const fs::path tmp = ckpt.string() + ".tmp";
            {
                std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
                if (!os) throw IoError("cannot open " + tmp.string());
                tr.save_checkpoint(os, fp);
            }
            fs::rename(tmp, ckpt);
        }
    }
    const auto s = summarize(fp, tr.status(), records);
    Json j = summary_to_json(s);
    j["config"] = config_to_json(c);
    write_json_file(run_path(c, ".summary.json"), j);
    std::error_code ec;
    fs::remove(ckpt, ec);
    return s;
}

}  // namespace detail

/// Trains one configuration (its intervention plan included) and writes its
/// log and summary.
inline RunSummary run_experiment(const ExperimentConfig& c, const RunOptions& opt = {}) {
    return c.train.precision == Precision::fp64 ? detail::run_typed<double>(c, opt) : detail::run_typed<float>(c, opt);
}

// ---------------------------------------------------------------------------
// Dual runs

struct DualSummary {
    std::string fingerprint;
    RunSummary hp, lp;
    std::uint64_t paired_steps = 0;
};

inline std::string dual_fingerprint(const ExperimentConfig& hp, const ExperimentConfig& lp) {
    return fnv1a64_hex(config_fingerprint(hp) + ":" + config_fingerprint(lp));
}

inline DualSummary dual_experiment(const ExperimentConfig& hp, const ExperimentConfig& lp, const RunOptions& opt = {}) {
    if (!(hp.model == lp.model)) throw ConfigError("model", "dual run twins must share the model config");
    if (!hp.plan.empty() || !lp.plan.empty()) throw ConfigError("plan", "dual runs take no intervention plan");
    const std::string fp = dual_fingerprint(hp, lp);
    const fs::path dir(hp.output_dir);
    const std::string stem = "dual-" + fp;
    JsonlWriter w_hp(dir / (stem + ".hp.jsonl"), false), w_lp(dir / (stem + ".lp.jsonl"), false),
        w_p(dir / (stem + ".paired.jsonl"), false);
    DualHooks hooks;
    hooks.timing = opt.timing;
    hooks.on_hp = [&](const RunRecord& r) { w_hp.write(to_json(r, fp)); };
    hooks.on_lp = [&](const RunRecord& r) {
        w_lp.write(to_json(r, fp));
        if (opt.progress && opt.progress_every && r.step % opt.progress_every == 0)
            *opt.progress << "[" << fp << "] lp step " << r.step << " loss " << r.loss << '\n';
    };
    hooks.on_paired = [&](const PairedRecord& p) { w_p.write(to_json(p, fp)); };
    const auto res = hp.train.precision == Precision::fp64 ? dual_run<double>(hp.model, hp.train, lp.train, hooks)
                                                           : dual_run<float>(hp.model, hp.train, lp.train, hooks);
    DualSummary s{fp, summarize(fp, res.hp.status, res.hp.records), summarize(fp, res.lp.status, res.lp.records),
                  res.paired.size()};
    Json j;
    j["fingerprint"] = fp;
    j["version"] = kVersion;
    j["hp"] = summary_to_json(s.hp);
    j["lp"] = summary_to_json(s.lp);
    j["paired_steps"] = s.paired_steps;
    j["hp"]["config"] = config_to_json(hp);
    j["lp"]["config"] = config_to_json(lp);
    write_json_file(dir / (stem + ".summary.json"), j);
    return s;
}

// ---------------------------------------------------------------------------
// Sweeps

/// Sets a dotted path ("train.lr", "quant.forward_only") in a raw config
/// document. A preset string met on the way becomes {"preset": name}.
inline void set_config_path(nlohmann::json& doc, const std::string& path, const nlohmann::json& value) {
    if (path.rfind("quant.", 0) == 0 && doc.contains("quant") && doc["quant"].is_string())
        doc["quant"] = nlohmann::json{{"preset", doc["quant"].get<std::string>()}};
    nlohmann::json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError(path, "empty path component in grid key");
        if (!node->is_object()) throw ConfigError(path, "grid key does not name an object field");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

struct SweepPoint {
    nlohmann::json overrides;  // {"train.lr": 0.001, ...}
    ExperimentConfig config;
};

/// Cartesian product of a grid {"path": [values...]}; keys vary in sorted
/// order with the last key fastest.
inline std::vector<SweepPoint> expand_grid(const nlohmann::json& base, const nlohmann::json& grid) {
    if (!grid.is_object() || grid.empty()) throw ConfigError("grid", "expected a non-empty object of value lists");
    std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;
    for (const auto& [k, v] : grid.items()) {
        if (!v.is_array() || v.empty()) throw ConfigError("grid." + k, "expected a non-empty list");
        axes.emplace_back(k, std::vector<nlohmann::json>(v.begin(), v.end()));
    }
    std::vector<SweepPoint> out;
    std::vector<std::size_t> idx(axes.size(), 0);
    while (true) {
        nlohmann::json doc = base, ov = nlohmann::json::object();
        for (std::size_t a = 0; a < axes.size(); ++a) {
            set_config_path(doc, axes[a].first, axes[a].second[idx[a]]);
            ov[axes[a].first] = axes[a].second[idx[a]];
        }
        out.push_back({ov, parse_config_json(doc)});
        std::size_t a = axes.size();
        while (a > 0) {
            --a;
            if (++idx[a] < axes[a].second.size()) break;
            idx[a] = 0;
            if (a == 0) return out;
        }
    }
}

struct SweepRow {
    SweepPoint point;
    std::optional<RunSummary> summary;
    std::string error;
    bool reused = false;
};

struct SweepResult {
    std::string fingerprint;
    std::vector<SweepRow> rows;
    fs::path table;
};

/// Runs every grid point on `jobs` threads. Points whose summary already
/// exists are reused; interrupted points resume from their checkpoint.
inline SweepResult run_sweep(const nlohmann::json& base, const nlohmann::json& grid, std::size_t jobs,
                             RunOptions opt = {}) {
    SweepResult res;
    const auto points = expand_grid(base, grid);
    const auto base_cfg = parse_config_json(base);
    res.fingerprint = fnv1a64_hex(config_fingerprint(base_cfg) + grid.dump());
    std::set<std::string> seen;
    for (const auto& p : points) {
        if (!seen.insert(config_fingerprint(p.config)).second)
            throw ConfigError("grid", "two grid points resolve to the same configuration");
        res.rows.push_back({p, std::nullopt, "", false});
    }
    if (opt.checkpoint_every == 0) opt.checkpoint_every = 500;
    opt.resume = true;

    std::atomic<std::size_t> next{0};
    std::mutex log_mu;
    auto worker = [&] {
        for (std::size_t i = next++; i < res.rows.size(); i = next++) {
            auto& row = res.rows[i];
            const auto& c = row.point.config;
            try {
                const auto sp = run_path(c, ".summary.json");
                if (fs::exists(sp)) {
                    const auto s = summary_from_json(read_json_file(sp));
                    if (s.fingerprint == config_fingerprint(c) && s.status != RunStatus::running) {
                        row.summary = s;
                        row.reused = true;
                    }
                }
                if (!row.reused) row.summary = run_experiment(c, opt);
            } catch (const std::exception& e) {
                row.error = e.what();
            }
            if (opt.progress) {
                std::lock_guard<std::mutex> lock(log_mu);
                *opt.progress << "[sweep " << res.fingerprint << "] point " << i + 1 << "/" << res.rows.size() << " "
                              << (row.summary ? to_string(row.summary->status) : std::string_view("error"))
                              << (row.reused ? " (reused)" : "") << '\n';
            }
        }
    };
    jobs = std::max<std::size_t>(1, std::min(jobs, res.rows.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    const fs::path dir(base_cfg.output_dir);
    Json doc;
    doc["fingerprint"] = res.fingerprint;
    doc["version"] = kVersion;
    doc["grid"] = Json::parse(grid.dump());
    doc["runs"] = Json::array();
    std::ofstream csv;
    res.table = dir / ("sweep-" + res.fingerprint + ".csv");
    fs::create_directories(dir);
    csv.open(res.table, std::ios::trunc);
    if (!csv) throw IoError("cannot open " + res.table.string());
    csv << "index,fingerprint";
    for (const auto& [k, v] : grid.items()) csv << ',' << k;
    csv << ",status,steps,final_loss,divergence_step,spike_count\n";
    for (std::size_t i = 0; i < res.rows.size(); ++i) {
        const auto& row = res.rows[i];
        Json r;
        r["index"] = i;
        r["fingerprint"] = config_fingerprint(row.point.config);
        r["overrides"] = Json::parse(row.point.overrides.dump());
        if (row.summary) {
            const auto& s = *row.summary;
            r["status"] = std::string(to_string(s.status));
            r["steps"] = s.steps;
            r["final_loss"] = detail::num(s.final_loss);
            r["divergence_step"] = s.divergence_step ? Json(*s.divergence_step) : Json(nullptr);
            r["spike_count"] = s.spike_steps.size();
        } else {
            r["status"] = "error";
            r["error"] = row.error;
        }
        doc["runs"].push_back(r);

        csv << i << ',' << r["fingerprint"].get<std::string>();
        for (const auto& [k, v] : grid.items()) {
            const auto cell = row.point.overrides.at(k);
            csv << ',' << (cell.is_string() ? cell.get<std::string>() : cell.dump());
        }
        if (row.summary) {
            const auto& s = *row.summary;
            char loss[40];
            std::snprintf(loss, sizeof loss, "%.17g", s.final_loss);
            csv << ',' << to_string(s.status) << ',' << s.steps << ',' << loss << ','
                << (s.divergence_step ? std::to_string(*s.divergence_step) : "") << ',' << s.spike_steps.size() << '\n';
        } else {
            csv << ",error,,,,\n";
        }
    }
    if (!csv) throw IoError("write failed on " + res.table.string());
    write_json_file(dir / ("sweep-" + res.fingerprint + ".json"), doc);
    return res;
}

// ---------------------------------------------------------------------------
// Analysis

struct LogAnalysis {
    fs::path file;
    std::string kind;  // "run" or "paired"
    std::string fingerprint;
    std::uint64_t steps = 0;
    std::vector<std::uint64_t> spike_steps;
    std::optional<std::uint64_t> divergence_step;
    std::optional<std::uint64_t> zeta_ema_above_one;  // paired logs: first step with EMA(zeta_lower) > 1
    fs::path metrics;
};

inline bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

/// Reports for every run log (loss EMA, spikes, divergence step, last-bin
/// fractions) and every paired log (zeta_lower, its EMA, cosine) in a
/// directory. Paired-log values are copied from the records unchanged.
inline std::vector<LogAnalysis> analyze_directory(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (e.is_regular_file() && has_suffix(name, ".jsonl")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<LogAnalysis> out;
    for (const auto& f : files) {
        const auto raw = read_jsonl(f);
        LogAnalysis a;
        a.file = f;
        a.fingerprint = raw.empty() ? "" : raw.front().value("fingerprint", "");
        a.steps = raw.size();
        std::vector<MetricRow> rows;
        const std::string name = f.filename().string();
        if (has_suffix(name, ".paired.jsonl")) {
            a.kind = "paired";
            std::vector<PairedRecord> log;
            for (const auto& j : raw) log.push_back(paired_record_from_json(j));
            rows = zeta_report(log);
            for (const auto& r : rows)
                if (r.metric == "zeta_lower_ema" && r.value > 1.0) {
                    a.zeta_ema_above_one = r.step;
                    break;
                }
        } else {
            a.kind = "run";
            std::vector<RunRecord> log;
            for (const auto& j : raw) log.push_back(run_record_from_json(j));
            a.spike_steps = spike_steps_of(log);
            a.divergence_step = divergence_step(log);
            Ema ema(kEmaHalfLife);
            for (const auto& r : log) {
                rows.push_back({r.step, "loss", r.loss, ""});
                if (std::isfinite(r.loss)) rows.push_back({r.step, "loss_ema", ema.update(r.loss), ""});
            }
            for (auto s : a.spike_steps) rows.push_back({s, "spike", 1.0, ""});
            if (a.divergence_step) rows.push_back({*a.divergence_step, "divergence_step", 1.0, ""});
            const auto ln = ln_overflow_report(log);
            rows.insert(rows.end(), ln.begin(), ln.end());
        }
        a.metrics = dir / (name.substr(0, name.size() - 6) + ".analysis.csv");
        std::ofstream os(a.metrics, std::ios::trunc);
        if (!os) throw IoError("cannot open " + a.metrics.string());
        write_metric_csv(os, rows);
        if (!os) throw IoError("write failed on " + a.metrics.string());
        out.push_back(a);
    }
    Json doc;
    doc["version"] = kVersion;
    doc["logs"] = Json::array();
    for (const auto& a : out) {
        Json j;
        j["file"] = a.file.filename().string();
        j["kind"] = a.kind;
        j["fingerprint"] = a.fingerprint;
        j["steps"] = a.steps;
        if (a.kind == "run") {
            j["spike_steps"] = a.spike_steps;
            j["divergence_step"] = a.divergence_step ? Json(*a.divergence_step) : Json(nullptr);
        } else {
            j["zeta_ema_above_one"] = a.zeta_ema_above_one ? Json(*a.zeta_ema_above_one) : Json(nullptr);
        }
        j["metrics"] = a.metrics.filename().string();
        doc["logs"].push_back(j);
    }
    write_json_file(dir / "analysis.json", doc);
    return out;
}

}  // namespace mxlab
